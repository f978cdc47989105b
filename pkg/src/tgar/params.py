"""Versioned parameter snapshots and optimizers."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

import numpy as np


class VersionError(KeyError):
    pass


def _frozen(params: Mapping[str, np.ndarray]) -> Mapping[str, np.ndarray]:
    out = {}
    for k in sorted(params):
        a = np.array(params[k], dtype=np.float64, copy=True)
        a.setflags(write=False)
        out[k] = a
    return MappingProxyType(out)


@dataclass(frozen=True, eq=False)
class ParameterVersion:
    version: int
    params: Mapping[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]


class SGD:
    def __init__(self, lr: float = 0.01):
        self.lr = lr

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict:
        return {k: v - self.lr * grads[k] if k in grads else v for k, v in params.items()}

    def state(self) -> dict:
        return {}


class Adam:
    """Adam with one global moment state shared by all concurrent steps."""

    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads) -> dict:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for k, w in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = w
                continue
            m = self.m.get(k, np.zeros_like(w))
            v = self.v.get(k, np.zeros_like(w))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            out[k] = w - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out

    def state(self) -> dict:
        return {"t": self.t}


def make_optimizer(name: str, lr: float, **kw):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr, **kw)
    raise ValueError(f"unknown optimizer {name!r}")


class ParameterManager:
    """Single writer of immutable, monotonically numbered parameter versions.

    Readers get whole snapshots; a snapshot is published by swapping one
    reference under the lock, so a reader can never see a half-updated set.
    """

    def __init__(self, initial: Mapping[str, np.ndarray], optimizer=None, keep: int | None = None):
        self._lock = threading.Lock()
        self._versions: dict[int, ParameterVersion] = {0: ParameterVersion(0, _frozen(initial))}
        self._latest = 0
        self.optimizer = optimizer or SGD()
        self.keep = keep
        self.staleness: list[int] = []

    @property
    def latest_version(self) -> int:
        return self._latest

    def latest(self) -> ParameterVersion:
        with self._lock:
            return self._versions[self._latest]

    def fetch(self, version: int | None = None) -> ParameterVersion:
        with self._lock:
            v = self._latest if version is None else version
            try:
                return self._versions[v]
            except KeyError:
                raise VersionError(f"version {v} not retained") from None

    def update(self, grads: Mapping[str, np.ndarray], based_on: int | None = None) -> ParameterVersion:
        """Apply the optimizer to the latest version and publish the next one.

        ``based_on`` is the version the gradients were computed from; the gap
        to the latest version is recorded as staleness (0 in sync mode).
        """
        with self._lock:
            cur = self._versions[self._latest]
            for k, g in grads.items():
                if k not in cur.params:
                    raise KeyError(f"gradient for unknown parameter {k!r}")
                if np.shape(g) != cur.params[k].shape:
                    raise ValueError(f"gradient shape {np.shape(g)} != {cur.params[k].shape} for {k!r}")
            if based_on is not None:
                self.staleness.append(self._latest - based_on)
            new = ParameterVersion(self._latest + 1, _frozen(self.optimizer.step(cur.params, grads)))
            self._versions[new.version] = new
            self._latest = new.version
            if self.keep is not None:
                for old in [v for v in self._versions if v <= self._latest - self.keep]:
                    del self._versions[old]
            return new

    def publish(self, params: Mapping[str, np.ndarray]) -> ParameterVersion:
        """Publish an externally computed parameter set (e.g. a restored checkpoint)."""
        with self._lock:
            new = ParameterVersion(self._latest + 1, _frozen(params))
            self._versions[new.version] = new
            self._latest = new.version
            return new
