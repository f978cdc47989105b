"""Training loop: batch selection, K-hop views, steps, versioned updates."""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .engine import Engine, TO_MIRROR
from .graph_store import DatasetBundle
from .models import Model, ModelSpec, accuracy, macro_f1, regularization
from .params import ParameterManager, ParameterVersion, make_optimizer
from .partitioner import ClusterAssignment, PartitionPlan, partition_even
from .scheduler import WorkItem, schedule
from .view import GraphView, build_view, full_view

STRATEGIES = ("global", "mini", "cluster")


class TrainingError(RuntimeError):
    """Non-finite loss or similar numerical failure."""

    def __init__(self, msg: str, step: int | None = None):
        super().__init__(msg)
        self.step = step


@dataclass(frozen=True)
class TrainingConfig:
    strategy: str = "global"
    partitions: int = 1
    gamma: int = 1
    batch_fraction: float = 0.01
    steps: int = 200
    optimizer: str = "adam"
    lr: float = 0.01
    update_mode: str = "sync"
    concurrency: int = 2
    fanout: tuple | None = None
    cluster_restrict: bool = False
    seed: int = 0
    deterministic: bool = False
    workers: int = 1
    eval_every: int = 1
    patience: int | None = 50
    contiguous: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.update_mode not in ("sync", "async"):
            raise ValueError(f"unknown update mode {self.update_mode!r}")
        if self.strategy == "mini" and not 0.0 < self.batch_fraction <= 1.0:
            raise ValueError("batch_fraction must be in (0, 1]")
        if self.strategy == "cluster" and self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.partitions < 1 or self.steps < 0:
            raise ValueError("partitions >= 1 and steps >= 0 required")
        if self.fanout is not None:
            object.__setattr__(self, "fanout", tuple(int(f) for f in self.fanout))


def select_batch(strategy: str, step: int, train_nodes: np.ndarray, seed: int = 0,
                 fraction: float = 1.0, clusters: ClusterAssignment | None = None, gamma: int = 1) -> np.ndarray:
    """Target set B_r for step ``step`` (sorted global ids)."""
    train_nodes = np.unique(np.asarray(train_nodes, dtype=np.int64))
    rng = np.random.default_rng([seed, step])
    if strategy == "global":
        out = train_nodes
    elif strategy == "mini":
        n = max(1, int(round(fraction * len(train_nodes))))
        out = np.sort(rng.choice(train_nodes, size=min(n, len(train_nodes)), replace=False))
    elif strategy == "cluster":
        if clusters is None:
            raise ValueError("cluster strategy needs a cluster assignment")
        # only clusters holding labelled training nodes can yield targets
        useful = np.unique(clusters.cluster_of[train_nodes])
        pick = rng.choice(useful, size=min(gamma, len(useful)), replace=False)
        out = train_nodes[np.isin(clusters.cluster_of[train_nodes], pick)]
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    if len(out) == 0:
        raise ValueError("empty batch")
    return out


@dataclass
class StepResult:
    loss: float
    data_loss: float
    grads: dict
    logits: np.ndarray
    targets: np.ndarray
    metrics: dict = field(default_factory=dict)
    input_grad: np.ndarray | None = None
    version: int = 0


class Trainer:
    """Ties model, partitioned engine, parameter manager and batching together."""

    def __init__(self, bundle: DatasetBundle, spec: ModelSpec, config: TrainingConfig,
                 clusters: ClusterAssignment | None = None, plan: PartitionPlan | None = None,
                 init: Mapping[str, np.ndarray] | None = None):
        self.bundle = bundle
        self.spec = spec
        self.config = config
        self.model = Model.build(spec)
        self.graph, self.coef = self.model.prepare(bundle.graph)
        if plan is None:
            plan = partition_even(self.graph, config.partitions, seed=config.seed, contiguous=config.contiguous)
        elif len(plan.master_of) != self.graph.num_nodes:
            raise ValueError("plan does not match graph")
        else:
            from .partitioner import plan_from_assignment
            plan = plan_from_assignment(self.graph, plan.master_of)
        self.plan = plan
        self.clusters = clusters
        self.engine = Engine(self.graph, plan, self.coef, exact=config.deterministic, workers=config.workers)
        self.labels = bundle.graph.labels
        params = dict(init) if init is not None else self.model.init_params(config.seed)
        self.manager = ParameterManager(params, make_optimizer(config.optimizer, config.lr), keep=64)
        self._view_cache: dict = {}
        self._eval_view: GraphView | None = None
        self.step_count = 0

    # ---- views

    def view_for(self, targets: np.ndarray, step: int) -> GraphView:
        cfg = self.config
        fan = cfg.fanout
        allowed = None
        if cfg.strategy == "cluster" and cfg.cluster_restrict and self.clusters is not None:
            chosen = np.unique(self.clusters.cluster_of[targets])
            allowed = np.isin(self.clusters.cluster_of, chosen)
        if fan is None and allowed is None:
            key = targets.tobytes()
            v = self._view_cache.get(key)
            if v is None:
                if len(self._view_cache) > 32:
                    self._view_cache.clear()
                v = self._view_cache[key] = build_view(self.graph, targets, self.spec.K)
            return v
        return build_view(self.graph, targets, self.spec.K, fanout=None if fan is None else fan[0],
                          seed=[cfg.seed, step], allowed=allowed)

    def batch(self, step: int) -> np.ndarray:
        cfg = self.config
        return select_batch(cfg.strategy, step, self.bundle.train_mask, cfg.seed, cfg.batch_fraction,
                            self.clusters, cfg.gamma)

    def dropout_masks(self, step: int) -> list | None:
        keep = self.spec.keep_prob
        if keep >= 1.0:
            return None
        n = self.graph.num_nodes
        return [np.random.default_rng([self.config.seed, step, k]).random((n, self.spec.dims[k]), dtype=np.float32) < keep
                for k in range(self.spec.K)]

    # ---- one step

    def train_step(self, view: GraphView, version: ParameterVersion, step: int = 0,
                   train: bool = True, h0: np.ndarray | None = None, input_grad: bool = False) -> StepResult:
        """Forward K layers, decode, loss, backward K+2 passes; never mutates ``version``."""
        t0 = time.perf_counter()
        eng = self.engine
        masks = self.dropout_masks(step) if train else None
        task = eng.new_task(view, self.model.programs, version.params, h0=h0, masks=masks, input_grad=input_grad)
        try:
            eng.forward(task)
            data_loss, logits = eng.decode_loss(task, self.model.decoder(), self.labels)
        except FloatingPointError as exc:
            raise TrainingError(f"{exc} at step {step}", step) from exc
        reg, reg_grads = regularization(version.params, self.model.reg_params(), self.spec.weight_decay,
                                        eng.numerics)
        loss = data_loss + reg
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at step {step}", step)
        eng.decode_backward(task)
        grads = eng.backward(task)
        for k, g in reg_grads.items():
            grads[k] = grads[k] + g if k in grads else g
        for k, v in version.params.items():
            if k not in grads:
                grads[k] = np.zeros_like(v)
        metrics = dict(task.counters)
        for kind, n in task.transport.messages.items():
            metrics["msgs:" + kind] = n
        metrics["msgs"] = sum(task.transport.messages.values())
        metrics["bytes"] = sum(task.transport.bytes.values())
        metrics["mirror_sync_msgs"] = task.transport.messages.get(TO_MIRROR, 0)
        metrics["touched_nodes"] = view.num_nodes
        metrics["wall_ms"] = 1000.0 * (time.perf_counter() - t0)
        return StepResult(loss, data_loss, grads, logits, view.targets, metrics,
                          eng.input_grad(task) if input_grad else None, version.version)

    def update_params(self, grads: Mapping[str, np.ndarray], based_on: int | None = None) -> ParameterVersion:
        return self.manager.update(grads, based_on)

    # ---- evaluation

    def predict(self, params: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        """Full-graph inference: logits for every node."""
        if params is None:
            params = self.manager.latest().params
        if self._eval_view is None:
            self._eval_view = full_view(self.graph, self.spec.K)
        eng = self.engine
        task = eng.new_task(self._eval_view, self.model.programs, params)
        eng.forward(task)
        return eng.decode_only(task, self.model.decoder())

    def evaluate(self, params=None, logits: np.ndarray | None = None) -> dict:
        if logits is None:
            logits = self.predict(params)
        out = {}
        for split, idx in (("train", self.bundle.train_mask), ("val", self.bundle.val_mask),
                           ("test", self.bundle.test_mask)):
            idx = np.asarray(idx, dtype=np.int64)
            out[f"{split}_acc"] = accuracy(logits[idx], self.labels[idx])
            out[f"{split}_f1"] = macro_f1(np.argmax(logits[idx], 1), self.labels[idx], logits.shape[1]) if len(idx) else float("nan")
        return out

    # ---- loop

    def fit(self, steps: int | None = None, metrics_path=None, on_step=None) -> dict:
        cfg = self.config
        steps = cfg.steps if steps is None else steps
        if cfg.update_mode == "async" and not cfg.deterministic:
            return self._fit_async(steps, metrics_path, on_step)
        writer = MetricsWriter(metrics_path, timing=not cfg.deterministic)
        best = {"val_acc": -1.0, "version": 0, "step": -1, "params": self.manager.latest().params}
        losses = []
        since_best = 0
        try:
            for step in range(steps):
                version = self.manager.latest()
                targets = self.batch(step)
                res = self.train_step(self.view_for(targets, step), version, step)
                losses.append(res.loss)
                new = self.update_params(res.grads, version.version)
                if not all(np.isfinite(a).all() for a in new.params.values()):
                    raise TrainingError(f"non-finite parameters after step {step}", step)
                self.step_count = step + 1
                ev = {}
                if cfg.eval_every and (step + 1) % cfg.eval_every == 0 and len(self.bundle.val_mask):
                    try:
                        ev = self.evaluate(new.params)
                    except FloatingPointError as exc:
                        raise TrainingError(f"{exc} at step {step}", step) from exc
                    if ev["val_acc"] > best["val_acc"]:
                        best = {"val_acc": ev["val_acc"], "version": self.manager.latest_version,
                                "step": step, "params": self.manager.latest().params}
                        since_best = 0
                    else:
                        since_best += 1
                tr_acc = accuracy(res.logits, self.labels[res.targets])
                writer.row(step, res.loss, tr_acc, ev.get("val_acc", float("nan")), res.metrics["msgs"],
                           res.metrics["wall_ms"])
                if on_step is not None and on_step(step, res, ev):
                    break
                if cfg.patience is not None and since_best >= cfg.patience:
                    break
        finally:
            writer.close()
        if best["step"] < 0:
            best.update(version=self.manager.latest_version, params=self.manager.latest().params)
        return {"losses": losses, "best": best, "steps": len(losses)}

    def _fit_async(self, steps: int, metrics_path, on_step) -> dict:
        """Concurrent steps against whatever version is latest; updates land on arrival."""
        cfg = self.config
        writer = MetricsWriter(metrics_path)
        losses: dict[int, float] = {}
        lock = threading.Lock()

        def run(step: int):
            version = self.manager.latest()
            res = self.train_step(self.view_for(self.batch(step), step), version, step)
            self.update_params(res.grads, version.version)
            with lock:
                losses[step] = res.loss
                writer.row(step, res.loss, accuracy(res.logits, self.labels[res.targets]), float("nan"),
                           res.metrics["msgs"], res.metrics["wall_ms"])
                if on_step is not None:
                    on_step(step, res, {})
            return res.loss

        tasks = [WorkItem(s, "step", (lambda s=s: run(s))) for s in range(steps)]
        try:
            schedule(tasks, workers=max(1, cfg.concurrency))
        finally:
            writer.close()
        self.step_count = steps
        ev = self.evaluate() if len(self.bundle.val_mask) else {}
        best = {"val_acc": ev.get("val_acc", float("nan")), "version": self.manager.latest_version,
                "step": steps - 1, "params": self.manager.latest().params}
        return {"losses": [losses[s] for s in sorted(losses)], "best": best, "steps": steps,
                "staleness": list(self.manager.staleness)}


class MetricsWriter:
    HEADER = "step\tloss\ttrain_acc\tval_acc\tmsgs\twall_ms"

    def __init__(self, path=None, timing: bool = True):
        self.fh = open(path, "w", encoding="utf-8") if path is not None else None
        self.timing = timing
        if self.fh:
            self.fh.write(self.HEADER + "\n")

    def row(self, step, loss, train_acc, val_acc, msgs, wall_ms) -> None:
        if self.fh:
            wall = f"{wall_ms:.3f}" if self.timing else "0"
            self.fh.write(f"{step}\t{loss!r}\t{train_acc!r}\t{val_acc!r}\t{int(msgs)}\t{wall}\n")

    def close(self) -> None:
        if self.fh:
            self.fh.close()
            self.fh = None

