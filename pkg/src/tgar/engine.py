"""Staged NN-TGAR execution over a master/mirror partitioned graph.

One layer runs as NN-Transform (per master node), NN-Gather (per owned edge),
Sum (per-destination accumulation, with mirror partials shipped to masters)
and NN-Apply (per master node).  The backward replays the same stages in
reverse, and Reduce merges every parameter-gradient contribution in sorted
``(partition, layer, op)`` order.

Partitions are simulated workers: each only reads its own layout and frames,
and every cross-partition value travels through :class:`Transport`.
"""

from __future__ import annotations

import threading
from collections import Counter, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .graph_store import Graph
from .partitioner import PartitionPlan
from .view import GraphView, ViewError

OP_TRANSFORM, OP_GATHER_CSR, OP_GATHER_CSC, OP_APPLY, OP_DECODE = range(5)
ACC_KINDS = ("sum", "mean", "weighted")

# StageMessage kinds
TO_MIRROR = "master_to_mirror_value"
TO_MIRROR_STATE = "master_to_mirror_state"
TO_MIRROR_GRAD = "master_to_mirror_grad"
TO_MASTER = "mirror_to_master_partial"
TO_MASTER_GRAD = "gradient_to_dest"


class TransportError(RuntimeError):
    pass


class ProtocolError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# programs


@dataclass(frozen=True)
class LayerProgram:
    """User functions of one layer, each written against a :class:`Tape`.

    transform(tape, h, P) -> n          per node
    gather(tape, n_src, n_dst, e, c, P) -> (message, score | None)   per edge
    apply(tape, n, M, P) -> h           per node
    ``P(name)`` returns the bound parameter Var.  ``c`` is the per-edge
    coefficient column, ``e`` the edge features (or None).
    """

    name: str
    transform: Callable
    gather: Callable
    acc: str
    apply: Callable
    param_names: tuple = ()
    uses_dst: bool = False
    uses_edge_features: bool = False
    keep_prob: float = 1.0
    mean_degree: str = "view"

    def __post_init__(self):
        if self.acc not in ACC_KINDS:
            raise ValueError(f"unknown acc kind {self.acc!r}")
        if self.acc == "weighted" and self.mean_degree != "view":
            raise ValueError("mean_degree only applies to acc='mean'")


class _Bound:
    def __init__(self, tape: Tape, values: Mapping[str, np.ndarray]):
        self.tape, self.values = tape, values

    def __call__(self, name: str) -> Var:
        try:
            return self.tape.bind(name, self.values[name])
        except KeyError:
            raise KeyError(f"parameter {name!r} missing from parameter set") from None


# --------------------------------------------------------------------------
# transport


@dataclass
class StageMessage:
    kind: str
    src: int
    ids: np.ndarray
    payload: object


class Transport:
    """Reliable in-memory channels, FIFO per (sender, receiver) pair.

    A message carries rows for several nodes; each row counts as one logical
    message (one per node and receiving partition).
    """

    def __init__(self, P: int):
        self.P = P
        self._queues: dict[tuple[int, int], deque] = {}
        self._lock = threading.Lock()
        self.messages: Counter = Counter()
        self.bytes: Counter = Counter()
        self.packets: Counter = Counter()

    def send(self, kind: str, src: int, dst: int, ids: np.ndarray, payload) -> None:
        if not 0 <= dst < self.P or dst == src:
            raise TransportError(f"undeliverable partition {dst} from {src}")
        nbytes = sum(np.asarray(p).nbytes for p in (payload if isinstance(payload, tuple) else (payload,)))
        with self._lock:
            self._queues.setdefault((src, dst), deque()).append(StageMessage(kind, src, ids, payload))
            self.messages[kind] += len(ids)
            self.bytes[kind] += nbytes
            self.packets[kind] += 1

    def receive(self, dst: int, kind: str) -> list[StageMessage]:
        """Pop every pending ``kind`` message for ``dst``, ascending by sender."""
        out = []
        with self._lock:
            for src in range(self.P):
                q = self._queues.get((src, dst))
                if not q:
                    continue
                keep = deque()
                while q:
                    m = q.popleft()
                    (out if m.kind == kind else keep).append(m)
                self._queues[(src, dst)] = keep
        return out

    def pending(self) -> int:
        return sum(len(q) for q in self._queues.values())


# --------------------------------------------------------------------------
# layouts


@dataclass(frozen=True, eq=False)
class LayerLayout:
    """What partition ``p`` touches in layer ``k`` of one view.

    t_rows: masters transformed (need h^{k-1});  a_rows: masters applied.
    CSR edges: owned, destination a local master.  CSC edges: owned,
    destination a mirror here.  Positions index t_rows / a_rows / mirrors.
    """

    p: int
    t_rows: np.ndarray
    a_rows: np.ndarray
    a_in_t: np.ndarray
    csr_edges: np.ndarray
    csr_src: np.ndarray
    csr_dst: np.ndarray
    csc_edges: np.ndarray
    csc_src: np.ndarray
    csc_dst: np.ndarray
    mirrors: np.ndarray
    mirror_owner: np.ndarray


def _positions(sorted_ids: np.ndarray, ids: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(sorted_ids, ids)
    if len(ids) and (np.any(pos >= len(sorted_ids)) or np.any(sorted_ids[np.minimum(pos, len(sorted_ids) - 1)] != ids)):
        raise ViewError("inactive node touched")
    return pos


def build_layouts(graph: Graph, plan: PartitionPlan, view: GraphView) -> list:
    """``layouts[k][p]`` for k = 1..K; ``layouts[0][p]`` holds the layer-0 rows."""
    L = view.max_layer
    rows = [[plan.masters_of[p][L[plan.masters_of[p]] >= k] for p in range(plan.partition_count)]
            for k in range(view.K + 1)]
    out: list = [rows[0]]
    for k in range(1, view.K + 1):
        used = view.edge_mask & (L[graph.dst] >= k)
        if np.any(L[graph.src[used]] < k - 1):
            raise ViewError(f"layer {k} uses an edge whose source is inactive")
        per = []
        for p in range(plan.partition_count):
            own = plan.edges_of[p]
            e = own[used[own]]
            local = plan.master_of[graph.dst[e]] == p
            csr, csc = e[local], e[~local]
            t_rows, a_rows = rows[k - 1][p], rows[k][p]
            mirrors = np.unique(graph.dst[csc])
            per.append(LayerLayout(
                p, t_rows, a_rows, _positions(t_rows, a_rows),
                csr, _positions(t_rows, graph.src[csr]), _positions(a_rows, graph.dst[csr]),
                csc, _positions(t_rows, graph.src[csc]), _positions(mirrors, graph.dst[csc]),
                mirrors, plan.master_of[mirrors],
            ))
        out.append(per)
    return out


# --------------------------------------------------------------------------
# frames and tasks


@dataclass
class Frame:
    """Per (partition, layer) activations and tapes for one task."""

    t_tape: Tape | None = None
    h_in: Var | None = None
    n: Var | None = None
    mirror_n: np.ndarray | None = None
    gathers: dict = field(default_factory=dict)
    count: np.ndarray | None = None
    z: np.ndarray | None = None
    mx: np.ndarray | None = None
    M_val: np.ndarray | None = None
    mirror_max: np.ndarray | None = None
    a_tape: Tape | None = None
    n_a: Var | None = None
    M: Var | None = None
    h_out: Var | None = None


@dataclass
class _GatherPass:
    tape: Tape
    edges: np.ndarray
    n_src: Var
    n_dst: Var | None
    msg: Var
    score: Var | None
    weights: np.ndarray | None = None


@dataclass
class Contribution:
    partition: int
    layer: int
    op: int
    name: str
    partial: object


@dataclass
class Task:
    """One forward/backward over a GraphView."""

    view: GraphView
    layouts: list
    programs: Sequence[LayerProgram]
    params: Mapping[str, np.ndarray]
    coef: np.ndarray
    transport: Transport
    numerics: ad.FastNumerics
    masks: Sequence | None = None
    h: list = field(default_factory=list)
    g_h: list = field(default_factory=list)
    frames: dict = field(default_factory=dict)
    contributions: list = field(default_factory=list)
    counters: Counter = field(default_factory=Counter)
    loss_tapes: dict = field(default_factory=dict)
    input_grad: bool = False
    _lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def K(self) -> int:
        return self.view.K

    def frame(self, p: int, k: int) -> Frame:
        key = (p, k)
        with self._lock:
            fr = self.frames.get(key)
            if fr is None:
                fr = self.frames[key] = Frame()
                self.counters["frames_allocated"] += 1
        return fr

    def release(self, p: int, k: int) -> None:
        with self._lock:
            if self.frames.pop((p, k), None) is not None:
                self.counters["frames_released"] += 1

    def contribute(self, p: int, k: int, op: int, tape: Tape) -> None:
        grads = tape.param_grads()
        with self._lock:
            for name in sorted(grads):
                self.contributions.append(Contribution(p, k, op, name, grads[name]))

    def count(self, key: str, n: int) -> None:
        with self._lock:
            self.counters[key] += n


# --------------------------------------------------------------------------
# reduce


def reduce_params(contributions: Sequence[Contribution], numerics: ad.FastNumerics = ad.FAST) -> dict:
    """Sum contributions per parameter in (partition, layer, op) order."""
    by_name: dict[str, list] = {}
    for c in sorted(contributions, key=lambda c: (c.partition, c.layer, c.op, c.name)):
        by_name.setdefault(c.name, []).append(c.partial)
    out = {}
    for name, parts in by_name.items():
        shapes = {np.shape(p) for p in parts}
        if len(shapes) != 1:
            raise ad.ShapeError(f"parameter {name!r}: contribution shapes differ {sorted(shapes)}")
        out[name] = numerics.finalize(numerics.merge(parts))
    return out


# --------------------------------------------------------------------------
# engine


class Engine:
    """Runs layer programs over a partitioned graph.

    ``exact=True`` uses order-independent accumulation, which makes losses
    and reduced gradients bitwise identical for any partition count.
    ``workers`` > 1 runs the per-partition stages on a thread pool.
    """

    def __init__(self, graph: Graph, plan: PartitionPlan, coef: np.ndarray | None = None,
                 exact: bool = False, workers: int = 1):
        if len(plan.master_of) != graph.num_nodes:
            raise ValueError("plan does not match graph")
        self.graph = graph
        self.plan = plan
        self.P = plan.partition_count
        self.coef = graph.edge_weights if coef is None else np.asarray(coef, dtype=np.float64)
        if len(self.coef) != graph.num_edges:
            raise ValueError("one coefficient per edge required")
        self.numerics = ad.numerics(exact)
        self.workers = max(1, int(workers))
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None
        self._in_degree = graph.in_degree().astype(np.float64)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _each(self, fn: Callable[[int], object]) -> list:
        if self._pool is None:
            return [fn(p) for p in range(self.P)]
        return list(self._pool.map(fn, range(self.P)))

    # ---- task setup

    def new_task(self, view: GraphView, programs: Sequence[LayerProgram], params: Mapping[str, np.ndarray],
                 h0: np.ndarray | None = None, masks: Sequence | None = None,
                 input_grad: bool = False) -> Task:
        if len(programs) != view.K:
            raise ValueError(f"{len(programs)} layer programs for K={view.K}")
        if view.graph is not self.graph:
            raise ValueError("view was built on a different graph")
        layouts = build_layouts(self.graph, self.plan, view)
        task = Task(view, layouts, list(programs), params, self.coef, Transport(self.P), self.numerics, masks,
                    input_grad=input_grad)
        x = self.graph.node_features if h0 is None else ad.check_finite(np.asarray(h0, dtype=np.float64), "h0")
        task.h = [[x[rows] for rows in layouts[0]]] + [[None] * self.P for _ in range(view.K)]
        task.g_h = [[None] * self.P for _ in range(view.K + 1)]
        return task

    # ---- master/mirror sync

    def sync_master_mirror(self, task: Task, k: int, kind: str, values: Sequence[np.ndarray]) -> list:
        """Deliver each master's row (over its ``a_rows``) to every partition mirroring it.

        Returns, per partition, an array aligned with that partition's mirror list.
        """
        lay = task.layouts[k]

        def send(p):
            for q in range(self.P):
                if q == p:
                    continue
                sel = lay[q].mirror_owner == p
                if not sel.any():
                    continue
                ids = lay[q].mirrors[sel]
                pos = _positions(lay[p].a_rows, ids)
                task.transport.send(kind, p, q, ids, values[p][pos])

        self._each(send)

        def recv(q):
            L = lay[q]
            width = values[0].shape[1:] if len(values) else ()
            out = np.zeros((len(L.mirrors),) + tuple(width))
            got = np.zeros(len(L.mirrors), dtype=bool)
            for m in task.transport.receive(q, kind):
                pos = _positions(L.mirrors, m.ids)
                if got[pos].any():
                    raise ProtocolError("mirror value delivered twice")
                got[pos] = True
                out[pos] = m.payload
            if not got.all():
                raise ProtocolError(f"partition {q} missing mirror values at layer {k}")
            return out

        return self._each(recv)

    def _ship_partials(self, task: Task, k: int, kind: str, partials: Sequence, binned: bool = True) -> list:
        """Mirror rows of ``partials[q]`` go to their masters; returns each master's inbox."""
        lay = task.layouts[k]
        take = task.numerics.partial_rows if binned else (lambda a, idx: a[idx])

        def send(q):
            L = lay[q]
            for p in np.unique(L.mirror_owner).tolist():
                sel = np.flatnonzero(L.mirror_owner == p)
                task.transport.send(kind, q, p, L.mirrors[sel], take(partials[q], sel))

        self._each(send)
        return [task.transport.receive(p, kind) for p in range(self.P)]

    # ---- forward

    def forward_layer(self, task: Task, k: int) -> None:
        prog = task.programs[k - 1]
        lay = task.layouts[k]
        num = task.numerics
        params = task.params
        g = self.graph

        def transform(p):
            L, fr = lay[p], task.frame(p, k)
            tape = Tape(num)
            # layer-0 rows were checked on construction; later rows by the tape
            h = tape.leaf(task.h[k - 1][p], needs_grad=k > 1 or task.input_grad, check=False)
            x = h
            if task.masks is not None and prog.keep_prob < 1.0:
                x = ad.dropout(tape, h, task.masks[k - 1][L.t_rows], prog.keep_prob)
            fr.t_tape, fr.h_in = tape, h
            fr.n = prog.transform(tape, x, _Bound(tape, params))
            if fr.n.value.shape[0] != len(L.t_rows):
                raise ad.ShapeError("transform must preserve the row count")

        self._each(transform)
        n_a = [task.frames[p, k].n.value[lay[p].a_in_t] for p in range(self.P)]
        mirror_n = self.sync_master_mirror(task, k, TO_MIRROR, n_a)

        def gather(p):
            L, fr = lay[p], task.frames[p, k]
            fr.mirror_n = mirror_n[p]
            nv = fr.n.value
            task.count("csr_mirror_dst", int(np.count_nonzero(self.plan.master_of[g.dst[L.csr_edges]] != p)))
            for op, edges, src, dst_vals in (
                (OP_GATHER_CSR, L.csr_edges, L.csr_src, lambda: nv[L.a_in_t[L.csr_dst]]),
                (OP_GATHER_CSC, L.csc_edges, L.csc_src, lambda: fr.mirror_n[L.csc_dst]),
            ):
                if len(edges) == 0:
                    continue
                tape = Tape(num)
                n_src = tape.leaf(nv[src])
                n_dst = tape.leaf(dst_vals()) if prog.uses_dst else None
                feat = None
                if prog.uses_edge_features:
                    if g.edge_features is None:
                        raise ValueError(f"{prog.name} needs edge features")
                    feat = tape.const(g.edge_features[edges])
                c = tape.const(task.coef[edges][:, None])
                msg, score = prog.gather(tape, n_src, n_dst, feat, c, _Bound(tape, params))
                if prog.acc == "weighted" and score is None:
                    raise ProtocolError("weighted accumulation needs a score")
                fr.gathers[op] = _GatherPass(tape, edges, n_src, n_dst, msg, score)
                task.count("gather_invocations", len(edges))

        self._each(gather)
        if prog.acc == "weighted":
            self._attention_normalizer(task, k)
        self._accumulate(task, k, prog)

        def apply(p):
            L, fr = lay[p], task.frames[p, k]
            tape = Tape(num)
            fr.a_tape = tape
            fr.n_a = tape.leaf(fr.n.value[L.a_in_t])
            fr.M = tape.leaf(fr.M_val)
            fr.h_out = prog.apply(tape, fr.n_a, fr.M, _Bound(tape, params))
            task.h[k][p] = fr.h_out.value

        self._each(apply)

    def _attention_normalizer(self, task: Task, k: int) -> None:
        """First sub-pass: exact per-destination maximum of the scores."""
        lay = task.layouts[k]

        def local(p):
            L, fr = lay[p], task.frames[p, k]
            mx = np.full(len(L.a_rows), -np.inf)
            mm = np.full(len(L.mirrors), -np.inf)
            if OP_GATHER_CSR in fr.gathers:
                np.maximum.at(mx, L.csr_dst, fr.gathers[OP_GATHER_CSR].score.value[:, 0])
            if OP_GATHER_CSC in fr.gathers:
                np.maximum.at(mm, L.csc_dst, fr.gathers[OP_GATHER_CSC].score.value[:, 0])
            fr.mx = mx
            return mm

        part = self._each(local)
        # max is exact in any order, so plain arrays travel here
        inbox = self._ship_partials(task, k, TO_MASTER, part, binned=False)
        for p in range(self.P):
            fr = task.frames[p, k]
            for m in inbox[p]:
                pos = _positions(lay[p].a_rows, m.ids)
                fr.mx[pos] = np.maximum(fr.mx[pos], m.payload)
        mirror_max = self.sync_master_mirror(task, k, TO_MIRROR_STATE, [task.frames[p, k].mx[:, None] for p in range(self.P)])

        def weights(p):
            L, fr = lay[p], task.frames[p, k]
            fr.mirror_max = mirror_max[p][:, 0]
            for op, dst_max in ((OP_GATHER_CSR, lambda: fr.mx[L.csr_dst]), (OP_GATHER_CSC, lambda: fr.mirror_max[L.csc_dst])):
                gp = fr.gathers.get(op)
                if gp is not None:
                    gp.weights = np.exp(gp.score.value[:, 0] - dst_max())[:, None]

        self._each(weights)

    def _message_width(self, task: Task, k: int) -> int:
        """Message width, agreed across partitions (some may own no edges)."""
        widths = {gp.msg.value.shape[1] for p in range(self.P) for gp in task.frames[p, k].gathers.values()}
        if len(widths) > 1:
            raise ad.ShapeError(f"layer {k}: message widths differ {sorted(widths)}")
        if widths:
            return widths.pop()
        return task.frames[0, k].n.value.shape[1]

    def _accumulate(self, task: Task, k: int, prog: LayerProgram) -> None:
        """Sum stage: local CSR partials, CSC partials shipped to masters, merge."""
        lay = task.layouts[k]
        num = task.numerics
        weighted = prog.acc == "weighted"

        def local(p):
            L, fr = lay[p], task.frames[p, k]
            width = prog_width[0] + 2  # count column, normalizer column
            own = num.partial_zeros((len(L.a_rows), width))
            mir = num.partial_zeros((len(L.mirrors), width))
            for op, target, dst, count in ((OP_GATHER_CSR, own, L.csr_dst, len(L.a_rows)),
                                           (OP_GATHER_CSC, mir, L.csc_dst, len(L.mirrors))):
                gp = fr.gathers.get(op)
                if gp is None:
                    continue
                w = gp.weights if weighted else np.ones((len(gp.edges), 1))
                rows = np.hstack([np.ones((len(gp.edges), 1)), w, w * gp.msg.value])
                target += num.segment_sum(rows, dst, count)
            return own, mir

        prog_width = [self._message_width(task, k)]

        parts = self._each(local)
        inbox = self._ship_partials(task, k, TO_MASTER, [m for _, m in parts])

        def merge(p):
            L, fr = lay[p], task.frames[p, k]
            acc = parts[p][0]
            for m in inbox[p]:
                num.partial_add_rows(acc, _positions(L.a_rows, m.ids), m.payload)
            tot = num.finalize(acc)
            count, z, S = tot[:, 0], tot[:, 1], tot[:, 2:]
            if prog.acc == "mean" and prog.mean_degree == "global":
                count = self._in_degree[L.a_rows]
            fr.count = count
            fr.z = z
            denom = z if weighted else (count if prog.acc == "mean" else np.ones_like(z))
            safe = np.where(denom > 0, denom, 1.0)
            fr.M_val = np.where(denom[:, None] > 0, S / safe[:, None], 0.0)

        self._each(merge)

    # ---- backward

    def backward_layer(self, task: Task, k: int) -> None:
        prog = task.programs[k - 1]
        lay = task.layouts[k]
        num = task.numerics
        weighted = prog.acc == "weighted"

        def apply_back(p):
            L, fr = lay[p], task.frames[p, k]
            gh = task.g_h[k][p]
            if gh is None:
                gh = np.zeros_like(fr.h_out.value)
            fr.a_tape.backward([(fr.h_out, gh)])
            task.contribute(p, k, OP_APPLY, fr.a_tape)
            gM = fr.M.grad if fr.M.grad is not None else np.zeros_like(fr.M.value)
            if prog.acc == "mean":
                gM = gM / np.where(fr.count > 0, fr.count, 1.0)[:, None]
            if weighted:
                payload = np.hstack([gM, np.where(fr.z > 0, fr.z, 1.0)[:, None], fr.M_val])
            else:
                payload = gM
            return payload

        payload = self._each(apply_back)
        mirror_payload = self.sync_master_mirror(task, k, TO_MIRROR_GRAD, payload)

        def gather_back(p):
            L, fr = lay[p], task.frames[p, k]
            width = fr.n.value.shape[1]
            src_part = num.partial_zeros((len(L.t_rows), width))
            dst_part = num.partial_zeros((len(L.t_rows), width))
            mir_part = num.partial_zeros((len(L.mirrors), width))
            for op, rows, dst in ((OP_GATHER_CSR, payload[p], L.csr_dst), (OP_GATHER_CSC, mirror_payload[p], L.csc_dst)):
                gp = fr.gathers.get(op)
                if gp is None:
                    continue
                d = gp.msg.value.shape[1]
                g_dst = rows[dst, :d]
                seeds = []
                if weighted:
                    alpha = gp.weights / rows[dst, d:d + 1]
                    M_dst = rows[dst, d + 1:]
                    seeds.append((gp.msg, alpha * g_dst))
                    seeds.append((gp.score, alpha * num.rowsum((gp.msg.value - M_dst) * g_dst)[:, None]))
                else:
                    seeds.append((gp.msg, g_dst))
                gp.tape.backward(seeds)
                task.contribute(p, k, op, gp.tape)
                if gp.n_src.grad is not None:
                    src_part += num.segment_sum(gp.n_src.grad, src_part_idx(L, op), len(L.t_rows))
                if gp.n_dst is not None and gp.n_dst.grad is not None:
                    if op == OP_GATHER_CSR:
                        dst_part += num.segment_sum(gp.n_dst.grad, L.a_in_t[L.csr_dst], len(L.t_rows))
                    else:
                        mir_part += num.segment_sum(gp.n_dst.grad, L.csc_dst, len(L.mirrors))
            return src_part, dst_part, mir_part

        def src_part_idx(L, op):
            return L.csr_src if op == OP_GATHER_CSR else L.csc_src

        parts = self._each(gather_back)
        uses_dst = prog.uses_dst
        inbox = (self._ship_partials(task, k, TO_MASTER_GRAD, [m for _, _, m in parts])
                 if uses_dst else [[] for _ in range(self.P)])

        def transform_back(p):
            L, fr = lay[p], task.frames[p, k]
            acc = parts[p][0]
            acc += parts[p][1]
            if fr.n_a.grad is not None:
                num.partial_add_rows(acc, L.a_in_t, num.partial_of(fr.n_a.grad))
            for m in inbox[p]:
                num.partial_add_rows(acc, _positions(L.t_rows, m.ids), m.payload)
            g_n = num.finalize(acc)
            fr.t_tape.backward([(fr.n, g_n)])
            task.contribute(p, k, OP_TRANSFORM, fr.t_tape)
            gh = fr.h_in.grad
            task.g_h[k - 1][p] = np.zeros_like(fr.h_in.value) if gh is None else gh
            task.release(p, k)

        self._each(transform_back)

    # ---- decoder and loss

    def decode_loss(self, task: Task, decoder: Callable, labels: np.ndarray, n_targets: int | None = None):
        """Decoder (an NN-T stage on target masters) and mean cross-entropy.

        Returns ``(loss, logits)`` with logits ordered by target global id.
        """
        K = task.K
        num = task.numerics
        lay = task.layouts[K]
        n = n_targets if n_targets is not None else sum(len(L.a_rows) for L in lay)
        if n == 0:
            raise ValueError("no labelled targets in batch")

        def run(p):
            L = lay[p]
            if len(L.a_rows) == 0:
                return None, None
            tape = Tape(num)
            h = tape.leaf(task.h[K][p])
            logits = decoder(tape, h, _Bound(tape, task.params))
            rows = ad.softmax_xent(tape, logits, labels[L.a_rows], denom=n)
            task.loss_tapes[p] = (tape, h, rows)
            return num.total(rows.value), logits.value

        res = self._each(run)
        partials = [r[0] for r in res if r[0] is not None]
        loss = float(num.finalize(num.merge(partials))[0])
        order = np.argsort(np.concatenate([L.a_rows for L in lay]), kind="stable")
        logits = np.concatenate([r[1] for r in res if r[1] is not None])[order]
        return loss, logits

    def decode_backward(self, task: Task) -> None:
        def run(p):
            item = task.loss_tapes.pop(p, None)
            if item is None:
                return
            tape, h, rows = item
            tape.backward([(rows, np.ones_like(rows.value))])
            task.contribute(p, task.K + 1, OP_DECODE, tape)
            task.g_h[task.K][p] = h.grad if h.grad is not None else np.zeros_like(h.value)

        self._each(run)

    def decode_only(self, task: Task, decoder: Callable) -> np.ndarray:
        lay = task.layouts[task.K]

        def run(p):
            tape = Tape(task.numerics)
            return decoder(tape, tape.const(task.h[task.K][p]), _Bound(tape, task.params)).value

        out = self._each(run)
        order = np.argsort(np.concatenate([L.a_rows for L in lay]), kind="stable")
        return np.concatenate(out)[order]

    # ---- whole passes

    def forward(self, task: Task) -> None:
        for k in range(1, task.K + 1):
            self.forward_layer(task, k)

    def backward(self, task: Task) -> dict:
        for k in range(task.K, 0, -1):
            self.backward_layer(task, k)
        return reduce_params(task.contributions, task.numerics)

    def input_grad(self, task: Task) -> np.ndarray:
        """Gradient w.r.t. the layer-0 features, scattered to global ids."""
        x = task.h[0][0] if self.P else None
        width = x.shape[1] if x is not None else 0
        out = np.zeros((self.graph.num_nodes, width))
        for p in range(self.P):
            if task.g_h[0][p] is not None:
                out[task.layouts[0][p]] = task.g_h[0][p]
        return out

    def layer_output(self, task: Task, k: int) -> np.ndarray:
        """h^k scattered to global ids (NaN for nodes that do not compute it)."""
        width = next((h.shape[1] for h in task.h[k] if h is not None and h.ndim == 2), 0)
        out = np.full((self.graph.num_nodes, width), np.nan)
        rows = task.layouts[k] if k == 0 else [L.a_rows for L in task.layouts[k]]
        for p in range(self.P):
            out[rows[p]] = task.h[k][p]
        return out
