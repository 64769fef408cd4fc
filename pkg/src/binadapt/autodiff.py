"""Static-graph reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built explicitly, node by node, and stored in topological order.
``forward`` evaluates the subgraph needed for the requested outputs and caches
the per-node values; ``backward`` walks that cache in reverse and accumulates
gradients by the chain rule, including the sign-flipped path used by the
gradient-reversal layer. Everything is 64-bit and bit-deterministic for a
fixed seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GraphError",
    "Tensor",
    "Node",
    "Graph",
    "forward",
    "backward",
    "grad_check",
    "OptimizerState",
    "sgd",
    "adam",
    "optimizer_step",
    "CHECKPOINT_MAGIC",
    "write_checkpoint",
    "read_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "register_op",
]


class GraphError(ValueError):
    """A graph was built or executed against its contracts."""


class Tensor:
    """Dense n-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        if grad is not None:
            grad = np.ascontiguousarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise GraphError(
                    f"grad shape {grad.shape} does not match data shape {self.data.shape}"
                )
            self.grad = grad

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def size(self):
        return self.data.size

    def copy(self):
        return Tensor(self.data.copy(), None if self.grad is None else self.grad.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def as_array(x) -> np.ndarray:
    """Accept a Tensor or anything array-like and return float64 ndarray."""
    if isinstance(x, Tensor):
        return x.data
    return np.ascontiguousarray(x, dtype=np.float64)


@dataclass
class Node:
    kind: str
    inputs: tuple
    attrs: dict
    name: str


# Op registry. Each entry maps a node kind to a pair of callables:
#   fwd(node, xs, run) -> ndarray
#   bwd(node, g, xs, y, run) -> list of per-input gradients (None = constant input)
_OPS: dict = {}


def register_op(kind, fwd, bwd):
    if kind in _OPS:
        raise GraphError(f"op kind {kind!r} already registered")
    _OPS[kind] = (fwd, bwd)


@dataclass
class _Run:
    """Cached state of one forward execution, consumed by backward."""

    values: dict
    masks: dict
    order: list
    training: bool


class Graph:
    """Explicit computation graph; node storage order is the topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Tensor] = {}
        self.input_ids: dict[str, int] = {}
        self.param_ids: dict[str, int] = {}
        self.outputs: dict[str, int] = {}
        self._run: _Run | None = None

    def add_node(self, kind, inputs=(), name=None, **attrs) -> int:
        if kind not in _OPS and kind not in ("input", "param"):
            raise GraphError(f"unknown op kind {kind!r}")
        nid = len(self.nodes)
        for i in inputs:
            if not (0 <= i < nid):
                raise GraphError(f"node {nid} ({kind}) consumes undefined node id {i}")
        self.nodes.append(Node(kind, tuple(inputs), dict(attrs), name or f"{kind}{nid}"))
        return nid

    def input(self, name) -> int:
        if name in self.input_ids:
            raise GraphError(f"duplicate input {name!r}")
        nid = self.add_node("input", (), name=name, input_name=name)
        self.input_ids[name] = nid
        return nid

    def param(self, name, value) -> int:
        if name in self.params:
            raise GraphError(f"duplicate parameter {name!r}")
        self.params[name] = value if isinstance(value, Tensor) else Tensor(value)
        nid = self.add_node("param", (), name=name, param_name=name)
        self.param_ids[name] = nid
        return nid

    def identity(self, x, name=None) -> int:
        return self.add_node("identity", (x,), name=name)

    def add(self, a, b, name=None) -> int:
        return self.add_node("add", (a, b), name=name)

    def sum(self, x, name=None) -> int:
        return self.add_node("sum", (x,), name=name)

    def set_output(self, name, nid):
        if not (0 <= nid < len(self.nodes)):
            raise GraphError(f"output {name!r} points at undefined node id {nid}")
        self.outputs[name] = nid

    def set_attr(self, kind, key, value):
        """Update an attribute on every node of the given kind (e.g. the GRL coefficient)."""
        for node in self.nodes:
            if node.kind == kind:
                node.attrs[key] = value

    def ancestors(self, ids) -> list:
        """All node ids the given ids depend on, in storage (topological) order."""
        needed = set()
        stack = list(ids)
        while stack:
            i = stack.pop()
            if i in needed:
                continue
            needed.add(i)
            stack.extend(self.nodes[i].inputs)
        return sorted(needed)


def _resolve_loss(graph: Graph, loss) -> int:
    if isinstance(loss, str):
        if loss not in graph.outputs:
            raise GraphError(f"unknown output {loss!r}")
        return graph.outputs[loss]
    return int(loss)


def forward(
    graph: Graph,
    bindings: dict | None = None,
    *,
    wanted=None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    frozen_masks: dict | None = None,
) -> dict:
    """Evaluate the graph and return the requested named outputs as Tensors.

    Only the ancestor subgraph of ``wanted`` (default: all registered outputs)
    is computed, so inputs outside that subgraph need not be bound. Dropout
    nodes draw masks from ``rng`` when training, or reuse ``frozen_masks``
    (node id -> mask) when given. The execution record is cached on the graph
    for a subsequent ``backward``.
    """
    bindings = bindings or {}
    if wanted is None:
        wanted = tuple(graph.outputs)
    if not wanted:
        raise GraphError("graph has no registered outputs")
    targets = [_resolve_loss(graph, w) for w in wanted]
    order = graph.ancestors(targets)

    run = _Run(values={}, masks=dict(frozen_masks or {}), order=order, training=training)
    run._rng = rng
    for nid in order:
        node = graph.nodes[nid]
        run._nid = nid
        if node.kind == "input":
            name = node.attrs["input_name"]
            if name not in bindings:
                raise GraphError(f"input {name!r} is not bound")
            val = as_array(bindings[name])
            if not np.all(np.isfinite(val)):
                raise GraphError(f"input {name!r} contains non-finite values")
            run.values[nid] = val
        elif node.kind == "param":
            run.values[nid] = graph.params[node.attrs["param_name"]].data
        else:
            fwd, _ = _OPS[node.kind]
            xs = [run.values[i] for i in node.inputs]
            try:
                run.values[nid] = fwd(node, xs, run)
            except GraphError:
                raise
            except Exception as exc:  # re-raise with the node named
                raise GraphError(f"node {nid} ({node.name}): {exc}") from exc

    graph._run = run
    out = {}
    for w, nid in zip(wanted, targets):
        val = run.values[nid]
        if not np.all(np.isfinite(val)):
            raise GraphError(f"output {w!r} (node {nid}) contains non-finite values")
        out[w if isinstance(w, str) else graph.nodes[nid].name] = Tensor(val.copy())
    return out


def backward(graph: Graph, loss) -> dict:
    """Accumulate gradients of a scalar loss and return them per parameter name.

    Requires a prior ``forward`` whose computed subgraph contains the loss
    node. Gradients flow in reverse topological order; a parameter feeding
    several consumers receives the sum of all path gradients. Returned
    Tensors are also written into each parameter's ``grad`` slot.
    """
    run = graph._run
    if run is None:
        raise GraphError("backward called before forward")
    lid = _resolve_loss(graph, loss)
    if lid not in run.values:
        raise GraphError(f"loss node {lid} was not computed by the last forward")
    if run.values[lid].shape != (1,):
        raise GraphError(f"loss node {lid} is not scalar (shape {run.values[lid].shape})")

    grads = {lid: np.ones(1)}
    for nid in reversed(run.order):
        g = grads.get(nid)
        if g is None:
            continue
        node = graph.nodes[nid]
        run._nid = nid
        if node.kind in ("input", "param"):
            continue
        _, bwd = _OPS[node.kind]
        xs = [run.values[i] for i in node.inputs]
        for i, gi in zip(node.inputs, bwd(node, g, xs, run.values[nid], run)):
            if gi is None:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi

    out = {}
    for name, nid in graph.param_ids.items():
        if nid in grads:
            t = Tensor(grads[nid])
            graph.params[name].grad = t.data
            out[name] = t
    return out


def grad_check(
    graph: Graph,
    loss,
    bindings: dict,
    parameter: str,
    epsilon: float = 1e-5,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error per element is |analytic - numeric| / max(|analytic|, |numeric|,
    1e-8). Dropout masks are drawn once and frozen across all evaluations so
    the loss stays a fixed differentiable function of the parameter.
    """
    if not (0.0 < epsilon <= 1e-3):
        raise GraphError(f"epsilon {epsilon} outside (0, 1e-3]")
    if parameter not in graph.params:
        raise GraphError(f"unknown parameter {parameter!r}")

    forward(graph, bindings, wanted=(loss,), training=training, rng=rng)
    masks = dict(graph._run.masks)
    analytic = backward(graph, loss)[parameter].data.ravel().copy()

    def eval_loss():
        out = forward(graph, bindings, wanted=(loss,), training=training, frozen_masks=masks)
        return float(next(iter(out.values())).data[0])

    p = graph.params[parameter].data
    flat = p.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        lp = eval_loss()
        flat[i] = orig - epsilon
        lm = eval_loss()
        flat[i] = orig
        numeric = (lp - lm) / (2.0 * epsilon)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# core ops

def _fwd_identity(node, xs, run):
    return xs[0]


def _bwd_identity(node, g, xs, y, run):
    return [g]


def _fwd_add(node, xs, run):
    a, b = xs
    if a.shape != b.shape:
        raise GraphError(f"add node ({node.name}): shapes {a.shape} and {b.shape} differ")
    return a + b


def _bwd_add(node, g, xs, y, run):
    return [g, g]


def _fwd_sum(node, xs, run):
    return np.array([xs[0].sum()])


def _bwd_sum(node, g, xs, y, run):
    return [np.full(xs[0].shape, g[0])]


register_op("identity", _fwd_identity, _bwd_identity)
register_op("add", _fwd_add, _bwd_add)
register_op("sum", _fwd_sum, _bwd_sum)


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class OptimizerState:
    """Per-parameter moment buffers plus step counter and learning rate."""

    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict = field(default_factory=dict)


def sgd(lr) -> OptimizerState:
    return OptimizerState(kind="sgd", lr=lr)


def adam(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> OptimizerState:
    return OptimizerState(kind="adam", lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def optimizer_step(state: OptimizerState, params: dict, grads: dict) -> dict:
    """Apply one deterministic update in place and return the parameter dict."""
    state.step_count += 1
    t = state.step_count
    for name, g in grads.items():
        if name not in params:
            raise GraphError(f"gradient for unknown parameter {name!r}")
        p = params[name]
        ga = as_array(g)
        if ga.shape != p.data.shape:
            raise GraphError(
                f"parameter {name!r}: gradient shape {ga.shape} != {p.data.shape}"
            )
        if not np.all(np.isfinite(ga)):
            raise GraphError(f"parameter {name!r}: non-finite gradient")
        if state.kind == "sgd":
            p.data -= state.lr * ga
        elif state.kind == "adam":
            if name not in state.moments:
                state.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
            m, v = state.moments[name]
            m = state.beta1 * m + (1.0 - state.beta1) * ga
            v = state.beta2 * v + (1.0 - state.beta2) * ga * ga
            state.moments[name] = (m, v)
            mhat = m / (1.0 - state.beta1 ** t)
            vhat = v / (1.0 - state.beta2 ** t)
            p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
        else:
            raise GraphError(f"unknown optimizer kind {state.kind!r}")
    return params


# ---------------------------------------------------------------------------
# parameter checkpoints
#
# Layout: the magic string, then one record per parameter:
#   u32 name length, UTF-8 name bytes, u32 rank, rank x u32 dims,
#   prod(dims) x little-endian float64 values.

CHECKPOINT_MAGIC = b"BINADAPT1"


def write_checkpoint(params: dict) -> bytes:
    chunks = [CHECKPOINT_MAGIC]
    for name, tensor in params.items():
        arr = as_array(tensor)
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8", copy=False).tobytes(order="C"))
    return b"".join(chunks)


def read_checkpoint(data: bytes) -> dict:
    """Parse checkpoint bytes into an ordered name -> ndarray map (bit-exact)."""
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise GraphError("bad checkpoint magic")
    pos = len(CHECKPOINT_MAGIC)
    out = {}

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise GraphError(f"truncated checkpoint while reading {what} at byte {pos}")
        piece = data[pos : pos + n]
        pos += n
        return piece

    while pos < len(data):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        raw = take(8 * count, f"values of {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    return out


def save_checkpoint(path, params: dict):
    with open(path, "wb") as fh:
        fh.write(write_checkpoint(params))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        return read_checkpoint(fh.read())
