"""Dense float64 tensors with reverse-mode differentiation and forward tracing.

Small by design: exactly the operations the two bag aggregators and their
explainers need, all in double precision. A forward pass can optionally be
recorded into a :class:`ForwardTrace`, whose layer records are later replayed
(for exactness checks) or walked backwards (for relevance propagation).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when operation inputs do not conform to the layer kind."""


class NonScalarOutputError(ValueError):
    """Raised when backward() is started from a non-scalar tensor."""


_node_ids = itertools.count(1)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass
class TraceRecord:
    """One executed layer: kind, activation snapshots, parameter snapshots."""

    kind: str
    input_ids: tuple[int, ...]
    inputs: tuple[np.ndarray, ...]
    param_ids: tuple[int, ...]
    params: tuple[np.ndarray, ...]
    output_id: int
    output: np.ndarray
    meta: dict


@dataclass
class ForwardTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def replay(self) -> list[np.ndarray]:
        """Recompute every record's output from its recorded inputs."""
        return [
            _KERNELS[r.kind](r.inputs, r.params, r.meta) for r in self.records
        ]

    def replay_matches(self) -> bool:
        """True iff replaying reproduces all recorded outputs bit-for-bit."""
        return all(
            np.array_equal(out, r.output)
            for out, r in zip(self.replay(), self.records)
        )


_trace_state = threading.local()


def _active_trace() -> ForwardTrace | None:
    stack = getattr(_trace_state, "stack", None)
    return stack[-1] if stack else None


_grad_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Skip gradient-graph construction; forward values only."""
    prev = _grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


@contextmanager
def record_trace():
    """Record every forward_op executed in this thread into a fresh trace."""
    trace = ForwardTrace()
    stack = getattr(_trace_state, "stack", None)
    if stack is None:
        stack = _trace_state.stack = []
    stack.append(trace)
    try:
        yield trace
    finally:
        stack.pop()


def _fail_shape(kind: str, detail: str):
    raise ShapeMismatchError(f"{kind}: {detail}")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _stable_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _layernorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, xc, inv, xhat


# Pure-array kernels; forward_op and ForwardTrace.replay share these so a
# replay runs the exact same code path as the recorded execution.
_KERNELS = {
    "linear": lambda ins, ps, m: ins[0] @ ps[0] + ps[1] if len(ps) == 2 else ins[0] @ ps[0],
    "relu": lambda ins, ps, m: np.maximum(ins[0], 0.0),
    "tanh": lambda ins, ps, m: np.tanh(ins[0]),
    "sigmoid": lambda ins, ps, m: _stable_sigmoid(ins[0]),
    "softmax": lambda ins, ps, m: _stable_softmax(ins[0]),
    "layernorm": lambda ins, ps, m: _layernorm_forward(ins[0], ps[0], ps[1], m["eps"])[0],
    "attention_mix": lambda ins, ps, m: ins[0] @ ins[1],
    "head_scores": lambda ins, ps, m: _head_scores_arr(
        ins[0], ins[1], m["n_heads"], m.get("n_groups", 1)
    ),
    "head_mix": lambda ins, ps, m: _head_mix_arr(
        ins[0], ins[1], m["n_heads"], m.get("n_groups", 1)
    ),
    "reshape": lambda ins, ps, m: ins[0].reshape(m["shape"]).copy(),
    "take_rows": lambda ins, ps, m: ins[0][list(m["indices"])].copy(),
    "ce_loss": lambda ins, ps, m: _ce_loss_arr(ins[0], m["labels"]),
    "group_prepend": lambda ins, ps, m: _group_prepend_arr(ins[0], ins[1], m["n_groups"]),
    "add": lambda ins, ps, m: ins[0] + ins[1],
    "mul": lambda ins, ps, m: ins[0] * ins[1],
    "matmul": lambda ins, ps, m: ins[0] @ ins[1],
    "transpose": lambda ins, ps, m: ins[0].T.copy(),
    "scale": lambda ins, ps, m: ins[0] * m["c"],
    "concat": lambda ins, ps, m: np.concatenate(ins, axis=m["axis"]),
    "slice": lambda ins, ps, m: _slice_arr(ins[0], m["axis"], m["start"], m["stop"]),
    "sum": lambda ins, ps, m: np.asarray(np.sum(ins[0])),
    "pick": lambda ins, ps, m: np.asarray(ins[0].reshape(-1)[m["index"]]),
    "logsumexp": lambda ins, ps, m: _logsumexp_arr(ins[0]),
}


def _slice_arr(x: np.ndarray, axis: int, start: int, stop: int) -> np.ndarray:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return x[tuple(idx)].copy()


def _logsumexp_arr(x: np.ndarray) -> np.ndarray:
    m = np.max(x)
    return np.asarray(m + np.log(np.sum(np.exp(x - m))))


def _split_heads(x: np.ndarray, g: int, h: int) -> np.ndarray:
    """(G*T, H*dh) → (G, H, T, dh)."""
    gt, d = x.shape
    t, dh = gt // g, d // h
    return x.reshape(g, t, h, dh).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    """(G, H, T, dh) → (G*T, H*dh)."""
    g, h, t, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(g * t, h * dh)


def _head_scores_arr(q, k, n_heads: int, n_groups: int = 1) -> np.ndarray:
    """Per-head, per-group dot-product scores stacked along rows.

    Query rows are split into ``n_groups`` blocks (independent bags) and the
    width into ``n_heads`` slices; output row (g*H + h)*Tq + i holds the
    scores of query i of group g under head h, shape (G*H*Tq, Tk).
    """
    qh = _split_heads(q, n_groups, n_heads)  # (G,H,Tq,dh)
    kh = _split_heads(k, n_groups, n_heads)  # (G,H,Tk,dh)
    s = qh @ kh.swapaxes(-1, -2)  # (G,H,Tq,Tk)
    return np.ascontiguousarray(s).reshape(-1, s.shape[-1])


def _head_mix_arr(a, v, n_heads: int, n_groups: int = 1) -> np.ndarray:
    """Mix value slices with stacked per-head weights; inverse layout of
    :func:`_head_scores_arr`. a: (G*H*Tq, Tk), v: (G*Tk, H*dh) → (G*Tq, H*dh)."""
    vh = _split_heads(v, n_groups, n_heads)  # (G,H,Tk,dh)
    tk = vh.shape[2]
    ah = a.reshape(n_groups, n_heads, -1, tk)  # (G,H,Tq,Tk)
    return _merge_heads(ah @ vh)


def _ce_loss_arr(logits: np.ndarray, labels) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1))
    rows = np.arange(logits.shape[0])
    return np.asarray(np.mean(lse - shifted[rows, list(labels)]))


def _group_prepend_arr(head: np.ndarray, body: np.ndarray, n_groups: int) -> np.ndarray:
    """Prepend the shared row ``head`` to each of ``n_groups`` row blocks."""
    rows, d = body.shape
    per = rows // n_groups
    out = np.empty((n_groups * (per + 1), d))
    grouped = out.reshape(n_groups, per + 1, d)
    grouped[:, 0] = head[0]
    grouped[:, 1:] = body.reshape(n_groups, per, d)
    return out


def _check_2d(kind: str, name: str, arr: np.ndarray):
    if arr.ndim != 2:
        _fail_shape(kind, f"{name} must be 2-D, got shape {arr.shape}")


def forward_op(kind: str, inputs, params=(), **meta) -> Tensor:
    """Apply one layer of the given kind, building the gradient graph.

    Appends a :class:`TraceRecord` to the active trace when tracing is
    enabled. ``inputs`` and ``params`` are Tensors; ``meta`` carries
    layer constants (softmax axis is always the last one).
    """
    if isinstance(inputs, Tensor):
        inputs = (inputs,)
    else:
        inputs = tuple(inputs)
    if isinstance(params, Tensor):
        params = (params,)
    else:
        params = tuple(params)

    ins = tuple(t.data for t in inputs)
    ps = tuple(t.data for t in params)

    if kind == "linear":
        _check_2d(kind, "input", ins[0])
        _check_2d(kind, "weight", ps[0])
        if ins[0].shape[1] != ps[0].shape[0]:
            _fail_shape(kind, f"input dim {ins[0].shape[1]} vs weight rows {ps[0].shape[0]}")
        if len(ps) == 2 and ps[1].shape != (ps[0].shape[1],):
            _fail_shape(kind, f"bias shape {ps[1].shape} vs weight cols {ps[0].shape[1]}")
    elif kind in ("attention_mix", "matmul"):
        _check_2d(kind, "lhs", ins[0])
        _check_2d(kind, "rhs", ins[1])
        if ins[0].shape[1] != ins[1].shape[0]:
            _fail_shape(kind, f"lhs cols {ins[0].shape[1]} vs rhs rows {ins[1].shape[0]}")
    elif kind == "head_scores":
        _check_2d(kind, "q", ins[0])
        _check_2d(kind, "k", ins[1])
        h, grp = meta["n_heads"], meta.get("n_groups", 1)
        if ins[0].shape[1] != ins[1].shape[1]:
            _fail_shape(kind, f"q width {ins[0].shape[1]} vs k width {ins[1].shape[1]}")
        if ins[0].shape[1] % h:
            _fail_shape(kind, f"width {ins[0].shape[1]} not divisible by {h} heads")
        if ins[0].shape[0] % grp or ins[1].shape[0] % grp:
            _fail_shape(kind, f"row counts {ins[0].shape[0]}/{ins[1].shape[0]} not divisible by {grp} groups")
    elif kind == "head_mix":
        _check_2d(kind, "weights", ins[0])
        _check_2d(kind, "values", ins[1])
        h, grp = meta["n_heads"], meta.get("n_groups", 1)
        d = ins[1].shape[1]
        if ins[1].shape[0] % grp:
            _fail_shape(kind, f"value rows {ins[1].shape[0]} not divisible by {grp} groups")
        tk = ins[1].shape[0] // grp
        if ins[0].shape[1] != tk or ins[0].shape[0] % (grp * h):
            _fail_shape(kind, f"weights shape {ins[0].shape} incompatible with "
                              f"{grp} groups of {tk} keys under {h} heads")
        if d % h:
            _fail_shape(kind, f"value width {d} not divisible by {h} heads")
    elif kind == "reshape":
        if int(np.prod(meta["shape"])) != ins[0].size:
            _fail_shape(kind, f"cannot reshape size {ins[0].size} to {meta['shape']}")
    elif kind == "take_rows":
        if any(not 0 <= i < ins[0].shape[0] for i in meta["indices"]):
            _fail_shape(kind, f"row index out of range for {ins[0].shape[0]} rows")
    elif kind == "ce_loss":
        _check_2d(kind, "logits", ins[0])
        if len(meta["labels"]) != ins[0].shape[0]:
            _fail_shape(kind, f"{len(meta['labels'])} labels vs {ins[0].shape[0]} rows")
        if any(not 0 <= y < ins[0].shape[1] for y in meta["labels"]):
            _fail_shape(kind, f"label out of range for {ins[0].shape[1]} classes")
    elif kind == "group_prepend":
        _check_2d(kind, "head", ins[0])
        _check_2d(kind, "body", ins[1])
        if ins[0].shape != (1, ins[1].shape[1]):
            _fail_shape(kind, f"head shape {ins[0].shape}, expected (1, {ins[1].shape[1]})")
        if ins[1].shape[0] % meta["n_groups"]:
            _fail_shape(kind, f"body rows {ins[1].shape[0]} not divisible by {meta['n_groups']} groups")
    elif kind in ("add", "mul"):
        if ins[0].shape != ins[1].shape:
            _fail_shape(kind, f"operand shapes {ins[0].shape} vs {ins[1].shape}")
    elif kind == "layernorm":
        d = ins[0].shape[-1]
        if ps[0].shape != (d,) or ps[1].shape != (d,):
            _fail_shape(kind, f"affine shapes {ps[0].shape}/{ps[1].shape} vs feature dim {d}")
        meta.setdefault("eps", 1e-5)
    elif kind == "concat":
        meta.setdefault("axis", 0)
        ax = meta["axis"]
        rest = [s[:ax] + s[ax + 1:] for s in (a.shape for a in ins)]
        if any(r != rest[0] for r in rest):
            _fail_shape(kind, f"non-{ax} dims differ: {[a.shape for a in ins]}")
    elif kind == "transpose":
        _check_2d(kind, "input", ins[0])
    elif kind == "pick":
        if not 0 <= meta["index"] < ins[0].size:
            _fail_shape(kind, f"index {meta['index']} out of range for size {ins[0].size}")
    elif kind not in _KERNELS:
        raise ValueError(f"unknown layer kind: {kind!r}")

    extras = None
    if kind == "layernorm" and _grad_enabled():
        out_arr, _, inv, xhat = _layernorm_forward(ins[0], ps[0], ps[1], meta["eps"])
        extras = (inv, xhat)
    else:
        out_arr = _KERNELS[kind](ins, ps, meta)
    out = Tensor(out_arr)
    if _grad_enabled():
        parents = inputs + params
        out._parents = parents
        needs = tuple(bool(t.requires_grad or t._parents) for t in parents)
        out._backward = _make_backward(kind, ins, ps, out_arr, meta, needs, extras)

    trace = _active_trace()
    if trace is not None:
        trace.records.append(TraceRecord(
            kind=kind,
            input_ids=tuple(t.node_id for t in inputs),
            inputs=tuple(a.copy() for a in ins),
            param_ids=tuple(t.node_id for t in params),
            params=tuple(a.copy() for a in ps),
            output_id=out.node_id,
            output=out_arr.copy(),
            meta=dict(meta),
        ))
    return out


def _make_backward(kind: str, ins, ps, out, meta, needs, extras=None):
    """Return a closure mapping d(loss)/d(out) to gradients of inputs+params.

    ``needs`` flags which parents require a gradient; expensive entries are
    skipped (returned as None) when the parent is a constant leaf. ``extras``
    carries forward intermediates so they are not recomputed here.
    """
    if kind == "linear":
        x, w = ins[0], ps[0]
        nx, nw = needs[0], needs[1]
        if len(ps) == 2:
            return lambda g: (
                g @ w.T if nx else None,
                x.T @ g if nw else None,
                g.sum(axis=0),
            )
        return lambda g: (g @ w.T if nx else None, x.T @ g if nw else None)
    if kind == "relu":
        mask = ins[0] > 0
        return lambda g: (g * mask,)
    if kind == "tanh":
        return lambda g: (g * (1.0 - out * out),)
    if kind == "sigmoid":
        return lambda g: (g * out * (1.0 - out),)
    if kind == "softmax":
        return lambda g: ((g - np.sum(g * out, axis=-1, keepdims=True)) * out,)
    if kind == "layernorm":
        x, gamma = ins[0], ps[0]
        if extras is not None:
            inv, xhat = extras
        else:
            _, _, inv, xhat = _layernorm_forward(x, ps[0], ps[1], meta["eps"])
        d = x.shape[-1]

        def back(g):
            dxhat = g * gamma
            t1 = np.sum(dxhat, axis=-1, keepdims=True)
            t2 = np.sum(dxhat * xhat, axis=-1, keepdims=True)
            dx = (inv / d) * (d * dxhat - t1 - xhat * t2)
            axes = tuple(range(g.ndim - 1))
            return dx, np.sum(g * xhat, axis=axes), np.sum(g, axis=axes)

        return back
    if kind in ("attention_mix", "matmul"):
        a, b = ins
        na, nb = needs[0], needs[1]
        return lambda g: (g @ b.T if na else None, a.T @ g if nb else None)
    if kind == "head_scores":
        q, k = ins
        h, grp = meta["n_heads"], meta.get("n_groups", 1)
        qh = _split_heads(q, grp, h)
        kh = _split_heads(k, grp, h)
        nq, nk = needs[0], needs[1]

        def back_scores(g):
            gh = g.reshape(grp, h, qh.shape[2], kh.shape[2])
            dq = _merge_heads(gh @ kh) if nq else None
            dk = _merge_heads(gh.swapaxes(-1, -2) @ qh) if nk else None
            return dq, dk

        return back_scores
    if kind == "head_mix":
        a, v = ins
        h, grp = meta["n_heads"], meta.get("n_groups", 1)
        vh = _split_heads(v, grp, h)
        tk = vh.shape[2]
        ah = a.reshape(grp, h, -1, tk)
        na, nv = needs[0], needs[1]

        def back_mix(g):
            gh = _split_heads(g, grp, h)
            da = None
            if na:
                da = np.ascontiguousarray(gh @ vh.swapaxes(-1, -2)).reshape(-1, tk)
            dv = _merge_heads(ah.swapaxes(-1, -2) @ gh) if nv else None
            return da, dv

        return back_mix
    if kind == "reshape":
        shape = ins[0].shape
        return lambda g: (g.reshape(shape).copy(),)
    if kind == "take_rows":
        shape, indices = ins[0].shape, list(meta["indices"])

        def back_take(g):
            full = np.zeros(shape)
            np.add.at(full, indices, g)
            return (full,)

        return back_take
    if kind == "ce_loss":
        logits, labels = ins[0], list(meta["labels"])
        sm = _stable_softmax(logits)

        def back_ce(g):
            d = sm.copy()
            d[np.arange(len(labels)), labels] -= 1.0
            return (d * (g / len(labels)),)

        return back_ce
    if kind == "group_prepend":
        grp = meta["n_groups"]
        rows, d = ins[1].shape
        per = rows // grp

        def back_prepend(g):
            gg = g.reshape(grp, per + 1, d)
            return gg[:, 0].sum(axis=0, keepdims=True), gg[:, 1:].reshape(rows, d)

        return back_prepend
    if kind == "add":
        return lambda g: (g, g)
    if kind == "mul":
        a, b = ins
        return lambda g: (g * b, g * a)
    if kind == "transpose":
        return lambda g: (g.T.copy(),)
    if kind == "scale":
        c = meta["c"]
        return lambda g: (g * c,)
    if kind == "concat":
        axis = meta["axis"]
        sizes = [a.shape[axis] for a in ins]
        offsets = np.cumsum([0] + sizes)

        def back(g):
            return tuple(
                _slice_arr(g, axis, int(offsets[i]), int(offsets[i + 1]))
                for i in range(len(sizes))
            )

        return back
    if kind == "slice":
        axis, start, stop = meta["axis"], meta["start"], meta["stop"]
        shape = ins[0].shape

        def back(g):
            full = np.zeros(shape)
            idx = [slice(None)] * len(shape)
            idx[axis] = slice(start, stop)
            full[tuple(idx)] = g
            return (full,)

        return back
    if kind == "sum":
        shape = ins[0].shape
        return lambda g: (np.broadcast_to(g, shape).copy(),)
    if kind == "pick":
        shape, index = ins[0].shape, meta["index"]

        def back(g):
            full = np.zeros(shape)
            full.reshape(-1)[index] = g
            return (full,)

        return back
    if kind == "logsumexp":
        sm = np.exp(ins[0] - _logsumexp_arr(ins[0]))
        return lambda g: (g * sm,)
    raise ValueError(f"unknown layer kind: {kind!r}")


def backward(output: Tensor) -> None:
    """Populate .grad on every tensor reachable from a scalar output."""
    if output.data.size != 1:
        raise NonScalarOutputError(
            f"backward requires a scalar output, got shape {output.data.shape}"
        )
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in visited:
                stack.append((p, False))

    output.grad = np.ones_like(output.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


def finite_difference_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. The error at each coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    y = f(probe)
    if y.data.size != 1:
        raise NonScalarOutputError("finite_difference_check requires scalar f(x)")
    backward(y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        for sgn in (1.0, -1.0):
            shifted = flat.copy()
            shifted[i] += sgn * h
            val = f(Tensor(shifted.reshape(x.data.shape))).item()
            if not np.isfinite(val):
                raise FloatingPointError(
                    f"non-finite function value at coordinate {i}"
                )
            numeric[i] += sgn * val
        numeric[i] /= 2.0 * h

    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(a - numeric) / denom))
