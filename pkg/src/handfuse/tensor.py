"""Tape-based reverse-mode autodiff over numpy arrays.

Operations record onto the innermost active :class:`Tape`. With no tape
active they run forward only, which is what inference uses.

    with Tape() as tape:
        loss = l2_loss(fully_connected(x, w, b), y)
    backward(tape, loss)

Arrays keep the dtype they were created with: float32 for training,
float64 for gradient checks.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ContractError, DimensionError, ParameterError

_ids = itertools.count()
_tape_stack: list["Tape"] = []


class Tensor:
    """Dense array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    outputs: tuple[Tensor, ...]
    backward: Callable[[list], Sequence]


@dataclass
class Tape:
    """Ordered record of executed operations.

    Nodes are appended as they run, so the list is already topologically
    sorted. With ``debug=True`` backward checks that each tensor has
    received a contribution from every consumer before its own node runs.
    """

    debug: bool = False
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def produced(self, t: Tensor) -> bool:
        return any(o is t for n in self.nodes for o in n.outputs)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _record(op: str, inputs: Sequence[Tensor], out_data, backward_fn) -> Tensor | tuple[Tensor, ...]:
    """Wrap forward results and append a node when any input needs a gradient."""
    multi = isinstance(out_data, tuple)
    outs_data = out_data if multi else (out_data,)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    outs = tuple(Tensor(d, requires_grad=needs) for d in outs_data)
    if needs:
        tape.record(Node(op, tuple(inputs), outs, backward_fn))
    return outs if multi else outs[0]


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or not tape.produced(loss):
        raise ContractError("loss was not produced on this tape")
    loss.grad = np.ones_like(loss.data)

    consumers: dict[int, int] = {}
    seen: dict[int, int] = {}
    if tape.debug:
        for node in tape.nodes:
            for t in node.inputs:
                consumers[t.id] = consumers.get(t.id, 0) + 1

    visited = 0
    for node in reversed(tape.nodes):
        visited += 1
        if tape.debug:
            for o in node.outputs:
                if seen.get(o.id, 0) != consumers.get(o.id, 0):
                    raise ContractError(f"{node.op}: gradient read before all consumers contributed")
        if all(o.grad is None for o in node.outputs):
            for t in node.inputs:
                seen[t.id] = seen.get(t.id, 0) + 1
            continue
        out_grads = [o.grad if o.grad is not None else np.zeros_like(o.data) for o in node.outputs]
        in_grads = node.backward(out_grads)
        for t, g in zip(node.inputs, in_grads):
            seen[t.id] = seen.get(t.id, 0) + 1
            if g is None or not t.requires_grad:
                continue
            g = np.asarray(g, dtype=t.dtype)
            if g.shape != t.shape:
                raise DimensionError(f"{node.op}: gradient shape {g.shape} != input shape {t.shape}")
            if t.grad is None:
                t.grad = g.copy()
            else:
                t.grad += g
    if tape.debug and visited != len(tape.nodes):
        raise ContractError("backward skipped nodes")


# ---------------------------------------------------------------------------
# layer primitives


def conv2d(x, weight, bias, stride: int = 1) -> Tensor:
    """Valid cross-correlation. ``x`` is [C,H,W] or batched [N,C,H,W]."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be [C,H,W] or [N,C,H,W], got rank {x.data.ndim}")
    if weight.data.ndim != 4:
        raise DimensionError(f"conv2d weight must be [C_out,C_in,kh,kw], got rank {weight.data.ndim}")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d axis C_in: input has {c} channels, weight expects {ci}")
    if kh > h:
        raise DimensionError(f"conv2d axis H: kernel height {kh} exceeds input height {h}")
    if kw > w:
        raise DimensionError(f"conv2d axis W: kernel width {kw} exceeds input width {w}")
    if bias.shape != (co,):
        raise DimensionError(f"conv2d axis C_out: bias shape {bias.shape} != ({co},)")
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (C*kh*kw, N*Ho*Wo): the innermost copy axis is W, which keeps the gather contiguous
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)
    wmat = weight.data.reshape(co, -1)
    out = (wmat @ cols + bias.data[:, None]).reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)

    def bw(grads):
        g = (grads[0] if batched else grads[0][None])
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, n * ho * wo)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxd = np.zeros((c, n, h, w), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxd[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[:, i, j]
            gxd = gxd.transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gxd) if batched else np.ascontiguousarray(gxd[0])
        return gx, gw, gb

    return _record("conv2d", (x, weight, bias), out if batched else out[0], bw)


def maxpool2d(x, k: int, stride: int) -> tuple[Tensor, np.ndarray]:
    """Window maximum over the last two axes.

    Returns the pooled tensor and the argmax of each window as a flat
    row-major offset inside the window; ties go to the lowest offset.
    """
    x = as_tensor(x)
    if k <= 0 or stride <= 0:
        raise ParameterError(f"pool size and stride must be positive, got k={k}, stride={stride}")
    if x.data.ndim < 2:
        raise DimensionError("maxpool2d needs at least two spatial axes")
    h, w = x.shape[-2:]
    if k > h or k > w:
        raise DimensionError(f"pool size {k} exceeds spatial extent {(h, w)}")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    if k == stride:
        return _maxpool_tiled(x, k, ho, wo)
    win = sliding_window_view(x.data, (k, k), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    flat = win.reshape(*win.shape[:-2], k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(grads):
        g = grads[0]
        lead = x.shape[:-2]
        nlead = int(np.prod(lead)) if lead else 1
        rows = np.arange(ho)[:, None] * stride + arg.reshape(nlead, ho, wo) // k
        cols = np.arange(wo)[None, :] * stride + arg.reshape(nlead, ho, wo) % k
        base = (np.arange(nlead) * h * w)[:, None, None]
        idx = base + rows * w + cols
        gx = np.bincount(idx.ravel(), weights=g.reshape(-1), minlength=nlead * h * w)
        return (gx.reshape(x.shape),)

    return _record("maxpool2d", (x,), np.ascontiguousarray(out), bw), arg


def _maxpool_tiled(x: Tensor, k: int, ho: int, wo: int) -> tuple[Tensor, np.ndarray]:
    """Non-overlapping windows: compare k*k strided views instead of gathering windows."""
    views = [x.data[..., a:a + k * ho:k, b:b + k * wo:k] for a in range(k) for b in range(k)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)
    arg = np.full(out.shape, k * k - 1, dtype=np.int64)
    for pos in range(k * k - 2, -1, -1):
        arg[views[pos] == out] = pos

    def bw(grads):
        g = grads[0]
        gx = np.zeros_like(x.data)
        for pos in range(k * k):
            a, b = divmod(pos, k)
            gx[..., a:a + k * ho:k, b:b + k * wo:k] = np.where(arg == pos, g, 0)
        return (gx,)

    return _record("maxpool2d", (x,), out, bw), arg


def fully_connected(x, weight, bias) -> Tensor:
    """Affine map ``W x + b`` over the last axis of ``x``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.data.ndim != 2:
        raise DimensionError(f"fully_connected weight must be rank 2, got {weight.shape}")
    dout, din = weight.shape
    if x.shape[-1:] != (din,):
        raise DimensionError(f"fully_connected axis D_in: input has {x.shape[-1:]} features, weight expects {din}")
    if bias.shape != (dout,):
        raise DimensionError(f"fully_connected axis D_out: bias shape {bias.shape} != ({dout},)")
    out = x.data @ weight.data.T + bias.data

    def bw(grads):
        g = grads[0]
        g2 = g.reshape(-1, dout)
        gx = g @ weight.data if x.requires_grad else None
        gw = g2.T @ x.data.reshape(-1, din) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _record("fully_connected", (x, weight, bias), out, bw)


LSTM_KEYS = ("Whi", "Wxi", "Whf", "Wxf", "Who", "Wxo", "Whc", "Wxc", "bi", "bf", "bo", "bc")


def lstm_cell(phi, h_prev, c_prev, params: dict) -> tuple[Tensor, Tensor]:
    """One LSTM step; returns ``(h_t, c_t)``.

    ``params`` maps each of :data:`LSTM_KEYS` to a tensor; ``Wx*`` are
    [Dh, D], ``Wh*`` are [Dh, Dh], biases are [Dh]. Inputs may carry a
    leading batch axis.
    """
    phi, h_prev, c_prev = as_tensor(phi), as_tensor(h_prev), as_tensor(c_prev)
    missing = [k for k in LSTM_KEYS if k not in params]
    if missing:
        raise DimensionError(f"lstm_cell missing parameters {missing}")
    p = {k: as_tensor(params[k]) for k in LSTM_KEYS}
    dh = p["bi"].shape[0] if p["bi"].data.ndim == 1 else -1
    d = phi.shape[-1]
    for g in "ifoc":
        if p[f"Wx{g}"].shape != (dh, d):
            raise DimensionError(f"lstm_cell axis D: Wx{g} shape {p[f'Wx{g}'].shape} != {(dh, d)}")
        if p[f"Wh{g}"].shape != (dh, dh):
            raise DimensionError(f"lstm_cell axis Dh: Wh{g} shape {p[f'Wh{g}'].shape} != {(dh, dh)}")
        if p[f"b{g}"].shape != (dh,):
            raise DimensionError(f"lstm_cell axis Dh: b{g} shape {p[f'b{g}'].shape} != ({dh},)")
    if h_prev.shape[-1] != dh or c_prev.shape != h_prev.shape:
        raise DimensionError(f"lstm_cell axis Dh: state shapes {h_prev.shape}, {c_prev.shape} vs Dh={dh}")
    if h_prev.shape[:-1] != phi.shape[:-1]:
        raise DimensionError(f"lstm_cell batch axes differ: {phi.shape[:-1]} vs {h_prev.shape[:-1]}")

    x, hp, cp = phi.data, h_prev.data, c_prev.data

    def pre(g):
        return hp @ p[f"Wh{g}"].data.T + x @ p[f"Wx{g}"].data.T + p[f"b{g}"].data

    ig, fg, og = expit(pre("i")), expit(pre("f")), expit(pre("o"))
    cand = np.tanh(pre("c"))
    c = fg * cp + ig * cand
    tc = np.tanh(c)
    h = og * tc

    def bw(grads):
        gh, gc = grads
        do = gh * tc
        dc = gc + gh * og * (1.0 - tc * tc)
        df = dc * cp
        di = dc * cand
        dcp = dc * fg
        dz = {
            "i": di * ig * (1.0 - ig),
            "f": df * fg * (1.0 - fg),
            "o": do * og * (1.0 - og),
            "c": dc * ig * (1.0 - cand * cand),
        }
        x2, h2 = x.reshape(-1, d), hp.reshape(-1, dh)
        dx = sum(dz[g] @ p[f"Wx{g}"].data for g in "ifoc")
        dhp = sum(dz[g] @ p[f"Wh{g}"].data for g in "ifoc")
        pg = {}
        for g in "ifoc":
            z2 = dz[g].reshape(-1, dh)
            pg[f"Wx{g}"] = z2.T @ x2
            pg[f"Wh{g}"] = z2.T @ h2
            pg[f"b{g}"] = z2.sum(axis=0)
        return (dx, dhp, dcp) + tuple(pg[k] for k in LSTM_KEYS)

    return _record("lstm_cell", (phi, h_prev, c_prev) + tuple(p[k] for k in LSTM_KEYS), (h, c), bw)


def dropout(x, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so test mode is the identity."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)

    def bw(grads):
        return (grads[0] * mask,)

    return _record("dropout", (x,), x.data * mask, bw)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def elementwise_mean(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("elementwise_mean", a, b)

    def bw(grads):
        half = grads[0] * 0.5
        return half, half

    return _record("elementwise_mean", (a, b), (a.data + b.data) * 0.5, bw)


def concat(a, b) -> Tensor:
    """Join along the last (feature) axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat: ranks/leading axes differ: {a.shape} vs {b.shape}")
    da = a.shape[-1]

    def bw(grads):
        g = grads[0]
        return g[..., :da], g[..., da:]

    return _record("concat", (a, b), np.concatenate([a.data, b.data], axis=-1), bw)


def l2_loss(pred, target) -> Tensor:
    """Euclidean distance per row, averaged over any leading batch axes."""
    pred, target = as_tensor(pred), as_tensor(target)
    _same_shape("l2_loss", pred, target)
    diff = pred.data - target.data
    norms = np.sqrt(np.sum(diff * diff, axis=-1))
    count = norms.size
    out = np.asarray(norms.sum() / count, dtype=pred.dtype)

    def bw(grads):
        g = grads[0]
        safe = np.where(norms > 0, norms, 1.0)
        unit = np.where((norms > 0)[..., None], diff / safe[..., None], 0.0)
        gp = unit * (g / count)
        return gp, -gp

    return _record("l2_loss", (pred, target), out, bw)


# ---------------------------------------------------------------------------
# elementwise and structural helpers


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record("relu", (x,), np.maximum(x.data, 0), lambda g: (g[0] * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return _record("sigmoid", (x,), s, lambda g: (g[0] * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _record("tanh", (x,), t, lambda g: (g[0] * (1.0 - t * t),))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g[0], g[0]))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g[0], -g[0]))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return _record("mul", (a, b), a.data * b.data, lambda g: (g[0] * b.data, g[0] * a.data))


def one_minus(x) -> Tensor:
    x = as_tensor(x)
    return _record("one_minus", (x,), 1.0 - x.data, lambda g: (-g[0],))


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _record("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype), lambda g: (np.broadcast_to(g[0], x.shape),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g[0].reshape(x.shape),))


def select(x, index: int, axis: int = 0) -> Tensor:
    """Take one slice along ``axis``, dropping that axis."""
    x = as_tensor(x)
    ax = axis % x.data.ndim

    def bw(grads):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[ax] = index
        gx[tuple(sl)] = grads[0]
        return (gx,)

    return _record("select", (x,), np.take(x.data, index, axis=ax), bw)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if len({t.shape for t in xs}) != 1:
        raise DimensionError(f"stack: shapes differ {[t.shape for t in xs]}")
    out = np.stack([t.data for t in xs], axis=axis)
    ax = axis % out.ndim

    def bw(grads):
        return tuple(np.take(grads[0], i, axis=ax) for i in range(len(xs)))

    return _record("stack", tuple(xs), out, bw)
