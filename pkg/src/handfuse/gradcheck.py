"""Central finite-difference checks for every primitive and every network.

Each registered check builds a small random problem in float64 from a
seed and returns the worst element-wise relative error between the
taped gradient and ``(f(x+h) - f(x-h)) / 2h``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .models import ArchConfig, BranchNet, FusionNet, SpatialNet, TemporalNet
from .preprocess import slice_batch

OP_TOL = 1e-4
NET_TOL = 1e-3
STEP = 1e-5
FLOOR = 1e-6

TINY = dict(M=16, L=4, K=2, conv1=(3, 5), conv2=(4, 3), feat=12, hidden=6, fusion_hidden=5, dtype="float64")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)))


def check(fn: Callable[[], T.Tensor], inputs: list[T.Tensor], rng: np.random.Generator | None = None,
          max_elems: int | None = None, h: float = STEP) -> float:
    """Worst relative error of d fn() / d inputs; ``fn`` must be deterministic."""
    for t in inputs:
        t.grad = None
    with T.Tape() as tape:
        loss = fn()
    T.backward(tape, loss)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_elems, replace=False))
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up = float(fn().data)
            flat[i] = old - h
            down = float(fn().data)
            flat[i] = old
            numeric[j] = (up - down) / (2 * h)
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], numeric))
    return worst


def _param(rng, *shape, scale=1.0):
    return T.Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _probe(out: T.Tensor, rng) -> np.ndarray:
    """Weights of a fixed random linear functional, so every output element matters."""
    return rng.normal(size=out.shape)


def _linear_loss(y: T.Tensor, r: np.ndarray) -> T.Tensor:
    return T.sum_all(T.mul(y, T.Tensor(r)))


def _op_check(build: Callable[[np.random.Generator], tuple[Callable[[], T.Tensor], list[T.Tensor]]]):
    def run(seed: int) -> float:
        rng = np.random.default_rng(seed)
        f, inputs = build(rng)
        r = _probe(f(), rng)
        return check(lambda: _linear_loss(f(), r), inputs, rng)
    return run


def _conv(rng):
    x, w, b = _param(rng, 2, 2, 6, 5), _param(rng, 3, 2, 3, 2), _param(rng, 3)
    stride = int(rng.integers(1, 3))
    return (lambda: T.conv2d(x, w, b, stride)), [x, w, b]


def _pool(rng):
    # well-separated values so no window max is within the step of another entry
    x = T.Tensor(rng.permutation(2 * 6 * 6).reshape(2, 6, 6) * 0.01 + rng.normal(0, 1e-4, (2, 6, 6)),
                 requires_grad=True)
    k, s = (2, 2) if rng.random() < 0.5 else (3, 1)
    return (lambda: T.maxpool2d(x, k, s)[0]), [x]


def _fc(rng):
    x, w, b = _param(rng, 3, 4), _param(rng, 5, 4), _param(rng, 5)
    return (lambda: T.fully_connected(x, w, b)), [x, w, b]


def _lstm(rng):
    d, dh = 4, 3
    phi, h, c = _param(rng, 2, d), _param(rng, 2, dh), _param(rng, 2, dh)
    params = {}
    for k in T.LSTM_KEYS:
        shape = (dh,) if k.startswith("b") else (dh, d if k.startswith("Wx") else dh)
        params[k] = _param(rng, *shape, scale=0.5)
    rh, rc = rng.normal(size=(2, dh)), rng.normal(size=(2, dh))

    def f():
        h1, c1 = T.lstm_cell(phi, h, c, params)
        return T.add(_linear_loss(h1, rh), _linear_loss(c1, rc))

    return f, [phi, h, c] + [params[k] for k in T.LSTM_KEYS]


def _lstm_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    f, inputs = _lstm(rng)
    return check(f, inputs, rng)


def _dropout(rng):
    x = _param(rng, 4, 5)
    s = int(rng.integers(1 << 30))
    return (lambda: T.dropout(x, 0.3, True, np.random.default_rng(s))), [x]


def _pair(op):
    def build(rng):
        a, b = _param(rng, 3, 4), _param(rng, 3, 4)
        return (lambda: op(a, b)), [a, b]
    return build


def _unary(op, positive=False):
    def build(rng):
        x = _param(rng, 3, 4)
        if positive:
            x.data = np.abs(x.data) + 0.1
        return (lambda: op(x)), [x]
    return build


def _relu(rng):
    x = _param(rng, 3, 4)
    x.data = np.where(np.abs(x.data) < 0.05, 0.1, x.data)
    return (lambda: T.relu(x)), [x]


def _concat(rng):
    a, b = _param(rng, 2, 3), _param(rng, 2, 4)
    return (lambda: T.concat(a, b)), [a, b]


def _l2_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    p, t = _param(rng, 5, 6), _param(rng, 5, 6)
    return check(lambda: T.l2_loss(p, t), [p, t], rng)


def _sum_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _param(rng, 3, 4)
    return check(lambda: T.sum_all(x), [x], rng)


def _reshape(rng):
    x = _param(rng, 3, 4)
    return (lambda: T.reshape(x, (2, 6))), [x]


def _select(rng):
    x = _param(rng, 3, 4, 2)
    i = int(rng.integers(4))
    return (lambda: T.select(x, i, axis=1)), [x]


def _stack(rng):
    xs = [_param(rng, 2, 3) for _ in range(3)]
    return (lambda: T.stack(xs, axis=1)), xs


OPS: dict[str, Callable[[int], float]] = {
    "conv2d": _op_check(_conv),
    "maxpool2d": _op_check(_pool),
    "fully_connected": _op_check(_fc),
    "lstm_cell": _lstm_check,
    "dropout": _op_check(_dropout),
    "elementwise_mean": _op_check(_pair(T.elementwise_mean)),
    "concat": _op_check(_concat),
    "l2_loss": _l2_check,
    "relu": _op_check(_relu),
    "sigmoid": _op_check(_unary(lambda x: T.sigmoid(x))),
    "tanh": _op_check(_unary(lambda x: T.tanh(x))),
    "add": _op_check(_pair(T.add)),
    "sub": _op_check(_pair(T.sub)),
    "mul": _op_check(_pair(T.mul)),
    "one_minus": _op_check(_unary(lambda x: T.one_minus(x))),
    "sum": _sum_check,
    "reshape": _op_check(_reshape),
    "select": _op_check(_select),
    "stack": _op_check(_stack),
}


def tiny_arch(**overrides) -> ArchConfig:
    return ArchConfig(**{**TINY, **overrides})


def _frames(rng, n, m):
    x = rng.uniform(-0.9, 0.9, size=(n, m, m))
    x[:, : m // 4] = 1.0  # background band
    return x


def _net_check(make: Callable[[np.random.Generator, ArchConfig], tuple[object, Callable[[], T.Tensor]]],
               per_tensor: int = 4):
    def run(seed: int) -> float:
        rng = np.random.default_rng(seed)
        arch = tiny_arch()
        net, f = make(rng, arch)
        return check(f, net.param_list(), rng, max_elems=per_tensor)
    return run


def _spatial(rng, arch):
    net = SpatialNet(arch, rng)
    d = _frames(rng, 2, arch.M)
    v = slice_batch(d, arch.L, np.float64)
    y = rng.uniform(-1, 1, (2, 3 * arch.K))
    s = int(rng.integers(1 << 30))

    def f():
        main, a1, a2 = net.forward(d, v, True, np.random.default_rng(s))
        return T.add(T.add(T.l2_loss(main, y), T.l2_loss(a1, y)), T.l2_loss(a2, y))

    return net, f


def _branch(kind):
    def make(rng, arch):
        net = BranchNet(arch, rng, kind)
        d = _frames(rng, 2, arch.M)
        x = d if kind == "depth" else slice_batch(d, arch.L, np.float64)
        y = rng.uniform(-1, 1, (2, 3 * arch.K))
        return net, lambda: T.l2_loss(net.forward(x), y)
    return make


def _temporal(rng, arch):
    net = TemporalNet(arch, rng, T_len=2)
    x = _frames(rng, 2, arch.M).reshape(1, 2, arch.M, arch.M)
    y = rng.uniform(-1, 1, (1, 2, 3 * arch.K))
    return net, lambda: T.l2_loss(net.forward(x), y)


def _fusion(rng, arch):
    net = FusionNet(arch, rng)
    jt, js = rng.uniform(-1, 1, (3, 3 * arch.K)), rng.uniform(-1, 1, (3, 3 * arch.K))
    y = rng.uniform(-1, 1, (3, 3 * arch.K))
    return net, lambda: T.l2_loss(net.forward(jt, js)[0], y)


NETWORKS: dict[str, Callable[[int], float]] = {
    "spatial": _net_check(_spatial),
    "temporal": _net_check(_temporal),
    "fusion": _net_check(_fusion),
    "baseline": _net_check(_branch("depth")),
    "sliced3d": _net_check(_branch("vol")),
}


@dataclass
class CheckResult:
    name: str
    scope: str
    worst: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.worst < self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.scope:7s} {self.name:18s} max_rel_err={self.worst:.3e} tol={self.tol:g}"


def run_checks(scope: str = "all", seed: int = 0, n_seeds: int = 10) -> list[CheckResult]:
    """Run each registered check over ``n_seeds`` consecutive seeds starting at ``seed``."""
    groups = []
    if scope in ("layer", "all"):
        groups.append(("layer", OPS, OP_TOL))
    if scope in ("network", "all"):
        groups.append(("network", NETWORKS, NET_TOL))
    if not groups:
        raise ValueError(f"scope must be layer, network or all, got {scope!r}")
    results = []
    for name_scope, registry, tol in groups:
        for name, fn in registry.items():
            t0 = time.perf_counter()
            worst = max(fn(seed + k) for k in range(n_seeds))
            results.append(CheckResult(name, name_scope, worst, tol, time.perf_counter() - t0))
    return results
