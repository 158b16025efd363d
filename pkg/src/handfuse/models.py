"""Spatial, temporal and fusion networks plus the two single-branch baselines.

Every network owns a flat ``params`` dict of named tensors. Layers that
appear on several paths (the auxiliary paths of the spatial network, the
per-step encoder of the temporal network) look up the same tensor, so
there is one storage and gradients from every use accumulate into it.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, SequenceError
from .tensor import Tensor


@dataclass
class ArchConfig:
    M: int = 64
    L: int = 8
    K: int = 6
    conv1: tuple[int, int] = (8, 5)  # (channels, kernel)
    conv2: tuple[int, int] = (16, 3)
    pool: int = 2
    feat: int = 256
    hidden: int = 128
    fusion_hidden: int = 64
    dropout: float = 0.3
    dtype: str = "float32"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        for k in ("conv1", "conv2"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def encoder_out(self) -> int:
        s = self.M
        s = (s - self.conv1[1] + 1 - self.pool) // self.pool + 1
        s = (s - self.conv2[1] + 1 - self.pool) // self.pool + 1
        if s < 1:
            raise DimensionError(f"M={self.M} too small for the conv stack")
        return self.conv2[0] * s * s


class Initializer:
    """Fan-in scaled uniform init drawn from one generator in call order.

    ``gain`` is the target variance times fan-in: 2 (He) for convolutions,
    1 for dense layers, whose inputs are far from zero-mean after relu.
    """

    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = np.dtype(dtype)

    def weight(self, shape, fan_in: int, gain: float = 2.0) -> Tensor:
        bound = np.sqrt(3.0 * gain / fan_in)
        return Tensor(self.rng.uniform(-bound, bound, size=shape).astype(self.dtype), requires_grad=True)

    def const(self, shape, value: float = 0.0) -> Tensor:
        return Tensor(np.full(shape, value, dtype=self.dtype), requires_grad=True)


class Network:
    kind = "network"

    def __init__(self, arch: ArchConfig):
        self.arch = arch
        self.params: dict[str, Tensor] = {}

    def param_list(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: self.params[k].data.copy() for k in sorted(self.params)}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise DimensionError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            a = np.asarray(arrays[k])
            if a.shape != p.shape:
                raise DimensionError(f"checkpoint {k}: shape {a.shape} != {p.shape}")
            p.data[...] = a.astype(p.dtype)

    def config(self) -> dict:
        return {"kind": self.kind, "arch": self.arch.to_dict()}

    def _dense(self, init: Initializer, name: str, d_in: int, d_out: int) -> None:
        self.params[f"{name}.w"] = init.weight((d_out, d_in), d_in, gain=1.0)
        self.params[f"{name}.b"] = init.const((d_out,))

    def _conv_stack(self, init: Initializer, name: str, c_in: int) -> None:
        a = self.arch
        c1, k1 = a.conv1
        c2, k2 = a.conv2
        self.params[f"{name}.conv1.w"] = init.weight((c1, c_in, k1, k1), c_in * k1 * k1)
        self.params[f"{name}.conv1.b"] = init.const((c1,))
        self.params[f"{name}.conv2.w"] = init.weight((c2, c1, k2, k2), c1 * k2 * k2)
        self.params[f"{name}.conv2.b"] = init.const((c2,))
        self._dense(init, f"{name}.fc", a.encoder_out(), a.feat)

    def fc(self, name: str, x, act: bool = True, drop: bool = False, train: bool = False, rng=None) -> Tensor:
        y = T.fully_connected(x, self.params[f"{name}.w"], self.params[f"{name}.b"])
        if act:
            y = T.relu(y)
        if drop:
            y = T.dropout(y, self.arch.dropout, train, rng)
        return y

    def encode(self, name: str, x, drop: bool = False, train: bool = False, rng=None) -> Tensor:
        """conv -> relu -> pool -> conv -> relu -> pool -> flatten -> FC -> relu."""
        p = self.params
        x = T.as_tensor(x)
        batched = x.data.ndim == 4
        y = T.relu(T.conv2d(x, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"]))
        y, _ = T.maxpool2d(y, self.arch.pool, self.arch.pool)
        y = T.relu(T.conv2d(y, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"]))
        y, _ = T.maxpool2d(y, self.arch.pool, self.arch.pool)
        y = T.reshape(y, (y.shape[0], -1) if batched else (-1,))
        return self.fc(f"{name}.fc", y, drop=drop, train=train, rng=rng)

    def _check_image(self, x, channels: int) -> Tensor:
        x = T.as_tensor(x)
        m = self.arch.M
        if x.shape[-3:] != (channels, m, m) or x.data.ndim not in (3, 4):
            raise DimensionError(f"expected [N,]{(channels, m, m)} input, got {x.shape}")
        return x


def _depth_input(x, dtype, batched: bool | None = None) -> np.ndarray:
    """Accept (M, M), (N, M, M), (1, M, M) or (N, 1, M, M) depth and add the channel axis.

    A (1, M, M) array is one channel-first image unless ``batched`` says otherwise.
    """
    a = np.asarray(getattr(x, "data", x), dtype=dtype)
    if a.ndim == 2:
        return a[None]
    if a.ndim == 3 and (a.shape[0] != 1 or batched):
        return a[:, None]
    return a


class SpatialNet(Network):
    """Two-branch network with two rounds of mean-merge fusion.

    Branch features are merged by element-wise mean, transformed per
    branch by H_m (an FC layer), and merged again, for m = 1, 2. In train
    mode each branch also runs alone through its own H layers and the
    shared head, giving two auxiliary predictions.
    """

    kind = "spatial"

    def __init__(self, arch: ArchConfig, rng: np.random.Generator):
        super().__init__(arch)
        init = Initializer(rng, arch.dtype)
        self._conv_stack(init, "depth", 1)
        self._conv_stack(init, "vol", arch.L)
        for m in (1, 2):
            self._dense(init, f"H{m}.depth", arch.feat, arch.feat)
            self._dense(init, f"H{m}.vol", arch.feat, arch.feat)
        self._dense(init, "head.fc1", arch.feat, arch.feat)
        self._dense(init, "head.out", arch.feat, 3 * arch.K)

    def branch_features(self, depth, volume, train: bool = False, rng=None) -> tuple[Tensor, Tensor]:
        v = self._check_image(np.asarray(getattr(volume, "data", volume), dtype=self.arch.dtype), self.arch.L)
        d = self._check_image(_depth_input(depth, self.arch.dtype, v.data.ndim == 4), 1)
        if d.shape[:-3] != v.shape[:-3]:
            raise DimensionError(f"depth batch {d.shape} and volume batch {v.shape} differ")
        return (self.encode("depth", d, True, train, rng), self.encode("vol", v, True, train, rng))

    def head(self, x, train: bool = False, rng=None) -> Tensor:
        return self.fc("head.out", self.fc("head.fc1", x, drop=True, train=train, rng=rng), act=False)

    def fuse(self, phi_depth, phi_vol, train: bool = False, rng=None) -> Tensor:
        phi = T.elementwise_mean(phi_depth, phi_vol)
        for m in (1, 2):
            phi = T.elementwise_mean(self.fc(f"H{m}.depth", phi, drop=True, train=train, rng=rng),
                                     self.fc(f"H{m}.vol", phi, drop=True, train=train, rng=rng))
        return phi

    def aux_path(self, branch: str, phi, train: bool = False, rng=None) -> Tensor:
        for m in (1, 2):
            phi = self.fc(f"H{m}.{branch}", phi, drop=True, train=train, rng=rng)
        return self.head(phi, train, rng)

    def forward(self, depth, volume, train: bool = False, rng=None):
        """Main prediction; in train mode ``(main, aux_depth, aux_volume)``."""
        phi_d, phi_v = self.branch_features(depth, volume, train, rng)
        main = self.head(self.fuse(phi_d, phi_v, train, rng), train, rng)
        if not train:
            return main
        return main, self.aux_path("depth", phi_d, train, rng), self.aux_path("vol", phi_v, train, rng)


class BranchNet(Network):
    """Single-branch regressor: ``baseline`` on depth or ``sliced3d`` on the volume.

    Uses the same layer definitions and parameter names as the matching
    spatial-network branch, so branch weights can be copied across.
    """

    def __init__(self, arch: ArchConfig, rng: np.random.Generator, branch: str = "depth"):
        super().__init__(arch)
        if branch not in ("depth", "vol"):
            raise ValueError(f"branch must be 'depth' or 'vol', got {branch!r}")
        self.branch = branch
        self.kind = "baseline" if branch == "depth" else "sliced3d"
        init = Initializer(rng, arch.dtype)
        self._conv_stack(init, branch, 1 if branch == "depth" else arch.L)
        self._dense(init, "head.fc1", arch.feat, arch.feat)
        self._dense(init, "head.out", arch.feat, 3 * arch.K)

    def config(self) -> dict:
        return {**super().config(), "branch": self.branch}

    def features(self, x, train: bool = False, rng=None) -> Tensor:
        if self.branch == "depth":
            x = self._check_image(_depth_input(x, self.arch.dtype), 1)
        else:
            x = self._check_image(np.asarray(getattr(x, "data", x), dtype=self.arch.dtype), self.arch.L)
        return self.encode(self.branch, x, True, train, rng)

    def forward(self, x, train: bool = False, rng=None) -> Tensor:
        h = self.fc("head.fc1", self.features(x, train, rng), drop=True, train=train, rng=rng)
        return self.fc("head.out", h, act=False)


def baseline_forward(frame, net: BranchNet) -> Tensor:
    return net.forward(frame)


def sliced3d_forward(volume, net: BranchNet) -> Tensor:
    return net.forward(volume)


class TemporalNet(Network):
    """Shared per-frame encoder, one LSTM layer, FC on concat(h_t, phi_t)."""

    kind = "temporal"

    def __init__(self, arch: ArchConfig, rng: np.random.Generator, T_len: int = 16):
        super().__init__(arch)
        self.T = T_len
        init = Initializer(rng, arch.dtype)
        self._conv_stack(init, "enc", 1)
        f, h = arch.feat, arch.hidden
        for g in "ifoc":
            self.params[f"lstm.Wx{g}"] = init.weight((h, f), f + h, gain=1.0)
            self.params[f"lstm.Wh{g}"] = init.weight((h, h), f + h, gain=1.0)
            self.params[f"lstm.b{g}"] = init.const((h,), 1.0 if g == "f" else 0.0)
        self._dense(init, "out", f + h, 3 * arch.K)

    def config(self) -> dict:
        return {**super().config(), "T": self.T}

    def lstm_params(self) -> dict[str, Tensor]:
        return {k: self.params[f"lstm.{k}"] for k in T.LSTM_KEYS}

    def forward(self, frames, trace: list | None = None) -> Tensor:
        """(T, M, M) or (B, T, M, M) normalized depth -> (T, 3K) or (B, T, 3K).

        ``trace``, if given, receives ``(h_t, c_t)`` arrays per step.
        """
        x = np.asarray(getattr(frames, "data", frames), dtype=self.arch.dtype)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4:
            raise DimensionError(f"expected (T,M,M) or (B,T,M,M) frames, got {x.shape}")
        b, t_len = x.shape[:2]
        if t_len != self.T:
            raise SequenceError(f"sequence length {t_len} != configured T={self.T}")
        m = self.arch.M
        if x.shape[2:] != (m, m):
            raise DimensionError(f"frames must be {m}x{m}, got {x.shape[2:]}")
        phi_all = self.encode("enc", x.reshape(b * t_len, 1, m, m))
        phi_all = T.reshape(phi_all, (b, t_len, self.arch.feat))
        h = T.Tensor(np.zeros((b, self.arch.hidden), dtype=x.dtype))
        c = T.Tensor(np.zeros((b, self.arch.hidden), dtype=x.dtype))
        lp = self.lstm_params()
        outs = []
        for t in range(t_len):
            phi = T.select(phi_all, t, axis=1)
            h, c = T.lstm_cell(phi, h, c, lp)
            if trace is not None:
                trace.append((h.data.copy(), c.data.copy()))
            outs.append(self.fc("out", T.concat(h, phi), act=False))
        y = T.stack(outs, axis=1)
        return T.select(y, 0, axis=0) if single else y


@dataclass
class FusionWeights:
    w1: np.ndarray
    w2: np.ndarray


class FusionNet(Network):
    """FC -> relu -> FC -> sigmoid on concat(J_temp, J_spa), giving per-coordinate w1."""

    kind = "fusion"

    def __init__(self, arch: ArchConfig, rng: np.random.Generator):
        super().__init__(arch)
        init = Initializer(rng, arch.dtype)
        d = 3 * arch.K
        self._dense(init, "fc1", 2 * d, arch.fusion_hidden)
        self._dense(init, "fc2", arch.fusion_hidden, d)

    def forward(self, j_temp, j_spa, features=None) -> tuple[Tensor, Tensor]:
        """Return ``(J_out, w1)``; ``features`` defaults to concat(J_temp, J_spa)."""
        jt, js = T.as_tensor(j_temp), T.as_tensor(j_spa)
        d = 3 * self.arch.K
        if jt.shape[-1] != d or js.shape != jt.shape:
            raise DimensionError(f"predictions must both be [..., {d}], got {jt.shape} and {js.shape}")
        x = T.concat(jt, js) if features is None else T.as_tensor(features)
        w1 = T.sigmoid(self.fc("fc2", self.fc("fc1", x), act=False))
        out = T.add(T.mul(w1, jt), T.mul(T.one_minus(w1), js))
        return out, w1


def fusion_forward(features, j_temp, j_spa, net: FusionNet) -> tuple[Tensor, FusionWeights]:
    out, w1 = net.forward(j_temp, j_spa, features)
    return out, FusionWeights(w1.data, 1.0 - w1.data)


def spatial_forward(depth, volume, net: SpatialNet, train: bool = False, rng=None):
    return net.forward(depth, volume, train, rng)


def temporal_forward(frames, net: TemporalNet) -> Tensor:
    return net.forward(frames)


def expected_param_count(kind: str, arch: ArchConfig, branch: str = "depth") -> int:
    """Closed-form parameter count from the architecture config."""
    c1, k1 = arch.conv1
    c2, k2 = arch.conv2

    def stack(c_in):
        return c1 * c_in * k1 * k1 + c1 + c2 * c1 * k2 * k2 + c2 + arch.encoder_out() * arch.feat + arch.feat

    def dense(i, o):
        return i * o + o

    f, d = arch.feat, 3 * arch.K
    head = dense(f, f) + dense(f, d)
    if kind == "spatial":
        return stack(1) + stack(arch.L) + 4 * dense(f, f) + head
    if kind in ("baseline", "sliced3d"):
        return stack(1 if branch == "depth" else arch.L) + head
    if kind == "temporal":
        h = arch.hidden
        return stack(1) + 4 * (h * f + h * h + h) + dense(f + h, d)
    if kind == "fusion":
        return dense(2 * d, arch.fusion_hidden) + dense(arch.fusion_hidden, d)
    raise ValueError(kind)


def build(config: dict, rng: np.random.Generator | None = None) -> Network:
    """Instantiate a network from a checkpoint config block."""
    rng = rng if rng is not None else np.random.default_rng(0)
    arch = ArchConfig.from_dict(config["arch"])
    kind = config["kind"]
    if kind == "spatial":
        return SpatialNet(arch, rng)
    if kind == "temporal":
        return TemporalNet(arch, rng, config.get("T", 16))
    if kind == "fusion":
        return FusionNet(arch, rng)
    if kind in ("baseline", "sliced3d"):
        return BranchNet(arch, rng, config.get("branch", "depth" if kind == "baseline" else "vol"))
    raise ValueError(f"unknown network kind {kind!r}")
