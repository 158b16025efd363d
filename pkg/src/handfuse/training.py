"""Three-stage training: spatial and temporal networks first, then fusion with both frozen."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import checkpoint
from . import tensor as T
from .dataset import Dataset
from .errors import ContractError, DataError, DependencyError, NonFiniteError, ParameterError
from .metrics import average_error
from .models import ArchConfig, FusionNet, Network, SpatialNet, TemporalNet
from .optim import Adam
from .preprocess import AUGMENT_OPS, augment_image, augment_pose, slice_batch

log = logging.getLogger(__name__)

STAGES = ("spatial", "temporal", "fusion")
STAGE_BATCH = {"spatial": 16, "temporal": 2, "fusion": 128}


@dataclass
class TrainConfig:
    batch_size: int | None = None  # frames, except sequences in the temporal stage
    lr: float = 1e-3
    lr_decay_every: int = 1500
    lr_decay_factor: float = 0.1
    iters_stage_spatial: int = 2000
    iters_stage_temporal: int = 2000
    iters_stage_fusion: int = 1000
    seed: int = 0
    T: int = 16
    augment: bool = False
    val_fraction: float = 0.1
    val_every: int = 0  # iterations between validation passes; 0 = once per epoch
    cube_mm: float = 300.0

    def __post_init__(self):
        if self.batch_size is not None and self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ParameterError("lr must be > 0")
        if not 0 < self.lr_decay_factor <= 1:
            raise ParameterError("lr_decay_factor must be in (0, 1]")
        if self.lr_decay_every < 0:
            raise ParameterError("lr_decay_every must be >= 0")

    def batch(self, stage: str) -> int:
        return self.batch_size or STAGE_BATCH[stage]

    def iterations(self, stage: str) -> int:
        return getattr(self, f"iters_stage_{stage}")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for k, v in values.items():
            if k not in known:
                continue
            if isinstance(v, str):
                v = _coerce(k, v)
            kw[k] = v
        return cls(**kw)


def _coerce(key: str, text: str):
    if key in ("augment",):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ParameterError(f"{key}: expected a boolean, got {text!r}")
    if key in ("lr", "lr_decay_factor", "val_fraction", "cube_mm", "dropout"):
        return float(text)
    if key == "batch_size" and text.lower() in ("", "none", "auto"):
        return None
    if key in ("conv1", "conv2"):
        return tuple(int(t) for t in text.replace("x", ",").split(","))
    if key == "dtype":
        return text
    return int(text)


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"config line {n}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> tuple[TrainConfig, dict]:
    """TrainConfig plus architecture overrides; CLI overrides beat the file."""
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = parse_config_text(fh.read())
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    arch_keys = set(ArchConfig.__dataclass_fields__) - {"M", "L", "K"}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - arch_keys - train_keys
    if unknown:
        raise ParameterError(f"unknown config keys: {sorted(unknown)}")
    arch = {k: (_coerce(k, v) if isinstance(v, str) else v) for k, v in raw.items() if k in arch_keys}
    return TrainConfig.from_mapping(raw), arch


def lr_schedule(it: int, config: TrainConfig) -> float:
    if it < 0:
        raise ParameterError("iteration must be >= 0")
    if config.lr_decay_every <= 0:
        return config.lr
    return config.lr * config.lr_decay_factor ** (it // config.lr_decay_every)


@dataclass
class TrainLog:
    entries: list[tuple[int, str, float, float]] = field(default_factory=list)
    validation: list[tuple[int, str, float]] = field(default_factory=list)
    seconds: dict[str, float] = field(default_factory=dict)
    skipped_sequences: int = 0
    epoch_samples: dict[str, int] = field(default_factory=dict)

    def record(self, it: int, stage: str, loss: float, lr: float) -> None:
        if self.entries and self.entries[-1][1] == stage and it <= self.entries[-1][0]:
            raise ContractError("iteration indices must increase")
        self.entries.append((it, stage, loss, lr))

    def losses(self, stage: str | None = None) -> np.ndarray:
        return np.array([e[2] for e in self.entries if stage is None or e[1] == stage])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "stage", "loss", "lr"])
            for it, stage, loss, lr in self.entries:
                w.writerow([it, stage, repr(loss), repr(lr)])


class EpochSampler:
    """Indices from consecutive seeded permutations; batches may straddle epochs."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.buf = np.zeros(0, dtype=np.int64)
        self.epochs = 0

    def take(self, k: int) -> np.ndarray:
        while len(self.buf) < k:
            self.buf = np.concatenate([self.buf, self.rng.permutation(self.n)])
            self.epochs += 1
        out, self.buf = self.buf[:k], self.buf[k:]
        return out


def _scale(config: TrainConfig) -> float:
    return config.cube_mm / 2


def first_nonfinite(tape: T.Tape) -> str:
    for i, node in enumerate(tape.nodes):
        for o in node.outputs:
            if not np.all(np.isfinite(o.data)):
                return f"output of node {i} ({node.op}, shape {o.shape})"
    return "loss"


def _check_loss(loss: T.Tensor, tape: T.Tape, stage: str, it: int) -> float:
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteError(f"{stage} iteration {it}: non-finite loss; first non-finite tensor: {first_nonfinite(tape)}")
    return value


def _arch_for(data: Dataset, arch: ArchConfig | dict | None) -> ArchConfig:
    if isinstance(arch, ArchConfig):
        return arch
    return ArchConfig(M=data.M, L=data.L, K=data.K, **(arch or {}))


def augmented_frames(depth: np.ndarray, pose: np.ndarray, rng: np.random.Generator):
    """Source frames followed by one randomly rotated/flipped copy of each."""
    ops = rng.integers(len(AUGMENT_OPS), size=len(depth))
    aug_d = np.empty_like(depth)
    aug_p = np.empty_like(pose)
    for i, o in enumerate(ops):
        op = AUGMENT_OPS[o]
        aug_d[i] = augment_image(depth[i], op)
        aug_p[i] = augment_pose(pose[i].reshape(-1, 3), op).reshape(-1)
    return np.concatenate([depth, aug_d]), np.concatenate([pose, aug_p])


def augmented_windows(depth: np.ndarray, pose: np.ndarray, rng: np.random.Generator):
    """Like :func:`augmented_frames` for (W, T, ...) windows; one op per window."""
    ops = rng.integers(len(AUGMENT_OPS), size=len(depth))
    aug_d = np.empty_like(depth)
    aug_p = np.empty_like(pose)
    for i, o in enumerate(ops):
        op = AUGMENT_OPS[o]
        aug_d[i] = augment_image(depth[i], op)
        aug_p[i] = augment_pose(pose[i].reshape(pose.shape[1], -1, 3), op).reshape(pose.shape[1], -1)
    return np.concatenate([depth, aug_d]), np.concatenate([pose, aug_p])


def predict_spatial(net: SpatialNet, depth: np.ndarray, chunk: int = 64) -> np.ndarray:
    out = []
    for s in range(0, len(depth), chunk):
        d = depth[s:s + chunk]
        out.append(net.forward(d, slice_batch(d, net.arch.L)).data)
    return np.concatenate(out) if out else np.zeros((0, 3 * net.arch.K), dtype=net.arch.dtype)


def predict_temporal(net: TemporalNet, windows: np.ndarray, chunk: int = 4) -> np.ndarray:
    """(W, T, M, M) -> (W, T, 3K)."""
    out = [net.forward(windows[s:s + chunk]).data for s in range(0, len(windows), chunk)]
    return np.concatenate(out) if out else np.zeros((0, net.T, 3 * net.arch.K), dtype=net.arch.dtype)


def _run(stage: str, net: Network, config: TrainConfig, make_loss, n_samples: int, validate, log_: TrainLog):
    """Shared optimizer loop; ``make_loss(batch_idx, rng)`` builds the loss on the active tape."""
    rng = _stage_rng(config, stage, "loop")
    sampler = EpochSampler(n_samples, rng)
    opt = Adam(net.param_list(), lr=config.lr)
    batch = config.batch(stage)
    val_every = config.val_every or max(1, int(np.ceil(n_samples / batch)))
    start = time.perf_counter()
    for it in range(config.iterations(stage)):
        lr = lr_schedule(it, config)
        idx = sampler.take(batch)
        opt.zero_grad()
        with T.Tape() as tape:
            loss = make_loss(idx, rng)
        value = _check_loss(loss, tape, stage, it)
        T.backward(tape, loss)
        opt.step(lr)
        log_.record(it, stage, value, lr)
        if validate is not None and (it + 1) % val_every == 0:
            log_.validation.append((it, stage, validate()))
    log_.seconds[stage] = time.perf_counter() - start
    log.info("%s stage: %d iterations in %.1fs", stage, config.iterations(stage), log_.seconds[stage])


def _stage_rng(config: TrainConfig, stage: str, purpose: str) -> np.random.Generator:
    """Fixed substream per (seed, stage, purpose) so stages do not disturb each other."""
    return np.random.default_rng([config.seed, STAGES.index(stage), ("init", "augment", "loop").index(purpose)])


def train_spatial(data: Dataset, config: TrainConfig, arch=None, log_: TrainLog | None = None):
    train, val = data.split(config.val_fraction)
    if train.N == 0:
        raise DataError("spatial stage: empty training set")
    arch = _arch_for(data, arch)
    log_ = log_ or TrainLog()
    net = SpatialNet(arch, _stage_rng(config, "spatial", "init"))
    depth, pose = train.depth, train.pose
    if config.augment:
        depth, pose = augmented_frames(depth, pose, _stage_rng(config, "spatial", "augment"))
    log_.epoch_samples["spatial"] = len(depth)
    depth = depth.astype(arch.dtype)
    pose = pose.astype(arch.dtype)

    def make_loss(idx, rng):
        d = depth[idx]
        main, a1, a2 = net.forward(d, slice_batch(d, arch.L, arch.dtype), True, rng)
        y = pose[idx]
        return T.add(T.add(T.l2_loss(main, y), T.l2_loss(a1, y)), T.l2_loss(a2, y))

    def validate():
        return average_error(predict_spatial(net, val.depth) * _scale(config), val.pose * _scale(config))

    _run("spatial", net, config, make_loss, len(depth), validate if val.N else None, log_)
    return net, log_


def _windows(data: Dataset, T_len: int, log_: TrainLog):
    rows, short = data.windows(T_len)
    log_.skipped_sequences += short
    if short:
        log.warning("skipped %d sequences shorter than T=%d", short, T_len)
    return rows


def train_temporal(data: Dataset, config: TrainConfig, arch=None, log_: TrainLog | None = None):
    train, val = data.split(config.val_fraction)
    log_ = log_ or TrainLog()
    rows = _windows(train, config.T, log_)
    if len(rows) == 0:
        raise DataError(f"temporal stage: no training sequences of length >= {config.T}")
    arch = _arch_for(data, arch)
    net = TemporalNet(arch, _stage_rng(config, "temporal", "init"), config.T)
    depth, pose = train.depth[rows], train.pose[rows]
    if config.augment:
        depth, pose = augmented_windows(depth, pose, _stage_rng(config, "temporal", "augment"))
    log_.epoch_samples["temporal"] = len(depth)
    depth = depth.astype(arch.dtype)
    pose = pose.astype(arch.dtype)
    val_rows, _ = val.windows(config.T)

    def make_loss(idx, rng):
        return T.l2_loss(net.forward(depth[idx]), pose[idx])

    def validate():
        pred = predict_temporal(net, val.depth[val_rows])
        return average_error(pred.reshape(-1, 3 * arch.K) * _scale(config),
                             val.pose[val_rows].reshape(-1, 3 * arch.K) * _scale(config))

    _run("temporal", net, config, make_loss, len(depth), validate if len(val_rows) else None, log_)
    return net, log_


def stage_predictions(data: Dataset, spatial: SpatialNet, temporal: TemporalNet):
    """Frozen-network predictions on every frame covered by a length-T window.

    Returns (rows, J_temp, J_spa) with rows flattened in window order.
    """
    rows, _ = data.windows(temporal.T)
    flat = rows.reshape(-1)
    j_temp = predict_temporal(temporal, data.depth[rows]).reshape(len(flat), -1)
    j_spa = predict_spatial(spatial, data.depth[flat])
    return flat, j_temp, j_spa


def params_digest(net: Network) -> str:
    return checkpoint.digest(net.state_dict())


def fit_fusion(j_temp: np.ndarray, j_spa: np.ndarray, truth: np.ndarray, config: TrainConfig,
               arch: ArchConfig, log_: TrainLog | None = None, validate=None) -> tuple[FusionNet, TrainLog]:
    """Train a fusion network on fixed (N, 3K) prediction pairs."""
    if len(truth) == 0:
        raise DataError("fusion stage: no training frames")
    log_ = log_ or TrainLog()
    net = FusionNet(arch, _stage_rng(config, "fusion", "init"))
    j_temp, j_spa = j_temp.astype(arch.dtype), j_spa.astype(arch.dtype)
    truth = truth.astype(arch.dtype)
    log_.epoch_samples["fusion"] = len(truth)

    def make_loss(idx, rng):
        out, _ = net.forward(j_temp[idx], j_spa[idx])
        return T.l2_loss(out, truth[idx])

    _run("fusion", net, config, make_loss, len(truth), validate and (lambda: validate(net)), log_)
    return net, log_


def train_fusion(data: Dataset, config: TrainConfig, spatial: SpatialNet | None, temporal: TemporalNet | None,
                 arch=None, log_: TrainLog | None = None):
    """Train only the fusion network; upstream parameters must be bit-identical afterwards."""
    if spatial is None or temporal is None:
        raise DependencyError("fusion stage needs trained spatial and temporal networks")
    train, val = data.split(config.val_fraction)
    before = (params_digest(spatial), params_digest(temporal))
    rows, j_temp, j_spa = stage_predictions(train, spatial, temporal)
    validate = None
    if val.N:
        v_rows, v_temp, v_spa = stage_predictions(val, spatial, temporal)

        def validate(net):
            out, _ = net.forward(v_temp, v_spa)
            return average_error(out.data * _scale(config), val.pose[v_rows] * _scale(config))

        if len(v_rows) == 0:
            validate = None
    net, log_ = fit_fusion(j_temp, j_spa, train.pose[rows], config, _arch_for(data, arch), log_, validate)
    if (params_digest(spatial), params_digest(temporal)) != before:
        raise ContractError("upstream parameters changed during the fusion stage")
    return net, log_


def save_network(path, net: Network, config: TrainConfig | None = None) -> None:
    cfg = net.config()
    if config is not None:
        cfg["train"] = asdict(config)
    checkpoint.save(path, net.state_dict(), cfg)


def load_network(path) -> Network:
    from .models import build

    arrays, cfg = checkpoint.load(path)
    net = build(cfg)
    net.load_state_dict(arrays)
    return net
