import numpy as np
import pytest

from handfuse import tensor as T
from handfuse.dataset import Dataset
from handfuse.errors import ContractError, DataError, DependencyError, NonFiniteError, ParameterError
from handfuse.gradcheck import tiny_arch
from handfuse.models import SpatialNet, TemporalNet
from handfuse.synth import SynthConfig, generate
from handfuse.training import (TrainConfig, TrainLog, fit_fusion, load_config, load_network, lr_schedule,
                               params_digest, parse_config_text, save_network, train_fusion, train_spatial,
                               train_temporal)

TINY = dict(conv1=(3, 5), conv2=(4, 3), feat=12, hidden=6, fusion_hidden=5)


def small_data(n_sequences=10, T_len=4, seed=0):
    return generate(SynthConfig(M=16, K=2, L=4, T=T_len, n_sequences=n_sequences, seed=seed))


def cfg(**kw):
    base = dict(iters_stage_spatial=3, iters_stage_temporal=3, iters_stage_fusion=3, T=4)
    return TrainConfig(**{**base, **kw})


# schedule and config

def test_lr_schedule_examples():
    c = TrainConfig(lr=1e-3, lr_decay_every=100, lr_decay_factor=0.1)
    assert lr_schedule(0, c) == 1e-3
    assert lr_schedule(100, c) == pytest.approx(1e-4)
    assert lr_schedule(250, c) == pytest.approx(1e-5)
    assert lr_schedule(99, c) == 1e-3
    with pytest.raises(ParameterError):
        lr_schedule(-1, c)


@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(lr=0.0), dict(lr_decay_factor=0.0),
                                dict(lr_decay_factor=1.5)])
def test_config_invariants(kw):
    with pytest.raises(ParameterError):
        TrainConfig(**kw)


def test_config_file_precedence(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("# desk run\nlr = 0.01\nseed=3\naugment = true\nfeat = 32\n\niters_stage_spatial=7\n")
    config, arch = load_config(path, {"seed": 9, "batch_size": None})
    assert config.lr == 0.01 and config.seed == 9 and config.augment is True
    assert config.iters_stage_spatial == 7 and config.batch_size is None
    assert arch == {"feat": 32}
    default, _ = load_config(None, {})
    assert default == TrainConfig()


def test_config_rejects_unknown_and_malformed(tmp_path):
    (tmp_path / "a.cfg").write_text("learning_rate = 1\n")
    with pytest.raises(ParameterError, match="learning_rate"):
        load_config(tmp_path / "a.cfg")
    with pytest.raises(ParameterError):
        parse_config_text("lr 0.1\n")
    (tmp_path / "b.cfg").write_text("augment = maybe\n")
    with pytest.raises(ParameterError):
        load_config(tmp_path / "b.cfg")


def test_log_monotone_and_csv(tmp_path):
    log = TrainLog()
    log.record(0, "spatial", 1.0, 1e-3)
    log.record(1, "spatial", 0.5, 1e-3)
    with pytest.raises(ContractError):
        log.record(1, "spatial", 0.4, 1e-3)
    log.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "iter,stage,loss,lr" and lines[2] == "1,spatial,0.5,0.001"


# stage behaviour

def test_zero_iterations_keep_init():
    data = small_data()
    c = cfg(iters_stage_spatial=0, iters_stage_temporal=0)
    a, log = train_spatial(data, c, TINY)
    b, _ = train_spatial(data, cfg(iters_stage_spatial=1), TINY)
    fresh = SpatialNet(a.arch, np.random.default_rng([0, 0, 0]))
    assert params_digest(a) == params_digest(fresh)
    assert params_digest(b) != params_digest(fresh)
    assert len(log.entries) == 0
    t, _ = train_temporal(data, c, TINY)
    assert params_digest(t) == params_digest(TemporalNet(t.arch, np.random.default_rng([0, 1, 0]), 4))


def test_every_iteration_logged_finite():
    data = small_data()
    _, log = train_spatial(data, cfg(iters_stage_spatial=5), TINY)
    its = [e[0] for e in log.entries]
    assert its == list(range(5))
    assert np.all(np.isfinite(log.losses("spatial")))


def test_spatial_memorizes_one_sample():
    data = small_data(1, 4)
    one = data.subset([0])
    c = TrainConfig(iters_stage_spatial=500, lr=1e-3, lr_decay_every=200, val_fraction=0.0, batch_size=1)
    _, log = train_spatial(one, c, {**TINY, "dropout": 0.0})
    assert log.losses("spatial")[-1] < 1e-3


def test_temporal_memorizes_constant_sequence():
    data = small_data(1, 4)
    const = Dataset(np.repeat(data.depth[:1], 4, 0), np.repeat(data.pose[:1], 4, 0), data.seq, data.idx, 4, 4)
    c = TrainConfig(iters_stage_temporal=600, lr=1e-3, lr_decay_every=300, val_fraction=0.0, T=4, batch_size=1)
    _, log = train_temporal(const, c, {**TINY, "feat": 32, "hidden": 16})
    assert log.losses("temporal")[-1] < 1e-3


def test_runs_are_bit_identical(tmp_path):
    data = small_data()
    for k in range(2):
        s, _ = train_spatial(data, cfg(seed=5), TINY)
        t, _ = train_temporal(data, cfg(seed=5), TINY)
        save_network(tmp_path / f"s{k}.cadp", s, cfg(seed=5))
        save_network(tmp_path / f"t{k}.cadp", t, cfg(seed=5))
    assert (tmp_path / "s0.cadp").read_bytes() == (tmp_path / "s1.cadp").read_bytes()
    assert (tmp_path / "t0.cadp").read_bytes() == (tmp_path / "t1.cadp").read_bytes()
    other, _ = train_spatial(data, cfg(seed=6), TINY)
    assert params_digest(other) != params_digest(load_network(tmp_path / "s0.cadp"))


def test_input_order_does_not_matter():
    data = small_data()
    shuffled = data.subset(np.random.default_rng(0).permutation(data.N))
    a, _ = train_temporal(data, cfg(), TINY)
    b, _ = train_temporal(shuffled, cfg(), TINY)
    assert params_digest(a) == params_digest(b)
    c, _ = train_spatial(data, cfg(), TINY)
    d, _ = train_spatial(shuffled, cfg(), TINY)
    assert params_digest(c) == params_digest(d)


def test_augment_doubles_epoch():
    data = small_data()
    train, _ = data.split(0.1)
    _, log = train_spatial(data, cfg(augment=True, iters_stage_spatial=1), TINY)
    assert log.epoch_samples["spatial"] == 2 * train.N
    _, log = train_temporal(data, cfg(augment=True, iters_stage_temporal=1), TINY)
    assert log.epoch_samples["temporal"] == 2 * train.N // 4


def test_short_sequences_skipped_and_counted():
    data = small_data(10, 4)
    keep = ~((data.seq == 2) & (data.idx == 3))
    _, log = train_temporal(data.subset(np.nonzero(keep)[0]), cfg(), TINY)
    assert log.skipped_sequences == 1


def test_empty_data_errors():
    data = small_data(1, 4)
    empty = data.subset(np.zeros(0, dtype=np.int64))
    with pytest.raises(DataError):
        train_spatial(empty, cfg(), TINY)
    with pytest.raises(DataError):
        train_temporal(data, cfg(T=8), TINY)


def test_nan_aborts_with_diagnostic():
    data = small_data()
    data.depth[:, 8, 8] = np.nan  # depth branch only; the pixel counts as background when slicing
    with pytest.raises(NonFiniteError, match="first non-finite tensor: output of node 0 \\(conv2d"):
        train_spatial(data, cfg(), TINY)


# fusion stage

def test_fusion_needs_upstream():
    with pytest.raises(DependencyError):
        train_fusion(small_data(), cfg(), None, None, TINY)


def test_fusion_freezes_upstream(tmp_path):
    data = small_data()
    s, _ = train_spatial(data, cfg(), TINY)
    t, _ = train_temporal(data, cfg(), TINY)
    save_network(tmp_path / "s.cadp", s)
    save_network(tmp_path / "t.cadp", t)
    before = ((tmp_path / "s.cadp").read_bytes(), (tmp_path / "t.cadp").read_bytes())
    f, log = train_fusion(data, cfg(iters_stage_fusion=20), s, t, TINY)
    save_network(tmp_path / "s.cadp", s)
    save_network(tmp_path / "t.cadp", t)
    assert ((tmp_path / "s.cadp").read_bytes(), (tmp_path / "t.cadp").read_bytes()) == before
    assert len(log.losses("fusion")) == 20


def test_fusion_detects_upstream_mutation(monkeypatch):
    import handfuse.training as tr
    data = small_data()
    s, _ = train_spatial(data, cfg(), TINY)
    t, _ = train_temporal(data, cfg(), TINY)
    real = tr.fit_fusion

    def meddle(*a, **kw):
        out = real(*a, **kw)
        s.params["head.out.b"].data += 1
        return out

    monkeypatch.setattr(tr, "fit_fusion", meddle)
    with pytest.raises(ContractError, match="upstream"):
        tr.train_fusion(data, cfg(), s, t, TINY)


def test_fusion_identical_predictors_never_worse():
    rng = np.random.default_rng(0)
    truth = rng.uniform(-1, 1, (64, 6))
    j = truth + rng.normal(0, 0.1, truth.shape)
    base = float(T.l2_loss(j, truth).data)
    c = TrainConfig(iters_stage_fusion=50, batch_size=64, val_fraction=0.0)
    _, log = fit_fusion(j, j.copy(), truth, c, tiny_arch())
    assert np.all(log.losses("fusion") <= base + 1e-12)


def test_fusion_learns_which_predictor_to_trust():
    # temporal is accurate on odd joints, spatial on even ones
    rng = np.random.default_rng(1)
    K = 4
    truth = rng.uniform(-0.5, 0.5, (512, 3 * K))
    odd = np.repeat(np.arange(K) % 2 == 1, 3)
    noise_t = np.where(odd, 0.01, 0.3)
    noise_s = np.where(odd, 0.3, 0.01)
    jt = truth + rng.normal(size=truth.shape) * noise_t
    js = truth + rng.normal(size=truth.shape) * noise_s
    c = TrainConfig(iters_stage_fusion=400, batch_size=128, val_fraction=0.0, lr=1e-2)
    net, _ = fit_fusion(jt, js, truth, c, tiny_arch(K=K, fusion_hidden=16))
    _, w1 = net.forward(jt, js)
    mean_w1 = w1.data.mean(axis=0)
    assert np.all(mean_w1[odd] > 0.5) and np.all(mean_w1[~odd] < 0.5)
