import numpy as np
import pytest

from handfuse import checkpoint
from handfuse.dataset import Dataset, convert_directory, read_pgm16, write_pgm16
from handfuse.errors import DataError, FormatError, ParameterError
from handfuse.preprocess import Intrinsics
from handfuse.synth import SynthConfig, generate, joint_sigmas, random_walk, render

SMALL = dict(M=24, K=3, T=6, n_sequences=5)


# synthetic data

def test_generate_is_deterministic(tmp_path):
    a = generate(SynthConfig(**SMALL, seed=3)).to_bytes()
    b = generate(SynthConfig(**SMALL, seed=3)).to_bytes()
    c = generate(SynthConfig(**SMALL, seed=4)).to_bytes()
    assert a == b and a != c


def test_generate_shapes_and_ranges():
    ds = generate(SynthConfig(**SMALL))
    assert (ds.N, ds.M, ds.K, ds.T) == (30, 24, 3, 6)
    assert ds.depth.dtype == np.float32 and ds.pose.dtype == np.float32
    assert np.all(ds.depth <= 1.0) and np.all(ds.depth >= -1.0)
    assert np.all(np.abs(ds.pose) <= 1.0)
    # every frame shows some hand
    assert np.all((ds.depth < 1.0).reshape(ds.N, -1).any(axis=1))
    np.testing.assert_array_equal(ds.seq, np.repeat(np.arange(5), 6))
    np.testing.assert_array_equal(ds.idx, np.tile(np.arange(6), 5))


def test_step_bound_respected():
    cfg = SynthConfig(**SMALL, smoothness=0.04)
    ds = generate(cfg)
    p = ds.pose.reshape(5, 6, 3, 3).astype(np.float64)
    steps = np.linalg.norm(np.diff(p, axis=1), axis=-1)
    assert steps.max() <= 2 * cfg.smoothness + 1e-6


def test_tiny_smoothness_freezes_sequences():
    ds = generate(SynthConfig(**SMALL, smoothness=1e-12))
    d = ds.depth.reshape(5, 6, 24, 24)
    p = ds.pose.reshape(5, 6, -1)
    # depth near zero keeps float32 digits fine enough to see 1e-12 steps
    np.testing.assert_allclose(d, np.broadcast_to(d[:, :1], d.shape), rtol=0, atol=1e-9)
    np.testing.assert_allclose(p, np.broadcast_to(p[:, :1], p.shape), rtol=0, atol=1e-9)


def test_lag1_autocorrelation_beats_shuffled():
    ds = generate(SynthConfig(M=16, K=4, T=16, n_sequences=40, smoothness=0.05))
    p = ds.pose.reshape(40, 16, -1).astype(np.float64)
    p -= p.mean(axis=1, keepdims=True)  # within-sequence fluctuations only
    rng = np.random.default_rng(0)
    shuffled = np.stack([s[rng.permutation(16)] for s in p])

    def lag1(x):
        a, b = x[:, :-1].reshape(-1), x[:, 1:].reshape(-1)
        return np.corrcoef(a, b)[0, 1]
    assert lag1(p) > lag1(shuffled) + 0.1


def test_render_and_walk():
    rng = np.random.default_rng(0)
    walk = random_walk(rng, 4, 10, 0.05)
    assert walk.shape == (10, 4, 3)
    img = render(walk[0], 32)
    assert img.shape == (32, 32) and img.min() < 1.0
    assert np.all(np.diff(joint_sigmas(5)) > 0)
    # the nearest surface point sits at a joint centre, one bump height in front
    j = np.array([[0.0, 0.0, 0.1]])
    assert render(j, 65).min() == pytest.approx(0.1 - 0.2, abs=1e-3)


@pytest.mark.parametrize("kw", [dict(K=1), dict(T=1), dict(smoothness=0.0), dict(smoothness=0.5),
                                dict(occlusion=1.0)])
def test_config_validation(kw):
    with pytest.raises(ParameterError):
        generate(SynthConfig(**{**SMALL, **kw}))


# HPD1 container

def test_hpd1_roundtrip_bit_exact(tmp_path):
    ds = generate(SynthConfig(**SMALL))
    ds.save(tmp_path / "d.hpd1")
    back = Dataset.load(tmp_path / "d.hpd1")
    assert back.to_bytes() == ds.to_bytes()
    assert (back.L, back.T) == (ds.L, ds.T)


def test_hpd1_header_layout():
    ds = generate(SynthConfig(**SMALL, L=5))
    buf = ds.to_bytes()
    assert buf[:4] == b"HPD1"
    header = np.frombuffer(buf[4:28], dtype="<u4")
    np.testing.assert_array_equal(header, [1, 30, 24, 3, 5, 6])
    rec = 24 * 24 * 4 + 9 * 4 + 8
    assert len(buf) == 28 + 30 * rec
    first = buf[28:28 + rec]
    np.testing.assert_array_equal(np.frombuffer(first[:24 * 24 * 4], "<f4").reshape(24, 24), ds.depth[0])
    assert np.frombuffer(first[-8:], "<u4").tolist() == [0, 0]


@pytest.mark.parametrize("mutate", [lambda b: b"XPD1" + b[4:], lambda b: b[:4] + b"\x02" + b[5:],
                                    lambda b: b[:-1], lambda b: b + b"\x00", lambda b: b[:10]])
def test_hpd1_rejects_corrupt(mutate):
    buf = generate(SynthConfig(**SMALL)).to_bytes()
    with pytest.raises(FormatError):
        Dataset.from_bytes(mutate(buf))


def test_hpd1_missing_file(tmp_path):
    with pytest.raises(FormatError):
        Dataset.load(tmp_path / "nope.hpd1")


def test_split_and_windows():
    ds = generate(SynthConfig(M=16, K=2, T=4, n_sequences=20))
    train, val = ds.split(0.1)
    assert set(val.seq.tolist()) == {18, 19}
    assert not set(train.seq.tolist()) & {18, 19}
    # dropping frames from one sequence makes it too short
    keep = ~((ds.seq == 3) & (ds.idx >= 2))
    rows, short = ds.subset(np.nonzero(keep)[0]).windows(4)
    assert short == 1 and rows.shape == (19, 4)


def test_windows_ignore_file_order():
    ds = generate(SynthConfig(M=16, K=2, T=4, n_sequences=6))
    perm = np.random.default_rng(0).permutation(ds.N)
    shuffled = ds.subset(perm)
    rows_a, _ = ds.windows(4)
    rows_b, _ = shuffled.windows(4)
    np.testing.assert_array_equal(ds.depth[rows_a], shuffled.depth[rows_b])
    for w in rows_b:
        assert len(set(shuffled.seq[w].tolist())) == 1
        assert np.all(np.diff(shuffled.idx[w].astype(int)) == 1)


# PGM + converter

def test_pgm_roundtrip(tmp_path):
    d = np.random.default_rng(0).integers(0, 65535, size=(7, 9))
    write_pgm16(tmp_path / "a.pgm", d)
    np.testing.assert_array_equal(read_pgm16(tmp_path / "a.pgm"), d)
    (tmp_path / "b.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError):
        read_pgm16(tmp_path / "b.pgm")


def make_capture(root, cam, n_seq=2, n_frames=3):
    rng = np.random.default_rng(1)
    v, u = np.mgrid[0:120, 0:160]
    for s in range(n_seq):
        seq = root / f"seq{s}"
        seq.mkdir()
        for i in range(n_frames):
            cu, cv, z = 80 + rng.uniform(-5, 5), 60 + rng.uniform(-5, 5), 500 + rng.uniform(-20, 20)
            depth = np.where((u - cu) ** 2 + (v - cv) ** 2 < 15 ** 2, z, 0)
            write_pgm16(seq / f"{i:04d}.pgm", depth)
            joints = cam.backproject(np.array([[cu, cv, z], [cu + 5, cv, z + 10]]))
            np.savetxt(seq / f"{i:04d}.txt", joints)


def test_convert_directory(tmp_path):
    cam = Intrinsics(150, 150, 80, 60)
    make_capture(tmp_path, cam)
    ds, clamped = convert_directory(tmp_path, M=32, L=4, T=3, camera=cam)
    assert (ds.N, ds.M, ds.K, ds.L, ds.T) == (6, 32, 2, 4, 3)
    assert clamped == 0
    assert ds.seq.tolist() == [0, 0, 0, 1, 1, 1] and ds.idx.tolist() == [0, 1, 2] * 2
    # the first joint sits at the blob centre, close to the crop centre
    assert np.all(np.abs(ds.pose[:, :2]) < 0.1)


def test_convert_missing_joint_file(tmp_path):
    cam = Intrinsics(150, 150, 80, 60)
    make_capture(tmp_path, cam, 1, 2)
    (tmp_path / "seq0" / "0001.txt").unlink()
    with pytest.raises(DataError):
        convert_directory(tmp_path, M=16, camera=cam)


# CADP checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a.w": rng.normal(size=(3, 4)).astype(np.float32), "b": rng.normal(size=5).astype(np.float32),
              "scalar": np.float32(2.5).reshape(()), "ü": np.zeros((2, 0, 3), np.float32)}
    cfg = {"kind": "fusion", "arch": {"K": 2}}
    checkpoint.save(tmp_path / "c.cadp", arrays, cfg)
    back, cfg2 = checkpoint.load(tmp_path / "c.cadp")
    assert cfg2 == cfg and list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape and back[k].tobytes() == arrays[k].tobytes()
    assert checkpoint.dumps(back, cfg2) == (tmp_path / "c.cadp").read_bytes()
    assert checkpoint.digest(back) == checkpoint.digest(arrays)


def test_checkpoint_layout():
    buf = checkpoint.dumps({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, {})
    assert buf[:4] == b"CADP"
    version, cfg_len = np.frombuffer(buf[4:12], "<u4")
    assert version == 1 and buf[12:12 + cfg_len] == b"{}"
    rest = buf[12 + cfg_len:]
    assert np.frombuffer(rest[:4], "<u4")[0] == 1
    assert np.frombuffer(rest[4:8], "<u4")[0] == 1 and rest[8:9] == b"w"
    assert np.frombuffer(rest[9:13], "<u4")[0] == 2
    assert np.frombuffer(rest[13:29], "<u8").tolist() == [2, 3]
    np.testing.assert_array_equal(np.frombuffer(rest[29:], "<f4"), np.arange(6))


@pytest.mark.parametrize("mutate", [lambda b: b"XADP" + b[4:], lambda b: b[:4] + b"\x09" + b[5:],
                                    lambda b: b[:-2], lambda b: b + b"\x00"])
def test_checkpoint_rejects_corrupt(mutate):
    buf = checkpoint.dumps({"w": np.ones(3, np.float32)}, {"k": 1})
    with pytest.raises(FormatError):
        checkpoint.loads(mutate(buf))


def test_shuffled_within_sequences_keeps_frames_in_their_sequence():
    ds = generate(SynthConfig(**SMALL))
    sh = ds.shuffled_within_sequences(np.random.default_rng(0))
    assert sh.N == ds.N
    for s in ds.sequence_ids():
        a = np.sort(ds.pose[ds.seq == s], axis=0)
        b = np.sort(sh.pose[sh.seq == s], axis=0)
        np.testing.assert_array_equal(a, b)
    order_a = np.lexsort((ds.idx, ds.seq))
    order_b = np.lexsort((sh.idx, sh.seq))
    assert not np.array_equal(ds.pose[order_a], sh.pose[order_b])
