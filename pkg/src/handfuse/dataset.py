"""HPD1 dataset container and the PGM-16 directory converter.

HPD1 layout, integers little-endian u32 and floats little-endian f32::

    b"HPD1"  version  N  M  K  L  T
    N x { depth[M*M]  pose[3K]  sequence_id  index_in_sequence }
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .preprocess import HandPose, Intrinsics, RawDepthFrame, crop_hand, normalize_pose

MAGIC = b"HPD1"
VERSION = 1
_HEADER = struct.Struct("<4s6I")


def record_dtype(M: int, K: int) -> np.dtype:
    return np.dtype([("depth", "<f4", (M, M)), ("pose", "<f4", (3 * K,)),
                     ("seq", "<u4"), ("idx", "<u4")])


@dataclass
class Dataset:
    depth: np.ndarray  # (N, M, M) float32, normalized
    pose: np.ndarray  # (N, 3K) float32, normalized
    seq: np.ndarray  # (N,) uint32
    idx: np.ndarray  # (N,) uint32
    L: int = 8
    T: int = 16

    @property
    def N(self) -> int:
        return self.depth.shape[0]

    @property
    def M(self) -> int:
        return self.depth.shape[1]

    @property
    def K(self) -> int:
        return self.pose.shape[1] // 3

    def canonical(self) -> "Dataset":
        """Records sorted by (sequence id, index); independent of file order."""
        order = np.lexsort((self.idx, self.seq))
        return self.subset(order)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.depth[rows], self.pose[rows], self.seq[rows], self.idx[rows], self.L, self.T)

    def sequence_ids(self) -> np.ndarray:
        return np.unique(self.seq)

    def shuffled_within_sequences(self, rng: np.random.Generator) -> "Dataset":
        """Same frames with the order inside each sequence permuted.

        Frames keep their sequence, so any window still comes from one
        capture, but consecutive frames are no longer temporal neighbours.
        """
        out = self.canonical()
        idx = out.idx.copy()
        for s in out.sequence_ids():
            rows = np.nonzero(out.seq == s)[0]
            idx[rows] = out.idx[rows][rng.permutation(len(rows))]
        return Dataset(out.depth, out.pose, out.seq, idx, self.L, self.T).canonical()

    def split(self, val_fraction: float = 0.1) -> tuple["Dataset", "Dataset"]:
        """Train/validation split: the last ``val_fraction`` of sequence ids go to validation."""
        ids = self.sequence_ids()
        n_val = int(np.floor(len(ids) * val_fraction))
        if n_val == 0:
            return self.canonical(), self.subset(np.zeros(0, dtype=np.int64))
        val_ids = ids[len(ids) - n_val:]
        is_val = np.isin(self.seq, val_ids)
        return self.subset(np.nonzero(~is_val)[0]).canonical(), self.subset(np.nonzero(is_val)[0]).canonical()

    def windows(self, T: int | None = None) -> tuple[np.ndarray, int]:
        """Row indices of non-overlapping length-T windows, shape (W, T).

        Windows never cross sequence boundaries. Trailing frames that do not
        fill a window are dropped; the second return value counts sequences
        shorter than T (skipped entirely).
        """
        T = T or self.T
        order = np.lexsort((self.idx, self.seq))
        seqs = self.seq[order]
        out, short = [], 0
        for s in np.unique(seqs):
            rows = order[seqs == s]
            if len(rows) < T:
                short += 1
                continue
            n = len(rows) // T
            out.append(rows[: n * T].reshape(n, T))
        if not out:
            return np.zeros((0, T), dtype=np.int64), short
        return np.concatenate(out), short

    def to_bytes(self) -> bytes:
        rec = np.zeros(self.N, dtype=record_dtype(self.M, self.K))
        rec["depth"] = self.depth
        rec["pose"] = self.pose
        rec["seq"] = self.seq
        rec["idx"] = self.idx
        return _HEADER.pack(MAGIC, VERSION, self.N, self.M, self.K, self.L, self.T) + rec.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Dataset":
        if len(buf) < _HEADER.size:
            raise FormatError("truncated HPD1 header")
        magic, version, n, m, k, L, T = _HEADER.unpack_from(buf)
        if magic != MAGIC:
            raise FormatError(f"not an HPD1 file (magic {magic!r})")
        if version != VERSION:
            raise FormatError(f"unsupported HPD1 version {version}")
        dt = record_dtype(m, k)
        body = buf[_HEADER.size:]
        if len(body) != n * dt.itemsize:
            raise FormatError(f"HPD1 body is {len(body)} bytes, expected {n * dt.itemsize}")
        rec = np.frombuffer(body, dtype=dt)
        return cls(rec["depth"].astype(np.float32), rec["pose"].astype(np.float32),
                   rec["seq"].astype(np.uint32), rec["idx"].astype(np.uint32), L, T)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        try:
            buf = Path(path).read_bytes()
        except OSError as exc:
            raise FormatError(f"cannot read dataset {path}: {exc}") from exc
        return cls.from_bytes(buf)


def read_pgm16(path) -> np.ndarray:
    """Binary (P5) PGM with maxval > 255, stored big-endian as Netpbm requires."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
        dtype = ">u2" if maxval > 255 else "u1"
        data = np.frombuffer(buf[pos:], dtype=dtype, count=w * h)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM ({exc})") from None
    return data.reshape(h, w).astype(np.float64)


def write_pgm16(path, depth: np.ndarray) -> None:
    d = np.asarray(depth)
    h, w = d.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + d.astype(">u2").tobytes())


def convert_directory(root, M: int = 128, L: int = 8, T: int = 16, cube_mm: float = 300.0,
                      camera: Intrinsics | None = None, sentinel: float = 0.0) -> tuple[Dataset, int]:
    """Build a dataset from ``<root>/<sequence>/<frame>.pgm`` plus ``<frame>.txt``.

    Each joint file holds K lines of ``x y z`` in world millimetres (any
    whitespace layout of 3K numbers works). A root with PGM files directly
    inside is a single sequence. Returns the dataset and the number of
    joints clamped into the crop cube.
    """
    root = Path(root)
    camera = camera or Intrinsics()
    seq_dirs = sorted(p for p in root.iterdir() if p.is_dir()) or [root]
    depth, pose, seq, idx = [], [], [], []
    clamped = 0
    for s, d in enumerate(seq_dirs):
        for i, pgm in enumerate(sorted(d.glob("*.pgm"))):
            joints = pgm.with_suffix(".txt")
            if not joints.exists():
                raise DataError(f"missing joint file for {pgm}")
            raw = RawDepthFrame(read_pgm16(pgm), sentinel, camera)
            frame = crop_hand(raw, cube_mm, M)
            coords, n_out = normalize_pose(HandPose(np.loadtxt(joints).reshape(-1, 3)), frame)
            clamped += n_out
            depth.append(frame.values.astype(np.float32))
            pose.append(coords.astype(np.float32))
            seq.append(s)
            idx.append(i)
    if not depth:
        raise DataError(f"no frames found under {root}")
    if len({p.shape for p in pose}) != 1:
        raise DataError("joint files disagree on the joint count")
    ds = Dataset(np.stack(depth), np.stack(pose), np.asarray(seq, np.uint32), np.asarray(idx, np.uint32), L, T)
    return ds, clamped
