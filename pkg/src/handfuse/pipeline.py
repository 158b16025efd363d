"""Inference over a whole dataset: both networks per sequence, then fusion."""
from __future__ import annotations

import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .dataset import Dataset
from .errors import SequenceError
from .models import FusionNet, SpatialNet, TemporalNet
from .training import predict_spatial, predict_temporal


@dataclass
class Predictions:
    """Normalized predictions in canonical (sequence, index) order."""

    j_out: np.ndarray
    j_temp: np.ndarray
    j_spa: np.ndarray
    truth: np.ndarray
    w1: np.ndarray


def sequence_windows(data: Dataset, T_len: int) -> np.ndarray:
    data_rows = np.lexsort((data.idx, data.seq))
    seqs = data.seq[data_rows]
    for s in np.unique(seqs):
        n = int(np.sum(seqs == s))
        if n % T_len:
            raise SequenceError(f"sequence {s} has {n} frames, not a multiple of T={T_len}")
    return data_rows.reshape(-1, T_len)


def predict(data: Dataset, spatial: SpatialNet, temporal: TemporalNet, fusion: FusionNet,
            workers: int = 1, chunk: int = 4) -> Predictions:
    """Run the full pipeline; ``workers > 1`` splits windows across threads."""
    windows = sequence_windows(data, temporal.T)
    groups = [windows[s:s + chunk] for s in range(0, len(windows), chunk)]

    def run(rows):
        flat = rows.reshape(-1)
        jt = predict_temporal(temporal, data.depth[rows], chunk=len(rows)).reshape(len(flat), -1)
        js = predict_spatial(spatial, data.depth[flat], chunk=len(flat))
        out, w1 = fusion.forward(jt.astype(fusion.arch.dtype), js.astype(fusion.arch.dtype))
        return flat, jt, js, out.data, w1.data

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, groups))
    else:
        parts = [run(g) for g in groups]
    flat = np.concatenate([p[0] for p in parts])
    return Predictions(
        j_out=np.concatenate([p[3] for p in parts]),
        j_temp=np.concatenate([p[1] for p in parts]),
        j_spa=np.concatenate([p[2] for p in parts]),
        truth=data.pose[flat],
        w1=np.concatenate([p[4] for p in parts]),
    )


def bench(data: Dataset, spatial: SpatialNet, temporal: TemporalNet, fusion: FusionNet,
          passes: int = 5, threads: int = 4) -> dict:
    """Median frames per second over ``passes`` timed runs, single- and multi-threaded."""
    passes = max(passes, 5)
    report = {"frames": int(data.N), "passes": passes}
    reference = None
    for label, workers in (("single_thread", 1), ("multi_thread", threads)):
        times = []
        with threadpool_limits(limits=1 if workers == 1 else workers):
            for _ in range(passes):
                t0 = time.perf_counter()
                p = predict(data, spatial, temporal, fusion, workers=workers)
                times.append(time.perf_counter() - t0)
        if reference is None:
            reference = p.j_out
        report[label] = {"workers": workers, "median_seconds": statistics.median(times),
                         "fps": data.N / statistics.median(times)}
        report[f"{label}_identical"] = bool(np.array_equal(reference, p.j_out))
    return report
