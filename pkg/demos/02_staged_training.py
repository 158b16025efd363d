"""Train the three stages in order and compare single networks with fusion.

The spatial and temporal networks are trained first and frozen; the
fusion network then learns per-coordinate weights from their
predictions. The final table sets the learned weights against fixed
ones.

    python3 demos/02_staged_training.py            # about a minute
    python3 demos/02_staged_training.py --full     # default dataset, a few minutes
"""
import argparse
import time

from handfuse.metrics import average_error, fixed_weight_fusion_sweep
from handfuse.pipeline import predict
from handfuse.synth import SynthConfig, generate
from handfuse.training import TrainConfig, train_fusion, train_spatial, train_temporal

MM = 150.0  # half the cube side: normalized units to millimetres


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--full", action="store_true", help="default 64x64 dataset and iteration budgets")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if args.full:
        synth, config = SynthConfig(seed=args.seed), TrainConfig(seed=args.seed)
    else:
        synth = SynthConfig(M=32, n_sequences=128, seed=args.seed)
        config = TrainConfig(iters_stage_spatial=800, iters_stage_temporal=800, iters_stage_fusion=400,
                             lr_decay_every=600, seed=args.seed)
    data = generate(synth)
    t0 = time.perf_counter()
    spatial, _ = train_spatial(data, config)
    temporal, _ = train_temporal(data, config)
    fusion, _ = train_fusion(data, config, spatial, temporal)
    print(f"trained three stages in {time.perf_counter() - t0:.0f}s")

    train, val = data.split(config.val_fraction)
    for name, split in (("train", train), ("validation", val)):
        p = predict(split, spatial, temporal, fusion)
        errs = [average_error(j * MM, p.truth * MM) for j in (p.j_spa, p.j_temp, p.j_out)]
        print(f"{name:10s} spatial {errs[0]:6.2f}  temporal {errs[1]:6.2f}  fused {errs[2]:6.2f} mm")

    print("\nfixed weight on the temporal prediction (validation):")
    for w, e in fixed_weight_fusion_sweep(p.j_temp * MM, p.j_spa * MM, p.truth * MM):
        print(f"  w={w:.1f}  {e:6.2f} mm")
    print(f"  learned {errs[2]:6.2f} mm, mean temporal weight {p.w1.mean():.2f}")


if __name__ == "__main__":
    main()
