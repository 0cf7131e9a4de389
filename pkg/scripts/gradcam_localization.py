"""Quadrant localisation of Grad-CAM across training seeds.

For each seed a model is trained on the synthetic set, then scored on 20
single-lesion images: a hit is >= 50% of heatmap mass in the lesion's quadrant.

    python scripts/gradcam_localization.py --seeds 0 1 2 --stages 3
"""
import argparse

from swinchex.experiments import gradcam_config, hit_rate, localization_hits, train_synthetic
from swinchex.model import ModelConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--stages", type=int, default=3, choices=(3, 4))
    ap.add_argument("--images", type=int, default=320)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--test-seed", type=int, default=100)
    args = ap.parse_args()

    cfg = gradcam_config() if args.stages == 3 else ModelConfig.desk(init_std=0.1)
    for seed in args.seeds:
        run = train_synthetic(cfg, args.images, args.epochs, seed=seed)
        shares = localization_hits(run.state.model, 20, seed=args.test_seed)
        print(f"seed {seed}: val AUC {run.history[-1].val_mean_auc:.3f}, "
              f"hits {hit_rate(shares):.2f}, median share {sorted(shares)[10]:.2f}", flush=True)


if __name__ == "__main__":
    main()
