"""Train each head variant on the synthetic set and write a per-pathology AUC table.

    python scripts/compare_heads.py --out heads.csv --epochs 30
"""
import argparse
import logging

from swinchex.data import make_batches, make_synthetic, patient_split, records_for
from swinchex.experiments import train_synthetic
from swinchex.model import HEAD_VARIANTS, ModelConfig, SwinModel
from swinchex.tensor import ParamSet
from swinchex.train import evaluate, write_report_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="heads.csv")
    ap.add_argument("--images", type=int, default=320)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--lr", type=float, default=3e-4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--variants", nargs="+", default=list(HEAD_VARIANTS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    records, images = make_synthetic(args.images, seed=args.seed)
    val = records_for(records, patient_split(records, 0.8, args.seed).val)
    reports = {}
    for variant in args.variants:
        cfg = ModelConfig.desk(init_std=0.1, head_variant=variant)
        kept = {}

        def keep_best(state, rec, kept=kept):
            # same rule as select_best_epoch: strictly better replaces, so the earliest tie stays
            if not kept or rec.val_mean_auc > kept["auc"]:
                kept.update(auc=rec.val_mean_auc, blob=state.model.params.to_bytes())

        run = train_synthetic(cfg, args.images, args.epochs, args.lr, args.seed, on_epoch=keep_best)
        model = SwinModel(cfg, ParamSet.from_bytes(kept["blob"]))
        reports[variant] = evaluate(model, make_batches(val, images, 32, shuffle=False))
        print(f"{variant}: best epoch {run.best_epoch} val mean AUC {reports[variant].mean_auc:.4f}")
    write_report_csv(reports, args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
