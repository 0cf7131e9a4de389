"""Write a synthetic labelled image set (label CSV + PNGs) and a matching run config."""
import argparse
from pathlib import Path

from swinchex.config import DataConfig, OutputConfig, desk_run_config
from swinchex.data import write_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("root", type=Path)
    ap.add_argument("--n", type=int, default=320)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--noise", type=float, default=0.05)
    ap.add_argument("--placement", default="random", choices=("random", "fixed"))
    args = ap.parse_args()

    records = write_synthetic(args.root, args.n, args.size, seed=args.seed, noise=args.noise,
                              placement=args.placement)
    cfg = desk_run_config(image_size=args.size)
    # paths relative to the config file's directory
    cfg.data = DataConfig(labels="Data_Entry_2017.csv", images="images")
    cfg.output = OutputConfig(dir="run")
    cfg.save(args.root / "run.ini")
    patients = len({r.patient_id for r in records})
    print(f"{len(records)} images, {patients} patients -> {args.root}/run.ini")


if __name__ == "__main__":
    main()
