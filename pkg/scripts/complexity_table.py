"""Global vs windowed attention cost over the stage resolutions, formula and measured.

    python scripts/complexity_table.py --channels 192 --window 7
"""
import argparse

from swinchex.complexity import complexity_rows, rows_to_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--sizes", type=int, nargs="+", default=[56, 28, 14, 7])
    ap.add_argument("--channels", type=int, default=192)
    ap.add_argument("--window", type=int, default=7)
    ap.add_argument("--measure", action="store_true", help="also count MACs on a real forward pass (slow)")
    ap.add_argument("--out")
    args = ap.parse_args()

    # channels double as resolution halves, as in the backbone
    rows = []
    for i, size in enumerate(args.sizes):
        rows += complexity_rows([size], [args.channels * 2 ** i], [args.window], args.measure)
    text = rows_to_csv(rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")
    for r in rows:
        print(f"{r['h']:>3}x{r['w']:<3} C={r['C']:<5} global/windowed = {r['omega_msa'] / r['omega_wmsa']:.2f}")


if __name__ == "__main__":
    main()
