"""Generate phantoms and run the eleven-configuration ablation through the CLI.

    python scripts/run_ablation.py --out ablation_run [--count 8] [--epochs 20]
"""
import argparse
import sys
from pathlib import Path

from agfanet import cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--count", type=int, default=8)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    code = cli.main(["phantom", "--count", str(args.count), "--seed", str(args.seed), "--out-dir", str(out / "data")])
    if code == 0:
        code = cli.main(["ablate", "--data-manifest", str(out / "data" / "manifest.json"), "--epochs",
                         str(args.epochs), "--seed", str(args.seed), "--out", str(out / "table")])
    sys.exit(code)


if __name__ == "__main__":
    main()
