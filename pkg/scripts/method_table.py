"""Method table on the synthetic texture set: teacher, baseline and the six
distillation presets at factors 2, 4 and 8, mean and std over seeds.

    python scripts/method_table.py --root runs/table [--epochs 20] [--seeds 0,1,2]

Writes table.txt, table.csv and table.json next to the runs. The same table can
be rebuilt from the saved reports with ``irkd report <root>/runs``.
"""

import argparse
import json
import logging

from irkd.cli import build_table, render_csv, render_table
from irkd.experiments import DeskExperiment, DeskSetup


def _ints(text):
    return tuple(int(t) for t in text.split(","))


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--root", required=True)
    p.add_argument("--epochs", type=int, default=DeskSetup.epochs)
    p.add_argument("--per-class", type=int, default=DeskSetup.per_class)
    p.add_argument("--seeds", type=_ints, default=DeskSetup.seeds)
    p.add_argument("--factors", type=_ints, default=(2, 4, 8))
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    desk = DeskExperiment(DeskSetup(epochs=args.epochs, per_class=args.per_class, seeds=args.seeds), args.root)
    rows = build_table(desk.method_table(args.factors))
    text = render_table(rows)
    print(text, end="")
    (desk.root / "table.txt").write_text(text)
    (desk.root / "table.csv").write_text(render_csv(rows))
    (desk.root / "table.json").write_text(json.dumps({"rows": rows}, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
