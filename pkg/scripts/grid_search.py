"""Alpha grid search for FM+AT at one magnification factor: alpha_fm is swept
first, then alpha_at with alpha_fm fixed at its best value. Selection is by
validation kappa, ties to the smaller alpha.

    python scripts/grid_search.py --root runs/grid [--magnification 8] [--seed 0]
"""

import argparse
import json
import logging

from irkd.experiments import DeskExperiment, DeskSetup
from irkd.trainer import best_alpha, grid_search_alpha

ALPHAS = (0.0, 0.01, 0.1, 1.0, 10.0, 100.0)


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--root", required=True)
    p.add_argument("--magnification", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=DeskSetup.epochs)
    p.add_argument("--alphas", type=lambda s: [float(t) for t in s.split(",")], default=list(ALPHAS))
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    desk = DeskExperiment(DeskSetup(epochs=args.epochs, seeds=(args.seed,)), args.root)
    base = desk.setup.train_config(args.seed, args.magnification, desk.setup.fm_at())
    best, history = grid_search_alpha(base, args.alphas,
                                      lambda cfg: desk.distill(cfg.seed, cfg.magnification, cfg.distill).report)
    for term, results in history.items():
        chosen = best_alpha(results)
        for a, r in results.items():
            print(f"{term}={a:g}: val kappa {r.best_val_kappa:.4f} test accuracy {r.test_accuracy:.4f}"
                  + ("  <- best" if a == chosen else ""))
    out = desk.root / f"grid_seed{args.seed}_mag{args.magnification}.json"
    out.write_text(json.dumps({"best": best.to_dict(),
                               "history": {t: {f"{a:g}": r.best_val_kappa for a, r in h.items()}
                                           for t, h in history.items()}}, indent=2, sort_keys=True))
    print(json.dumps({"best_alpha_fm": best.distill.alpha_fm, "best_alpha_at": best.distill.alpha_at}))


if __name__ == "__main__":
    main()
