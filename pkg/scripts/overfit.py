"""Train the micro UNet to memorise 8 synthetic 32^3 studies, once per seed."""
import argparse
import json
from dataclasses import fields

from petseg.experiments import OverfitConfig, run_overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="overfit.json")
    for f in fields(OverfitConfig):
        flag = f"--{f.name.replace('_', '-')}"
        if isinstance(f.default, bool):
            ap.add_argument(flag, action=argparse.BooleanOptionalAction, default=f.default)
        else:
            ap.add_argument(flag, type=type(f.default), default=f.default)
    a = ap.parse_args()
    cfg = OverfitConfig(**{f.name: getattr(a, f.name) for f in fields(OverfitConfig)})

    results = []
    for seed in a.seeds:
        r = run_overfit(cfg, seed, progress=lambda s, t: print(f"seed {s} epoch {t['epoch']}: "
                                                                 f"loss {t['loss']:.4f} dice {t['dice']:.3f}"))
        print(f"seed {seed}: {'reached' if r['reached'] else 'missed'} dice {r['final_dice']:.3f} "
              f"after {r['epochs']} epochs in {r['seconds']:.0f}s")
        results.append(r)
    reached = sum(r["reached"] for r in results)
    print(f"{reached}/{len(results)} seeds reached {cfg.target_dice}; "
          f"total {sum(r['seconds'] for r in results):.0f}s")
    with open(a.out, "w") as fh:
        json.dump({"config": cfg.to_dict(), "results": results}, fh, indent=2)


if __name__ == "__main__":
    main()
