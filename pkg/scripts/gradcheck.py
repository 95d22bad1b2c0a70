"""Finite-difference gradient check of the micro UNet (base 4, 2 downsamples, 16^3, float64)."""
import argparse
import json

import numpy as np

from petseg.micronet import NetConfig, build_network, finite_difference_check
from petseg.micronet.synthetic import generate_synthetic_study, study_to_sample


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epsilon", type=float, default=1e-5)
    ap.add_argument("--no-freeze-gates", action="store_true", help="plain quotient through leaky-ReLU kinks")
    ap.add_argument("--out", default=None, help="write per-parameter errors as JSON")
    a = ap.parse_args()

    cfg = NetConfig(in_channels=2, num_classes=3, base_features=4, num_downsamples=2, dtype="float64")
    net = build_network(cfg, a.seed)
    x, y = study_to_sample(*generate_synthetic_study((16, 16, 16), 1, 2, a.seed), multilabel=True)
    res = finite_difference_check(net, x[None], y[None].astype(np.int64), epsilon=a.epsilon,
                                  freeze_gates=not a.no_freeze_gates)
    summary = {
        "max_rel_error": res.max_rel_error,
        "worst_param": res.worst_param,
        "worst_index": res.worst_index,
        "n_checked": res.n_checked,
        "fraction_within_1e-6": res.fraction_within(1e-6),
        "n_gate_crossings": res.n_gate_crossings,
        "seconds": round(res.seconds, 1),
        "per_param": res.per_param,
    }
    print(json.dumps({k: v for k, v in summary.items() if k != "per_param"}, indent=2))
    if a.out:
        with open(a.out, "w") as fh:
            json.dump(summary, fh, indent=2)


if __name__ == "__main__":
    main()
