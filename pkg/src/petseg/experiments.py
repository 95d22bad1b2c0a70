"""Single-label versus multilabel training on the synthetic organ-distractor task.

Both arms see identical studies, seeds and hyperparameters; they differ only
in the class schema of the training target. Metrics are always computed on
the lesion class of held-out studies.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .label_fusion import BINARY_SCHEMA, DEFAULT_CLASS_NAMES, LabelSchema, fuse_labels
from .metrics import evaluate_case, summarize
from .micronet.loss import LossSpec
from .micronet.network import NetConfig, build_network
from .micronet.optim import OptimizerState
from .micronet.synthetic import generate_synthetic_study
from .micronet.train import predict_labels, train
from .preprocess import normalize_ct
from .volume_io import LabelMap

METRICS = ("dice", "fpv_ml", "fnv_ml")


@dataclass
class AblationConfig:
    arms: dict = field(default_factory=lambda: {
        "single_label": [],
        "multilabel": list(DEFAULT_CLASS_NAMES[2:5]),
    })
    train_sizes: tuple = (16,)
    n_test: int = 8
    seeds: tuple = (0, 1, 2)
    size: int = 32
    n_organs: int = 3
    n_lesions: int = 2
    base_features: int = 4
    num_downsamples: int = 2
    epochs: int = 120
    batch_size: int = 1
    learning_rate: float = 0.01
    momentum: float = 0.99
    lesion_weight: float = 20.0
    dice_ce_mix: float = 0.5
    conn: int = 26
    ci_level: float = 0.95
    n_boot: int = 10000
    metrics_seed: int = 0

    def __post_init__(self):
        self.train_sizes = tuple(int(n) for n in self.train_sizes)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.arms = {k: list(v) for k, v in self.arms.items()}
        organ_pool = DEFAULT_CLASS_NAMES[2 : 2 + self.n_organs]
        for arm, organs in self.arms.items():
            for o in organs:
                if o not in organ_pool:
                    raise ConfigError(f"arm {arm!r}: organ {o!r} is not one of the {self.n_organs} generated organs")
        if not self.arms or not self.train_sizes or not self.seeds:
            raise ConfigError("ablation needs at least one arm, one train size and one seed")
        if min(self.train_sizes) < 1 or self.n_test < 1:
            raise ConfigError("train and test sizes must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_sizes"] = list(self.train_sizes)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AblationConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ablation config keys: {sorted(unknown)}")
        return cls(**d)

    def schema(self, arm: str) -> LabelSchema:
        organs = self.arms[arm]
        return LabelSchema(("background", "lesion", *organs)) if organs else BINARY_SCHEMA


def _study_seed(seed: int, split: str, i: int) -> int:
    # disjoint, reproducible streams for train and test studies of each seed
    return (seed * 2 + (split == "test")) * 1_000_003 + i


def _target(lesion: LabelMap, organs: list, schema: LabelSchema) -> np.ndarray:
    if schema.n_classes == 2:
        return lesion.labels
    pool = dict(zip(DEFAULT_CLASS_NAMES[2:], organs))
    return fuse_labels(lesion, [pool[o] for o in schema.organ_names], schema=schema).labels


def _studies(cfg: AblationConfig, seed: int, split: str, n: int):
    size = (cfg.size,) * 3
    return [generate_synthetic_study(size, cfg.n_organs, cfg.n_lesions, _study_seed(seed, split, i)) for i in range(n)]


def _input(pet, ct) -> np.ndarray:
    return np.stack([pet.data, normalize_ct(ct).data])


def train_arm(cfg: AblationConfig, arm: str, train_studies, seed: int):
    schema = cfg.schema(arm)
    data = [(_input(p, c), _target(les, org, schema)) for p, c, les, org in train_studies]
    net = build_network(
        NetConfig(in_channels=2, num_classes=schema.n_classes, base_features=cfg.base_features,
                  num_downsamples=cfg.num_downsamples, dtype="float32"),
        seed,
    )
    weights = (1.0, cfg.lesion_weight) + (1.0,) * (schema.n_classes - 2)
    spec = LossSpec(class_weights=weights, dice_ce_mix=cfg.dice_ce_mix)
    opt = OptimizerState(learning_rate=cfg.learning_rate, momentum=cfg.momentum, max_epochs=cfg.epochs)
    hist = train(net, data, epochs=cfg.epochs, batch_size=cfg.batch_size, opt=opt, spec=spec, seed=seed)
    return net, hist


def evaluate_arm(cfg: AblationConfig, net, test_studies, seed: int) -> list:
    rows = []
    for i, (pet, ct, lesion, _organs) in enumerate(test_studies):
        pred = predict_labels(net, _input(pet, ct))
        pred_lesion = lesion.with_labels((pred == 1).astype(np.uint8))
        m = evaluate_case(pred_lesion, lesion, BINARY_SCHEMA, conn=cfg.conn, with_nsd=False,
                          study_id=f"seed{seed}_test{i:03d}")
        rows.append(m)
    return rows


@dataclass
class AblationReport:
    config: dict
    table: list
    per_seed: list
    direction: dict

    def to_dict(self) -> dict:
        return {"config": self.config, "table": self.table, "per_seed": self.per_seed, "direction": self.direction}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """One row per model and train size; mean and CI bounds per metric."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["model", "n_train"]
        for m in METRICS:
            header += [m, f"{m}_ci_lo", f"{m}_ci_hi"]
        w.writerow(header)
        for row in self.table:
            out = [row["model"], row["n_train"]]
            for m in METRICS:
                a = row[m]
                out += [repr(a["mean"]), repr(a["ci_lo"]), repr(a["ci_hi"])]
            w.writerow(out)
        return buf.getvalue()


def _direction(per_seed: list, arms: list, sizes: tuple) -> dict:
    """Seed-wise comparison of the last arm (treatment) against the first (control)."""
    if len(arms) < 2:
        return {}
    control, treat = arms[0], arms[-1]
    out = {"control": control, "treatment": treat, "by_train_size": {}}
    for n in sizes:
        wins = []
        for rec_c in (r for r in per_seed if r["model"] == control and r["n_train"] == n):
            rec_t = next(r for r in per_seed if r["model"] == treat and r["n_train"] == n and r["seed"] == rec_c["seed"])
            wins.append({
                "seed": rec_c["seed"],
                "lower_fpv": rec_t["fpv_ml"] < rec_c["fpv_ml"],
                "dice_not_worse": rec_t["dice"] >= rec_c["dice"],
            })
        both = sum(w["lower_fpv"] and w["dice_not_worse"] for w in wins)
        out["by_train_size"][str(n)] = {"seeds": wins, "n_seeds_both": both, "n_seeds": len(wins)}
    return out


def run_label_ablation(cfg: AblationConfig, progress=None) -> AblationReport:
    arms = list(cfg.arms)
    per_seed, pooled = [], {}
    for seed in cfg.seeds:
        test_studies = _studies(cfg, seed, "test", cfg.n_test)
        train_pool = _studies(cfg, seed, "train", max(cfg.train_sizes))
        for n in cfg.train_sizes:
            for arm in arms:
                net, hist = train_arm(cfg, arm, train_pool[:n], seed)
                rows = evaluate_arm(cfg, net, test_studies, seed)
                pooled.setdefault((arm, n), []).extend(rows)
                rec = {"model": arm, "n_train": n, "seed": seed, "final_loss": hist.epoch_loss[-1]}
                rec.update({m: float(np.mean([getattr(r, m) for r in rows])) for m in METRICS})
                per_seed.append(rec)
                if progress is not None:
                    progress(rec)
    table = []
    for n in cfg.train_sizes:
        for arm in arms:
            rep = summarize(pooled[(arm, n)], cfg.ci_level, cfg.n_boot, cfg.metrics_seed)
            row = {"model": arm, "n_train": n, "n_cases": len(rep.rows)}
            row.update({m: rep.aggregates[m] for m in METRICS})
            table.append(row)
    return AblationReport(cfg.to_dict(), table, per_seed, _direction(per_seed, arms, cfg.train_sizes))



@dataclass
class OverfitConfig:
    """Memorisation check: can the micro UNet fit a handful of synthetic studies."""

    n_cases: int = 8
    size: int = 32
    n_organs: int = 3
    n_lesions: int = 2
    multilabel: bool = False
    base_features: int = 4
    num_downsamples: int = 2
    max_epochs: int = 200
    batch_size: int = 1
    learning_rate: float = 0.01
    momentum: float = 0.99
    lesion_weight: float = 20.0
    target_dice: float = 0.9
    check_every: int = 5

    def to_dict(self) -> dict:
        return asdict(self)


def train_set_dice(net, x: np.ndarray, y: np.ndarray) -> float:
    """Mean per-case lesion Dice of ``net`` on stacked inputs ``x`` and labels ``y``."""
    pred = predict_labels(net, x) == 1
    gt = y == 1
    scores = []
    for p, g in zip(pred, gt):
        denom = p.sum() + g.sum()
        scores.append(1.0 if denom == 0 else 2.0 * (p & g).sum() / denom)
    return float(np.mean(scores))


def run_overfit(cfg: OverfitConfig, seed: int, progress=None) -> dict:
    from .micronet.synthetic import synthetic_dataset

    data = synthetic_dataset(cfg.n_cases, (cfg.size,) * 3, cfg.n_organs, cfg.n_lesions, seed=seed,
                             multilabel=cfg.multilabel)
    k = cfg.n_organs + 2 if cfg.multilabel else 2
    net = build_network(
        NetConfig(in_channels=2, num_classes=k, base_features=cfg.base_features,
                  num_downsamples=cfg.num_downsamples, dtype="float32"),
        seed,
    )
    x = np.stack([d[0] for d in data])
    y = np.stack([d[1] for d in data])
    trace = []

    def check(epoch, net, loss):
        if epoch % cfg.check_every:
            return None
        d = train_set_dice(net, x, y)
        trace.append({"epoch": epoch, "loss": loss, "dice": d})
        if progress is not None:
            progress(seed, trace[-1])
        return d >= cfg.target_dice or None

    spec = LossSpec(class_weights=(1.0, cfg.lesion_weight) + (1.0,) * (k - 2))
    opt = OptimizerState(learning_rate=cfg.learning_rate, momentum=cfg.momentum, max_epochs=cfg.max_epochs)
    hist = train(net, data, epochs=cfg.max_epochs, batch_size=cfg.batch_size, opt=opt, spec=spec, seed=seed,
                 callback=check)
    final = trace[-1]["dice"] if trace and trace[-1]["epoch"] == hist.epochs_run else train_set_dice(net, x, y)
    return {
        "seed": seed,
        "epochs": hist.epochs_run,
        "reached": bool(final >= cfg.target_dice),
        "final_dice": final,
        "seconds": hist.seconds,
        "epoch_loss": hist.epoch_loss,
        "trace": trace,
    }
