"""``petseg`` command line.

Every command writes its artifacts plus ``run_manifest.json`` into
``--out-dir``. Artifacts are a pure function of inputs, flags and seeds; wall
clock times appear only in the manifest. Failures print one JSON object on
stderr and exit with the error class's code.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from . import __version__
from .augment import AugmentationSpec
from .ensemble import argmax_labels, average_probabilities, read_probability_volume, write_probability_volume
from .errors import PetSegError
from .experiments import AblationConfig, run_label_ablation
from .folds import grouped_kfold, holdout_split, load_manifest
from .label_fusion import DEFAULT_SCHEMA, LabelSchema, fuse_labels, validate_label_map
from .metrics import DEFAULT_CONNECTIVITY, DEFAULT_NSD_TOLERANCE_MM, evaluate_case, summarize
from .micronet.checkpoint import save_checkpoint
from .micronet.loss import LossSpec
from .micronet.network import NetConfig, build_network
from .micronet.optim import OptimizerState
from .micronet.synthetic import synthetic_dataset, synthetic_schema
from .micronet.train import TRAIN_DEFAULTS, train
from .preprocess import resample_to_grid
from .volume_io import LabelMap, read_nifti, write_nifti

EXIT_USAGE = 2
EXIT_MISSING_FILE = 11
EXIT_INTERNAL = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_text(path, text: str) -> str:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)
    return path


def _require(path) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return path


class Run:
    """Collects inputs, seeds and artifacts for the run manifest."""

    def __init__(self, args):
        self.args = args
        self.out_dir = args.out_dir
        os.makedirs(self.out_dir, exist_ok=True)
        self.inputs, self.artifacts, self.seeds = [], [], {}
        self.started = time.time()

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def input(self, path) -> str:
        self.inputs.append(_require(path))
        return path

    def artifact(self, path) -> str:
        self.artifacts.append(path)
        return path

    def config(self) -> dict:
        skip = {"func", "out_dir"}
        return {k: v for k, v in sorted(vars(self.args).items()) if k not in skip}

    def write_manifest(self) -> None:
        cfg = self.config()
        blob = json.dumps(cfg, sort_keys=True, default=str).encode()
        manifest = {
            "command": self.args.command,
            "toolkit_version": __version__,
            "config": cfg,
            "config_hash": hashlib.sha256(blob).hexdigest(),
            "seeds": self.seeds,
            "inputs": {p: sha256_file(p) for p in self.inputs},
            "artifacts": {os.path.relpath(p, self.out_dir): sha256_file(p) for p in self.artifacts},
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(self.started)),
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        _write_text(self.path("run_manifest.json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- commands --------------------------------------------------------------------

def cmd_resample(run: Run) -> int:
    a = run.args
    src = read_nifti(run.input(a.src), kind="labels" if a.labels else "auto")
    ref = read_nifti(run.input(a.reference))
    mode = "nearest" if isinstance(src, LabelMap) else a.mode
    out = resample_to_grid(src, ref.geometry, mode=mode, fill=a.fill)
    write_nifti(out, run.artifact(run.path(a.out)))
    return 0


def _schema_for(run: Run, organ_names) -> LabelSchema:
    if run.args.schema:
        with open(run.input(run.args.schema)) as fh:
            return LabelSchema.from_json(fh.read())
    known = DEFAULT_SCHEMA.organ_names
    order = sorted(organ_names, key=lambda n: known.index(n) if n in known else len(known))
    return DEFAULT_SCHEMA.subset(order)


def cmd_fuse(run: Run) -> int:
    a = run.args
    organs = {}
    for spec in a.organ or []:
        name, _, path = spec.partition("=")
        if not path:
            raise UsageError(f"--organ expects NAME=PATH, got {spec!r}")
        organs[name] = read_nifti(run.input(path), kind="labels")
    schema = _schema_for(run, list(organs))
    missing = [n for n in schema.organ_names if n not in organs]
    if missing:
        raise FileNotFoundError(f"no mask given for organ(s) {missing}")
    lesion = read_nifti(run.input(a.lesion), kind="labels")
    fused = fuse_labels(lesion, [organs[n] for n in schema.organ_names], schema=schema)
    write_nifti(fused, run.artifact(run.path(a.out)))
    report = validate_label_map(fused, schema)
    _write_text(run.artifact(run.path("fuse_report.json")), json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_text(run.artifact(run.path("schema.json")), schema.to_json() + "\n")
    return 0


def cmd_split(run: Run) -> int:
    a = run.args
    studies = load_manifest(run.input(a.manifest))
    run.seeds["split"] = a.seed
    if a.holdout is not None:
        hs = holdout_split(studies, a.holdout, a.seed)
        out = {
            "seed": a.seed,
            "target": hs.target,
            "exact": hs.exact,
            "train": [s.study_id for s in hs.train],
            "holdout": [s.study_id for s in hs.holdout],
        }
        if hs.warning:
            print(json.dumps({"warning": hs.warning}), file=sys.stderr)
        _write_text(run.artifact(run.path("holdout.json")), json.dumps(out, indent=2) + "\n")
    else:
        fa = grouped_kfold(studies, a.k, a.seed)
        _write_text(run.artifact(run.path("folds.json")), fa.to_json() + "\n")
    return 0


def _eval_pairs(run: Run):
    a = run.args
    if a.pairs:
        with open(run.input(a.pairs)) as fh:
            return [(p["study_id"], p["pred"], p["gt"]) for p in json.load(fh)]
    if not (a.pred and a.gt):
        raise UsageError("evaluate needs --pred and --gt, or --pairs")
    sid = a.study_id or os.path.basename(a.pred).split(".")[0]
    return [(sid, a.pred, a.gt)]


def cmd_evaluate(run: Run) -> int:
    a = run.args
    schema = _schema_for(run, [])
    rows = []
    for sid, pred, gt in sorted(_eval_pairs(run)):
        p = read_nifti(run.input(pred), kind="labels")
        g = read_nifti(run.input(gt), kind="labels")
        rows.append(evaluate_case(p, g, schema, conn=a.conn, tolerance_mm=a.nsd_tolerance, study_id=sid,
                                  with_nsd=not a.no_nsd))
    run.seeds["bootstrap"] = a.seed
    rep = summarize(rows, a.ci_level, a.n_boot, a.seed)
    csv_text = rep.to_csv()
    _write_text(run.artifact(run.path("metrics.csv")), csv_text)
    _write_text(run.artifact(run.path("metrics.json")), rep.to_json() + "\n")
    sys.stdout.write(csv_text)
    return 0


def cmd_ensemble(run: Run) -> int:
    a = run.args
    members = []
    for prefix in a.inputs:
        run.input(prefix + ".json")
        members.append(read_probability_volume(prefix))
    pv = average_probabilities(members, mode=a.mode)
    out_prefix = run.path(a.out)
    for p in write_probability_volume(pv, out_prefix):
        run.artifact(p)
    run.artifact(out_prefix + ".json")
    write_nifti(argmax_labels(pv), run.artifact(out_prefix + "_labels.nii.gz"))
    return 0


def cmd_train_micro(run: Run) -> int:
    a = run.args
    run.seeds.update({"data": a.seed, "init": a.seed, "shuffle": a.seed})
    schema = synthetic_schema(a.organs) if a.multilabel else LabelSchema(("background", "lesion"))
    data = synthetic_dataset(a.cases, (a.size,) * 3, a.organs, a.lesions, seed=a.seed, multilabel=a.multilabel)
    cfg = NetConfig(in_channels=2, num_classes=schema.n_classes, base_features=a.base_features,
                    num_downsamples=a.downsamples, dtype=a.dtype)
    net = build_network(cfg, a.seed)
    weights = (1.0, a.lesion_weight) + (1.0,) * (schema.n_classes - 2)
    spec = LossSpec(class_weights=weights)
    opt = OptimizerState(learning_rate=a.lr, momentum=a.momentum, poly_decay=a.poly_decay, max_epochs=a.epochs)
    aug = AugmentationSpec() if a.augment else None
    hist = train(net, data, epochs=a.epochs, batch_size=a.batch_size, opt=opt, spec=spec, aug=aug, seed=a.seed)
    save_checkpoint(run.artifact(run.path("model.ckpt")), net, opt, seed=a.seed, epoch=opt.epoch)
    summary = {
        "config": cfg.to_dict(),
        "loss": spec.to_dict(),
        "schema": list(schema.names),
        "n_parameters": net.n_parameters,
        "history": hist.to_dict(),
    }
    _write_text(run.artifact(run.path("history.json")), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0


def _write_ablation(run: Run, cfg: AblationConfig) -> int:
    run.seeds["ablation"] = list(cfg.seeds)
    report = run_label_ablation(cfg, progress=lambda rec: print(json.dumps(rec), file=sys.stderr))
    _write_text(run.artifact(run.path("ablation_report.json")), report.to_json() + "\n")
    _write_text(run.artifact(run.path("ablation_table.csv")), report.to_csv())
    return 0


def cmd_synth_study(run: Run) -> int:
    a = run.args
    cfg = AblationConfig(
        train_sizes=(a.cases,),
        n_test=a.test_cases,
        seeds=tuple(range(a.seeds)),
        size=a.size,
        epochs=a.epochs,
        batch_size=a.batch_size,
        lesion_weight=a.lesion_weight,
    )
    return _write_ablation(run, cfg)


def cmd_ablation(run: Run) -> int:
    with open(run.input(run.args.config)) as fh:
        cfg = AblationConfig.from_dict(json.load(fh))
    return _write_ablation(run, cfg)


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="petseg", description="PET/CT lesion segmentation toolkit")
    p.add_argument("--version", action="version", version=f"petseg {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--out-dir", default=".", help="directory for artifacts and run_manifest.json")
        sp.set_defaults(func=func)
        return sp

    sp = command("resample", cmd_resample, "resample a volume onto a reference grid")
    sp.add_argument("--src", required=True)
    sp.add_argument("--reference", required=True, help="volume whose grid is the target")
    sp.add_argument("--out", default="resampled.nii.gz")
    sp.add_argument("--mode", choices=("trilinear", "nearest"), default="trilinear")
    sp.add_argument("--labels", action="store_true", help="treat --src as a label map (implies nearest)")
    sp.add_argument("--fill", type=float, default=None)

    sp = command("fuse", cmd_fuse, "fuse a lesion mask with organ masks")
    sp.add_argument("--lesion", required=True)
    sp.add_argument("--organ", action="append", metavar="NAME=PATH")
    sp.add_argument("--schema", default=None, help="schema JSON; default: background, lesion, given organs")
    sp.add_argument("--out", default="fused.nii.gz")

    sp = command("split", cmd_split, "subject-grouped K-fold or hold-out split")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--holdout", type=int, default=None, help="hold-out size instead of K folds")

    sp = command("evaluate", cmd_evaluate, "lesion metrics for predictions against ground truth")
    sp.add_argument("--pred")
    sp.add_argument("--gt")
    sp.add_argument("--study-id", default=None)
    sp.add_argument("--pairs", default=None, help='JSON list of {"study_id", "pred", "gt"}')
    sp.add_argument("--schema", default=None)
    sp.add_argument("--conn", type=int, choices=(6, 18, 26), default=DEFAULT_CONNECTIVITY)
    sp.add_argument("--nsd-tolerance", type=float, default=DEFAULT_NSD_TOLERANCE_MM)
    sp.add_argument("--no-nsd", action="store_true")
    sp.add_argument("--ci-level", type=float, default=0.95)
    sp.add_argument("--n-boot", type=int, default=10000)
    sp.add_argument("--seed", type=int, default=0)

    sp = command("ensemble", cmd_ensemble, "average fold probability volumes")
    sp.add_argument("--inputs", nargs="+", required=True, help="probability-volume prefixes")
    sp.add_argument("--out", default="ensemble")
    sp.add_argument("--mode", choices=("mean", "vote"), default="mean")

    sp = command("train-micro", cmd_train_micro, "train the micro UNet on synthetic studies")
    sp.add_argument("--cases", type=int, default=8)
    sp.add_argument("--size", type=int, default=128)
    sp.add_argument("--organs", type=int, default=3)
    sp.add_argument("--lesions", type=int, default=2)
    sp.add_argument("--multilabel", action=argparse.BooleanOptionalAction, default=True)
    sp.add_argument("--base-features", type=int, default=NetConfig.base_features)
    sp.add_argument("--downsamples", type=int, default=NetConfig.num_downsamples)
    sp.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    sp.add_argument("--epochs", type=int, default=TRAIN_DEFAULTS["epochs"])
    sp.add_argument("--batch-size", type=int, default=TRAIN_DEFAULTS["batch_size"])
    sp.add_argument("--lr", type=float, default=TRAIN_DEFAULTS["learning_rate"])
    sp.add_argument("--momentum", type=float, default=TRAIN_DEFAULTS["momentum"])
    sp.add_argument("--poly-decay", action="store_true")
    sp.add_argument("--lesion-weight", type=float, default=1.0)
    sp.add_argument("--augment", action="store_true")
    sp.add_argument("--seed", type=int, default=0)

    ab = AblationConfig()
    sp = command("synth-study", cmd_synth_study, "single-label vs multilabel study on synthetic data")
    sp.add_argument("--cases", type=int, default=ab.train_sizes[0], help="training studies per seed")
    sp.add_argument("--test-cases", type=int, default=ab.n_test)
    sp.add_argument("--seeds", type=int, default=len(ab.seeds), help="seeds 0..N-1")
    sp.add_argument("--size", type=int, default=ab.size)
    sp.add_argument("--epochs", type=int, default=ab.epochs)
    sp.add_argument("--batch-size", type=int, default=ab.batch_size)
    sp.add_argument("--lesion-weight", type=float, default=ab.lesion_weight)

    sp = command("ablation", cmd_ablation, "label ablation from a JSON config")
    sp.add_argument("--config", required=True)
    return p


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail(EXIT_USAGE, "UsageError", str(e))
    try:
        run = Run(args)
        code = args.func(run)
        run.write_manifest()
        return code
    except UsageError as e:
        return _fail(EXIT_USAGE, "UsageError", str(e))
    except FileNotFoundError as e:
        return _fail(EXIT_MISSING_FILE, "MissingFile", str(e.args[0] if e.args else e))
    except PetSegError as e:
        return _fail(e.exit_code, type(e).__name__, str(e))


if __name__ == "__main__":
    sys.exit(main())
