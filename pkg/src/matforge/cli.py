"""Command-line interface.

Every subcommand resolves its configuration as flags > ``--config`` JSON >
defaults, writes the resolved values to ``<out>/run.json`` and puts all
artifacts under ``--out``. A ``run.json`` can be fed back through
``--config`` to repeat a run. Exit codes: 0 success, 1 runtime failure,
2 usage error.
"""

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, MatforgeError

log = logging.getLogger("matforge")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
SUPPRESS = argparse.SUPPRESS


class UsageError(Exception):
    """Flag values that are individually valid but inconsistent."""


# -- defaults per command (every key here is also a flag) --------------------------

TRAIN_DEFAULTS = {
    "data": None,
    "arch": "vanilla",
    "mode": "rgb",
    "fusion": "concat",
    "pretrained": None,
    "name_map": None,
    "freeze": None,           # None -> 5 for branched, 0 otherwise
    "seed": 0,
    "base_lr": 1e-4,
    "lr_decay_factor": 0.1,
    "lr_step": 1000,
    "max_iterations": 450_000,
    "batch_size": 1,
    "eval_every": 0,
    "checkpoint_every": 0,
    "normalize_mean": None,   # None -> on for deep/branched, off for vanilla
    "crop_size": 227,
    "fc_width": 4096,
    "epsilon": 1e-8,
    "init_seed": None,        # None -> seed
}
EVAL_DEFAULTS = {"run": None, "data": None, "split": "test", "checkpoint": "final"}
DECOMPOSE_DEFAULTS = {"inputs": None, "sigma": 12.0, "s_floor": 1e-3}
DATASET_BUILD_DEFAULTS = {"corpus": None, "annotations": None, "seed": 0, "protocol": "gmd",
                          "val_per_cat": 200, "test_per_cat": 100}
DATASET_SYNTH_DEFAULTS = {"per_class": 5, "size": 72, "seed": 0}
LM_PCA_DEFAULTS = {"data": None, "split": "train", "patches_per_image": 1, "seed": 0}
PREDICTIONS_DEFAULTS = {"predictions": None}
ERRORS_DEFAULTS = {"predictions": None, "top": 10}


# -- parser --------------------------------------------------------------------------

def _common(p):
    p.add_argument("--out", required=True, help="output directory (created if needed)")
    p.add_argument("--config", help="JSON file with defaults for any flag of this command")


def build_parser():
    parser = argparse.ArgumentParser(prog="matforge", description="Material-recognition convnet toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network on a dataset manifest", argument_default=SUPPRESS)
    _common(p)
    p.add_argument("--data", help="dataset directory written by `dataset build` or `dataset synth`")
    p.add_argument("--arch", choices=("vanilla", "deep", "branched"))
    p.add_argument("--mode", choices=("rgb", "reflectance", "shading", "branched"))
    p.add_argument("--fusion", choices=("concat", "sum"))
    p.add_argument("--pretrained", help="weights directory with reference filter stages")
    p.add_argument("--name-map", dest="name_map", help="JSON list of [source, target] pairs")
    p.add_argument("--freeze", type=int, help="freeze filter stages 1..K")
    p.add_argument("--seed", type=int)
    p.add_argument("--init-seed", dest="init_seed", type=int, help="weight-init seed (default: --seed)")
    p.add_argument("--base-lr", dest="base_lr", type=float)
    p.add_argument("--lr-decay-factor", dest="lr_decay_factor", type=float)
    p.add_argument("--lr-step", dest="lr_step", type=int)
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--normalize-mean", dest="normalize_mean", action=argparse.BooleanOptionalAction)
    p.add_argument("--crop-size", dest="crop_size", type=int)
    p.add_argument("--fc-width", dest="fc_width", type=int)
    p.add_argument("--epsilon", type=float)
    p.set_defaults(handler=cmd_train, defaults=TRAIN_DEFAULTS)

    p = sub.add_parser("eval", help="evaluate a trained run on one split", argument_default=SUPPRESS)
    _common(p)
    p.add_argument("--run", help="output directory of a `train` run")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--checkpoint", help="checkpoint name under <run>/checkpoints (default: final)")
    p.set_defaults(handler=cmd_eval, defaults=EVAL_DEFAULTS)

    p = sub.add_parser("decompose", help="split images into shading and reflectance",
                       argument_default=SUPPRESS)
    _common(p)
    p.add_argument("--in", dest="inputs", nargs="+", help="input image file(s)")
    p.add_argument("--sigma", type=float)
    p.add_argument("--s-floor", dest="s_floor", type=float)
    p.set_defaults(handler=cmd_decompose, defaults=DECOMPOSE_DEFAULTS)

    p = sub.add_parser("dataset", help="dataset construction")
    dsub = p.add_subparsers(dest="dataset_command", required=True)
    q = dsub.add_parser("build", help="ingest a raw corpus and split it", argument_default=SUPPRESS)
    _common(q)
    q.add_argument("--corpus")
    q.add_argument("--annotations")
    q.add_argument("--seed", type=int)
    q.add_argument("--protocol", choices=("gmd", "fmd", "none"))
    q.add_argument("--val-per-cat", dest="val_per_cat", type=int)
    q.add_argument("--test-per-cat", dest="test_per_cat", type=int)
    q.set_defaults(handler=cmd_dataset_build, defaults=DATASET_BUILD_DEFAULTS)
    q = dsub.add_parser("synth", help="write a small synthetic 10-class dataset", argument_default=SUPPRESS)
    _common(q)
    q.add_argument("--per-class", dest="per_class", type=int)
    q.add_argument("--size", type=int)
    q.add_argument("--seed", type=int)
    q.set_defaults(handler=cmd_dataset_synth, defaults=DATASET_SYNTH_DEFAULTS)

    p = sub.add_parser("analyze", help="dataset and classifier diagnostics")
    asub = p.add_subparsers(dest="analyze_command", required=True)
    q = asub.add_parser("lm-pca", help="LM-filter features of random patches, projected to 2-D",
                        argument_default=SUPPRESS)
    _common(q)
    q.add_argument("--data")
    q.add_argument("--split", choices=("train", "val", "test", "all"))
    q.add_argument("--patches-per-image", dest="patches_per_image", type=int)
    q.add_argument("--seed", type=int)
    q.set_defaults(handler=cmd_lm_pca, defaults=LM_PCA_DEFAULTS)
    for name, handler, defaults, text in (
            ("confusion", cmd_confusion, PREDICTIONS_DEFAULTS, "row-stochastic confusion matrix"),
            ("confidence", cmd_confidence, PREDICTIONS_DEFAULTS, "per-category confidence statistics"),
            ("errors", cmd_errors, ERRORS_DEFAULTS, "highest-confidence misclassifications")):
        q = asub.add_parser(name, help=text, argument_default=SUPPRESS)
        _common(q)
        q.add_argument("--predictions", help="predictions.csv written by `eval`")
        if name == "errors":
            q.add_argument("--top", type=int)
        q.set_defaults(handler=handler, defaults=defaults)
    return parser


# -- config resolution ---------------------------------------------------------------

def _load_config_file(path, command=None):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    if isinstance(doc, dict) and isinstance(doc.get("config"), dict):
        if command is not None and doc.get("command") not in (None, command):
            raise UsageError(f"{path} records a {doc['command']!r} run, not {command!r}")
        doc = doc["config"]  # a run.json
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


def resolve_config(args):
    """Merge defaults, the optional config file and explicit flags (in rising priority)."""
    defaults = args.defaults
    cfg = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = _load_config_file(args.config, _COMMAND_NAMES.get(args.handler))
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise UsageError(f"unknown key(s) in {args.config}: {', '.join(unknown)}")
        cfg.update(file_cfg)
    for key in defaults:
        if hasattr(args, key):
            cfg[key] = getattr(args, key)
    missing = [k for k, v in cfg.items() if v is None and k in _REQUIRED.get(args.handler, ())]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return cfg


def _abspath(p):
    return None if p is None else str(Path(p).resolve())


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_run_json(out, command, cfg):
    """The reproducibility record: command name plus every resolved setting."""
    _write_json(Path(out) / "run.json", {"command": command, "config": cfg, "version": __version__})


# -- train / eval --------------------------------------------------------------------

def _resolve_train(cfg):
    arch = cfg["arch"]
    if arch == "branched":
        if cfg["mode"] not in ("rgb", "branched"):
            raise UsageError("--arch branched consumes both reflectance and shading; drop --mode")
        cfg["mode"] = "branched"
    elif cfg["mode"] == "branched":
        raise UsageError("--mode branched needs --arch branched")
    if cfg["freeze"] is None:
        cfg["freeze"] = 5 if arch == "branched" else 0
    if cfg["normalize_mean"] is None:
        cfg["normalize_mean"] = arch != "vanilla"
    if cfg["init_seed"] is None:
        cfg["init_seed"] = cfg["seed"]
    if cfg["pretrained"] and arch == "vanilla":
        raise UsageError("--pretrained applies to the deep and branched nets only")
    for key in ("data", "pretrained", "name_map"):
        cfg[key] = _abspath(cfg[key])
    return cfg


def _build_spec(cfg):
    from .architectures import build_branched, build_deep, build_vanilla

    size, width = cfg["crop_size"], cfg["fc_width"]
    if cfg["arch"] == "vanilla":
        return build_vanilla(size, fc_width=width)
    if cfg["arch"] == "deep":
        return build_deep(input_size=size, fc_width=width)
    return build_branched(cfg["fusion"], input_size=size, fc_width=width)


def cmd_train(cfg, out):
    from .architectures import freeze_stages
    from .dataset import load_manifest
    from .network import Network
    from .optim import TrainingConfig, train
    from .weights_io import filter_stage_name_map, load_pretrained, save_weights

    cfg = _resolve_train(cfg)
    try:
        spec = _build_spec(cfg)
        mask = freeze_stages(spec, cfg["freeze"])
        tcfg = TrainingConfig(
            base_lr=cfg["base_lr"], lr_decay_factor=cfg["lr_decay_factor"], lr_step=cfg["lr_step"],
            max_iterations=cfg["max_iterations"], batch_size=cfg["batch_size"], seed=cfg["seed"],
            eval_every=cfg["eval_every"], checkpoint_every=cfg["checkpoint_every"], freeze_k=cfg["freeze"],
            input_mode=cfg["mode"], normalize_mean=cfg["normalize_mean"], crop_size=cfg["crop_size"],
            epsilon=cfg["epsilon"])
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    write_run_json(out, "train", cfg)

    manifest = load_manifest(cfg["data"])
    net = Network(spec, seed=cfg["init_seed"])
    if cfg["pretrained"]:
        if cfg["name_map"]:
            pairs = [tuple(p) for p in json.loads(Path(cfg["name_map"]).read_text(encoding="utf-8"))]
        else:
            pairs = filter_stage_name_map(net)
        load_pretrained(cfg["pretrained"], pairs, net, head_reinit=True, seed=cfg["init_seed"])

    (out / "network.json").write_text(spec.to_json() + "\n", encoding="utf-8")
    val = manifest.samples("val") if cfg["eval_every"] else None
    result = train(net, mask, manifest.samples("train"), tcfg, val_samples=val or None,
                   log_path=out / "train_log.csv", checkpoint_dir=out / "checkpoints")
    if result.mean is not None:
        save_weights({"mean_image": result.mean}, out / "mean_image")
    losses = result.log.losses
    print(f"trained {len(losses)} iterations; final loss {losses[-1]:.6g}" if len(losses) else "no iterations run")
    return EXIT_OK


def _load_run(run_dir, checkpoint):
    from .architectures import NetworkSpec
    from .network import Network
    from .weights_io import load_weights

    run_dir = Path(run_dir)
    try:
        run = json.loads((run_dir / "run.json").read_text(encoding="utf-8"))["config"]
        spec = NetworkSpec.from_json((run_dir / "network.json").read_text(encoding="utf-8"))
    except (OSError, ValueError, KeyError) as exc:
        raise FileNotFoundError(f"{run_dir} is not a complete train run: {exc}") from exc
    ckpt = run_dir / "checkpoints" / checkpoint
    if not (ckpt / "manifest.json").is_file():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    net = Network(spec)
    net.load_parameters(load_weights(ckpt))
    mean = load_weights(run_dir / "mean_image")["mean_image"] if (run_dir / "mean_image").is_dir() else None
    return run, net, mean


def cmd_eval(cfg, out):
    from .analysis import write_confusion_csv, write_predictions_csv
    from .dataset import CATEGORIES, load_manifest
    from .optim import evaluate

    cfg["run"] = _abspath(cfg["run"])
    run, net, mean = _load_run(cfg["run"], cfg["checkpoint"])
    cfg["data"] = _abspath(cfg["data"] or run["data"])
    write_run_json(out, "eval", cfg)
    samples = load_manifest(cfg["data"]).samples(cfg["split"])
    if not samples:
        raise UsageError(f"split {cfg['split']!r} of {cfg['data']} is empty")
    res = evaluate(net, samples, mean=mean, input_mode=run["mode"])
    write_predictions_csv(res.records, out / "predictions.csv")
    write_confusion_csv(res.confusion, out / "confusion.csv")
    per_cat = {c: (None if np.isnan(a) else float(a)) for c, a in zip(CATEGORIES, res.per_category_accuracy)}
    _write_json(out / "metrics.json", {"split": cfg["split"], "overall_accuracy": res.overall_accuracy,
                                       "per_category_accuracy": per_cat, "n": len(res.records),
                                       "skipped": res.skipped})
    print(f"overall accuracy ({cfg['split']}, n={len(res.records)}): {res.overall_accuracy:.4f}")
    for c, a in per_cat.items():
        print(f"  {c:<8} {'-' if a is None else f'{a:.4f}'}")
    return EXIT_OK


# -- decompose / dataset -------------------------------------------------------------

def cmd_decompose(cfg, out):
    from .dataset import read_image, write_png
    from .intrinsics import decompose, reconstruction_error

    cfg["inputs"] = [_abspath(p) for p in cfg["inputs"]]
    write_run_json(out, "decompose", cfg)
    names = [Path(p).stem for p in cfg["inputs"]]
    if len(set(names)) != len(names):
        raise UsageError("input files must have distinct names")
    for path, name in zip(cfg["inputs"], names):
        img = read_image(path).astype(np.float64)
        pair = decompose(img, cfg["sigma"], cfg["s_floor"])
        err = reconstruction_error(img, pair, cfg["s_floor"])
        write_png(out / f"{name}.shading.png", pair.shading)
        # reflectance can exceed 1; the PNG is a clipped preview
        write_png(out / f"{name}.reflectance.png", np.clip(pair.reflectance, 0, 1))
        _write_json(out / f"{name}.json", {
            "source": path, "sigma": cfg["sigma"], "s_floor": cfg["s_floor"],
            "max_reconstruction_error": err,
            "reflectance_max": float(pair.reflectance.max()),
            "floored_pixels": int((pair.shading <= cfg["s_floor"]).sum())})
        print(f"{name}: max reconstruction error {err:.3g}")
    return EXIT_OK


def cmd_dataset_build(cfg, out):
    from .dataset import fmd_split, ingest, save_manifest, split

    for key in ("corpus", "annotations"):
        cfg[key] = _abspath(cfg[key])
    write_run_json(out, "dataset build", cfg)
    manifest, rejected = ingest(cfg["corpus"], cfg["annotations"], out)
    if cfg["protocol"] == "gmd":
        manifest = split(manifest, cfg["seed"], cfg["val_per_cat"], cfg["test_per_cat"])
    elif cfg["protocol"] == "fmd":
        manifest = fmd_split(manifest, cfg["seed"], cfg["test_per_cat"])
    save_manifest(manifest, out)
    reasons = {}
    for _, reason in rejected:
        reasons[reason] = reasons.get(reason, 0) + 1
    _write_json(out / "report.json", {
        "accepted": len(manifest.records), "rejected": len(rejected),
        "rejected_by_reason": reasons, "rejected_files": [{"file": f, "reason": r} for f, r in rejected]})
    print(f"accepted {len(manifest.records)}, rejected {len(rejected)}")
    for reason, n in sorted(reasons.items()):
        print(f"  {reason}: {n}")
    return EXIT_OK


def cmd_dataset_synth(cfg, out):
    from .synthetic import write_toy_dataset

    write_run_json(out, "dataset synth", cfg)
    manifest = write_toy_dataset(out, cfg["per_class"], cfg["size"], cfg["seed"])
    print(f"wrote {len(manifest.records)} synthetic images")
    return EXIT_OK


# -- analyze -------------------------------------------------------------------------

def cmd_lm_pca(cfg, out):
    from .analysis import lm_pca, write_pca_csv
    from .dataset import CATEGORIES, load_manifest

    cfg["data"] = _abspath(cfg["data"])
    write_run_json(out, "analyze lm-pca", cfg)
    manifest = load_manifest(cfg["data"])
    samples = ([s for sp in ("train", "val", "test") for s in manifest.samples(sp)]
               if cfg["split"] == "all" else manifest.samples(cfg["split"]))
    images = [s.load() for s in samples]
    labels = [CATEGORIES[s.label] for s in samples]
    model, points, point_labels = lm_pca(images, labels, cfg["patches_per_image"], cfg["seed"])
    write_pca_csv(points, point_labels, out / "pca.csv")
    _write_json(out / "pca_model.json", {"mean": model.mean.tolist(), "components": model.components.tolist(),
                                         "explained_variance": model.explained_variance.tolist()})
    print(f"projected {len(points)} patches; explained variance {model.explained_variance.tolist()}")
    return EXIT_OK


def _records(cfg):
    from .analysis import read_predictions_csv

    cfg["predictions"] = _abspath(cfg["predictions"])
    try:
        records = read_predictions_csv(cfg["predictions"])
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{cfg['predictions']} is not a predictions CSV: {exc}") from exc
    if not records:
        raise UsageError(f"{cfg['predictions']} holds no predictions")
    return records


def cmd_confusion(cfg, out):
    from .analysis import confusion, write_confusion_csv

    records = _records(cfg)
    write_run_json(out, "analyze confusion", cfg)
    cm = confusion(records)
    write_confusion_csv(cm, out / "confusion.csv")
    print(f"overall accuracy {cm.overall_accuracy:.4f} over {len(records)} predictions")
    return EXIT_OK


def cmd_confidence(cfg, out):
    from .analysis import confidence_stats, write_confidence_csv

    records = _records(cfg)
    write_run_json(out, "analyze confidence", cfg)
    write_confidence_csv(confidence_stats(records), out / "confidence.csv")
    return EXIT_OK


def cmd_errors(cfg, out):
    from .analysis import top_misclassifications, write_errors_csv
    from .dataset import CATEGORIES

    if cfg["top"] < 0:
        raise UsageError("--top must be >= 0")
    records = _records(cfg)
    write_run_json(out, "analyze errors", cfg)
    top = top_misclassifications(records, cfg["top"])
    write_errors_csv(top, out / "errors.csv")
    for r in top:
        print(f"{r.sample_id}: true {CATEGORIES[r.true]} predicted {CATEGORIES[r.pred]} "
              f"confidence {r.confidence:.4f}")
    return EXIT_OK


_COMMAND_NAMES = {
    cmd_train: "train",
    cmd_eval: "eval",
    cmd_decompose: "decompose",
    cmd_dataset_build: "dataset build",
    cmd_dataset_synth: "dataset synth",
    cmd_lm_pca: "analyze lm-pca",
    cmd_confusion: "analyze confusion",
    cmd_confidence: "analyze confidence",
    cmd_errors: "analyze errors",
}

_REQUIRED = {
    cmd_train: ("data",),
    cmd_eval: ("run",),
    cmd_decompose: ("inputs",),
    cmd_dataset_build: ("corpus", "annotations"),
    cmd_lm_pca: ("data",),
    cmd_confusion: ("predictions",),
    cmd_confidence: ("predictions",),
    cmd_errors: ("predictions",),
}


# -- entry point -----------------------------------------------------------------------

def _thread_limit():
    value = os.environ.get("MATFORGE_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"MATFORGE_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with _thread_limit():
            return args.handler(cfg, out)
    except UsageError as exc:
        print(f"matforge: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MatforgeError, OSError, ValueError) as exc:
        print(f"matforge: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
