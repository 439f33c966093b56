"""Command line entry point: ``ontobn <command> [options]``.

Every command writes ``manifest.json`` into ``--out-dir`` (default
``$ONTOBN_OUT_DIR`` or ``./ontobn-out``) recording the resolved
configuration, seed, input digests and produced artifacts.

Exit codes: 0 success, 2 usage error, 3 parse error, 4 validation
error, 5 divergence during training, 1 anything else.
"""
import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import fields
from importlib import metadata

from . import evaluation, featurize, model as model_mod, ontology, training as train_mod
from .errors import (CycleError, DivergenceError, ParseError, UnknownFeatureError,
                     UnknownLabelError, ValidationError)

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_PARSE, EXIT_VALIDATION, EXIT_DIVERGENCE = 0, 1, 2, 3, 4, 5

logger = logging.getLogger("ontobn")


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        from . import __version__
        return __version__


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects manifest fields while a command runs."""

    def __init__(self, args):
        self.args = args
        self.out_dir = args.out_dir
        os.makedirs(self.out_dir, exist_ok=True)
        self.started = time.time()
        self.inputs = {}
        self.artifacts = {}
        self.config = {}

    def input(self, path):
        if path is not None:
            self.inputs[path] = _digest(path)
        return path

    def artifact(self, name, filename):
        path = os.path.join(self.out_dir, filename)
        self.artifacts[name] = path
        return path

    def write_manifest(self):
        manifest = {
            "command": self.args.command,
            "argv": sys.argv[1:] if self.args.argv is None else self.args.argv,
            "config": self.config,
            "seeds": {"seed": self.args.seed},
            "deterministic": self.args.deterministic,
            "inputs": self.inputs,
            "artifacts": self.artifacts,
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(self.started)),
            "wall_clock_seconds": round(time.time() - self.started, 3),
            "version": _version(),
        }
        with open(os.path.join(self.out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return manifest


def _load_ont(run, args):
    if args.ontology is None:
        raise ValidationError("--ontology is required")
    return ontology.load_ontology(run.input(args.ontology), args.format, strict=args.strict)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- commands ----------------------------------------------------------------

def cmd_inspect_ontology(args, run):
    ont = _load_ont(run, args)
    diag = ontology.assumption_diagnostic(ont)
    stats = {
        "nodes": len(ont.nodes),
        "edges": len(ont.edges),
        "roots": len(ont.roots()),
        "leaves": len(ont.leaves()),
        "depth_histogram": {str(k): v for k, v in ont.depth_histogram().items()},
        "is_tree": diag.is_tree,
        "multi_parent_labels": diag.multi_parent_labels,
    }
    _write_json(run.artifact("stats", "ontology_stats.json"), stats)
    run.config = {"format": args.format, "strict": args.strict}
    print(json.dumps(stats, indent=1, sort_keys=True))


SYNTH_FLAGS = ("feature_dim", "features_per_instance", "true_embedding_scale", "instance_count",
               "bias_low", "bias_high")


def cmd_generate(args, run):
    ont = _load_ont(run, args)
    values = featurize.load_config(run.input(args.config)) if args.config else {}
    for name in SYNTH_FLAGS:
        if getattr(args, name) is not None:
            values[name] = getattr(args, name)
    values["seed"] = args.seed
    spec = featurize.SynthSpec.from_mapping(ont, values)
    instances, truth = featurize.synth_generate(spec)
    truth.save(run.artifact("true_model", "true_model.json"))
    run.config = {**spec.to_mapping(), "splits": args.splits}
    if args.splits:
        fracs = [float(x) for x in args.splits.split(",")]
        if len(fracs) != 3 or any(f < 0 for f in fracs) or abs(sum(fracs) - 1) > 1e-9:
            raise ValidationError("--splits needs three non-negative fractions summing to 1")
        n = len(instances)
        cut1 = int(round(fracs[0] * n))
        cut2 = cut1 + int(round(fracs[1] * n))
        parts = {"train": instances[:cut1], "valid": instances[cut1:cut2], "test": instances[cut2:]}
        for name, part in parts.items():
            featurize.write_dataset(part, run.artifact(name, f"{name}.jsonl"))
    else:
        featurize.write_dataset(instances, run.artifact("dataset", "dataset.jsonl"))
    print(f"wrote {len(instances)} instances to {run.out_dir}")


TRAIN_FLAGS = {f.name for f in fields(train_mod.TrainConfig)} - {"seed"}


def _train_config(args, run):
    values = featurize.load_config(run.input(args.config)) if args.config else {}
    for name in TRAIN_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    values["seed"] = args.seed
    return train_mod.TrainConfig.from_mapping(values)


def _datasets(args, run, ont):
    tr = featurize.read_dataset(run.input(args.train), ont)
    va = featurize.read_dataset(run.input(args.valid), ont)
    ld = featurize.build_label_dictionary([i.labels for i in tr], ont, args.min_count, closure=True)
    if not ld.targets:
        raise ValidationError(f"no label reaches min_count={args.min_count} in the training data")
    return tr, va, ld


def _write_training(run, result, ld):
    model_mod.save_checkpoint(result.model, run.artifact("checkpoint", "checkpoint.bin"))
    ld.save(run.artifact("label_dict", "label_dict.json"))
    with open(run.artifact("log", "train_log.jsonl"), "w", encoding="utf-8") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def cmd_train(args, run):
    ont = _load_ont(run, args)
    config = _train_config(args, run)
    tr, va, ld = _datasets(args, run, ont)
    run.config = {**config.to_mapping(), "min_count": args.min_count, "format": args.format}
    result = train_mod.train(config, tr, va, ld, ont)
    _write_training(run, result, ld)
    print(f"best epoch {result.best_epoch}, validation micro-AP {result.best_valid_ap:.6f}")


def cmd_grid_search(args, run):
    ont = _load_ont(run, args)
    base = _train_config(args, run)
    with open(run.input(args.space), encoding="utf-8") as fh:
        space = json.load(fh)
    tr, va, ld = _datasets(args, run, ont)
    run.config = {"base": base.to_mapping(), "space": space, "min_count": args.min_count,
                  "format": args.format}
    result = train_mod.grid_search(space, tr, va, ld, ont, base=base)
    _write_json(run.artifact("leaderboard", "leaderboard.json"), result.leaderboard)
    _write_training(run, result.best_result, ld)
    print(f"best validation micro-AP {result.best_result.best_valid_ap:.6f} "
          f"with {json.dumps(result.best_config.to_mapping(), sort_keys=True)}")


def cmd_evaluate(args, run):
    if (args.checkpoint is None) == (args.true_model is None):
        raise ValidationError("give exactly one of --checkpoint and --true-model")
    ld = featurize.LabelDict.load(run.input(args.train_counts))
    if args.checkpoint:
        ont = _load_ont(run, args) if args.ontology else None
        m = model_mod.load_checkpoint(run.input(args.checkpoint))
        if m.mode == "bayesian" and ont is None:
            raise ValidationError("--ontology is required for a bayesian checkpoint")
        test = featurize.read_dataset(run.input(args.test), ont)
        targets = m.targets
        scores = model_mod.predict_proba(m, test, ont, ignore_unknown=args.ignore_unknown_features)
        name = args.model_name or m.mode
    else:
        truth = featurize.TrueModel.load(run.input(args.true_model))
        test = featurize.read_dataset(run.input(args.test), truth.ontology)
        targets = ld.targets
        scores = truth.marginals(test, targets)
        name = args.model_name or "true_model"
    truths = train_mod.label_matrix(targets, test, dtype=bool)
    sm = evaluation.ScoreMatrix([i.id for i in test], targets, scores, truths)
    report = evaluation.evaluate(sm, ld.positive_counts, model=name,
                                 n_resamples=args.n_resamples, seed=args.seed)
    run.config = {"n_resamples": args.n_resamples, "model_name": name,
                  "ignore_unknown_features": args.ignore_unknown_features}
    path = run.artifact("report", "report.json")
    _, csv_path = evaluation.emit_report(report, path)
    run.artifacts["report_csv"] = csv_path
    for b in report.bins:
        print(f"{b.name:>9}  n={b.n_labels:<4d} auroc={_f(b.mean_auroc)} ap={_f(b.mean_ap)}")
    print(f"micro auroc={report.micro['auroc']:.4f} ap={report.micro['ap']:.4f}")


def _f(x):
    return "  NA  " if x is None else f"{x:.4f}"


def cmd_predict(args, run):
    m = model_mod.load_checkpoint(run.input(args.checkpoint))
    ont = _load_ont(run, args) if args.ontology else None
    if m.mode == "bayesian" and ont is None:
        raise ValidationError("--ontology is required for a bayesian checkpoint")
    instances = featurize.read_dataset(run.input(args.instances))
    ld = featurize.LabelDict(m.targets, m.labels)
    run.config = {"top_k": args.top_k, "ignore_unknown_features": args.ignore_unknown_features}
    with open(run.artifact("predictions", "predictions.jsonl"), "w", encoding="utf-8") as fh:
        for inst in instances:
            x = model_mod.encode(m, inst, ignore_unknown=args.ignore_unknown_features)
            probs = model_mod.predict_all(m, x, ld, ont)
            ranked = sorted(probs.items(), key=lambda kv: (-kv[1], kv[0]))
            if args.top_k:
                ranked = ranked[:args.top_k]
            fh.write(json.dumps({"id": inst.id, "predictions": [[l, p] for l, p in ranked]}) + "\n")
    print(f"wrote predictions for {len(instances)} instances")


# -- argument parsing ----------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--ontology", help="ontology file")
    common.add_argument("--format", choices=("edges", "obo"), default="edges")
    common.add_argument("--strict", action="store_true", help="reject dangling OBO is_a targets")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=os.environ.get("ONTOBN_OUT_DIR", "ontobn-out"))
    common.add_argument("--deterministic", action="store_true",
                        help="serial reduction everywhere (the only mode currently implemented)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ontobn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("inspect-ontology", parents=[common], help="graph statistics and tree check")

    gen = sub.add_parser("generate", parents=[common], help="sample a synthetic dataset")
    gen.add_argument("--config", help="synth spec file (JSON or key=value)")
    gen.add_argument("--feature-dim", type=int)
    gen.add_argument("--features-per-instance", type=int)
    gen.add_argument("--true-embedding-scale", type=float)
    gen.add_argument("--instance-count", type=int)
    gen.add_argument("--bias-low", type=float)
    gen.add_argument("--bias-high", type=float)
    gen.add_argument("--splits", help="train,valid,test fractions, e.g. 0.5,0.1,0.4")

    def training_flags(p):
        p.add_argument("--train", required=True)
        p.add_argument("--valid", required=True)
        p.add_argument("--config", help="train config file (JSON or key=value)")
        p.add_argument("--min-count", type=int, default=5)
        p.add_argument("--mode", choices=("flat", "bayesian"))
        p.add_argument("--learning-rate", type=float)
        p.add_argument("--embedding-size", type=int)
        p.add_argument("--n-additional-layers", type=int)
        p.add_argument("--layer-size", type=int)
        p.add_argument("--activation", choices=("identity", "relu"))
        p.add_argument("--shared-weights", choices=("true", "false"))
        p.add_argument("--label-weighting", choices=("none", "inv_sqrt_freq"))
        p.add_argument("--batch-size", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--patience", type=int)

    training_flags(sub.add_parser("train", parents=[common], help="train one model"))
    grid = sub.add_parser("grid-search", parents=[common], help="train a grid of configurations")
    training_flags(grid)
    grid.add_argument("--space", required=True, help="JSON file mapping config fields to value lists")

    ev = sub.add_parser("evaluate", parents=[common], help="binned per-label metrics with bootstrap CIs")
    ev.add_argument("--checkpoint")
    ev.add_argument("--true-model", help="score with synthetic ground truth instead of a checkpoint")
    ev.add_argument("--test", required=True)
    ev.add_argument("--train-counts", required=True, help="label_dict.json written by train")
    ev.add_argument("--n-resamples", type=int, default=500)
    ev.add_argument("--model-name")
    ev.add_argument("--ignore-unknown-features", action="store_true")

    pr = sub.add_parser("predict", parents=[common], help="ranked label probabilities")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--instances", required=True)
    pr.add_argument("--top-k", type=int, default=0, help="0 keeps every target")
    pr.add_argument("--ignore-unknown-features", action="store_true")
    return parser


COMMANDS = {
    "inspect-ontology": cmd_inspect_ontology,
    "generate": cmd_generate,
    "train": cmd_train,
    "grid-search": cmd_grid_search,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = None if argv is None else list(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args)
        COMMANDS[args.command](args, run)
        run.write_manifest()
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ValidationError, CycleError, UnknownLabelError, UnknownFeatureError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
