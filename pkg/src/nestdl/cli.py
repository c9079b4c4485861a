"""Command-line entry point: train, infer, synth, score, eval, export."""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from importlib import metadata as importlib_metadata
from pathlib import Path

import numpy as np

from . import dataio, engine, evaluation, synthetic
from .tree import node_distribution
from .core import Corpus, Hyperparams, InvariantError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULT_CONFIG = {
    "corpus": {
        "kind": "matrix",          # matrix | images | alphabet
        "path": "",
        "units": "patches",        # patches | counts
        "annotations": "",
        "min_count": "8",
        "patch_height": "15",
        "patch_width": "15",
        "channels": "1",
        "patches_per_image": "50",  # or "grid" for non-overlapping tiles
        "images": "100",
        "draws": "1000",
        "seed": "0",
    },
    "run": {
        "sweeps": "250",
        "burn_in": "150",
        "stride": "1",
        "seed": "0",
        "branching": "4,2,2,2",
        "max_depth": "8",
        "warmup": "0",
        "dict_init": "prior",
        "flat": "false",
        "K": "400",
        "alpha": "1.0",
        "gamma": "1.0",
        "eta": "1.0",
        "resample_concentrations": "false",
    },
    "output": {
        "dir": "run",
    },
}


class UsageError(Exception):
    pass


def version() -> str:
    try:
        return importlib_metadata.version("artifact")
    except importlib_metadata.PackageNotFoundError:
        return "0+unknown"


def load_config(path: str | None, overrides=()) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser()
    cfg.optionxform = str
    cfg.read_dict(DEFAULT_CONFIG)
    if path is not None:
        if not Path(path).is_file():
            raise UsageError(f"config file {path} not found")
        try:
            cfg.read(path)
        except configparser.Error as exc:
            raise UsageError(f"config file {path}: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"override {item!r} must look like section.key=value")
        if not cfg.has_section(section):
            cfg.add_section(section)
        cfg.set(section, option, value)
    return cfg


def config_text(cfg: configparser.ConfigParser) -> str:
    return "\n".join(f"{s}.{k}={v}" for s in sorted(cfg.sections()) for k, v in sorted(cfg.items(s)))


def metadata_block(command: str, seed: int, cfg: configparser.ConfigParser | None = None, **extra) -> dict:
    text = "" if cfg is None else config_text(cfg)
    out = {
        "command": command,
        "version": version(),
        "seed": seed,
        "config_hash": hashlib.sha256(text.encode()).hexdigest(),
    }
    if cfg is not None:
        out["config"] = {s: dict(cfg.items(s)) for s in cfg.sections()}
    out.update(extra)
    return out


def _write_metadata(out_dir: Path, meta: dict) -> None:
    (out_dir / "metadata.json").write_text(json.dumps(meta, indent=1) + "\n")
    print(json.dumps({k: v for k, v in meta.items() if k != "config"}))


def _bool(cfg, section, key) -> bool:
    try:
        return cfg.getboolean(section, key)
    except ValueError:
        raise UsageError(f"{section}.{key} must be true or false") from None


def _int(cfg, section, key) -> int:
    try:
        return cfg.getint(section, key)
    except ValueError:
        raise UsageError(f"{section}.{key} must be an integer") from None


def _float(cfg, section, key) -> float:
    try:
        return cfg.getfloat(section, key)
    except ValueError:
        raise UsageError(f"{section}.{key} must be a number") from None


def run_config(cfg: configparser.ConfigParser) -> engine.RunConfig:
    try:
        branching = tuple(int(b) for b in cfg.get("run", "branching").split(",") if b.strip())
    except ValueError:
        raise UsageError("run.branching must be comma-separated integers") from None
    hyper = Hyperparams(K=_int(cfg, "run", "K"), alpha=_float(cfg, "run", "alpha"), gamma=_float(cfg, "run", "gamma"),
                        eta=_float(cfg, "run", "eta"),
                        resample_concentrations=_bool(cfg, "run", "resample_concentrations"))
    try:
        return engine.RunConfig(total_sweeps=_int(cfg, "run", "sweeps"), burn_in=_int(cfg, "run", "burn_in"),
                                stride=_int(cfg, "run", "stride"), seed=_int(cfg, "run", "seed"),
                                branching=branching, max_depth=_int(cfg, "run", "max_depth"),
                                warmup=_int(cfg, "run", "warmup"), dict_init=cfg.get("run", "dict_init"),
                                flat=_bool(cfg, "run", "flat"), hyper=hyper)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _attach_words(corpus: Corpus, path: str, min_count: int) -> Corpus:
    if not Path(path).is_file():
        raise UsageError(f"annotation file {path} not found")
    vocab, counts = dataio.load_annotations(path, min_count)
    if counts.shape[0] != corpus.M:
        raise ValueError(f"annotation file lists {counts.shape[0]} images, corpus has {corpus.M}")
    return Corpus(corpus.patches, counts, vocab, corpus.trials)


def load_corpus(cfg: configparser.ConfigParser) -> Corpus:
    sec = "corpus"
    kind = cfg.get(sec, "kind")
    counts = cfg.get(sec, "units") == "counts"
    if kind == "alphabet":
        corpus, _ = synthetic.generate_alphabet_corpus(synthetic.default_truth(), _int(cfg, sec, "images"),
                                                       _int(cfg, sec, "draws"), _int(cfg, sec, "seed"))
    else:
        path = cfg.get(sec, "path")
        if not path:
            raise UsageError("corpus.path is required")
        if kind == "matrix":
            if not Path(path).is_file():
                raise UsageError(f"corpus file {path} not found")
            corpus = dataio.load_feature_matrix(path, counts=counts)
        elif kind == "images":
            root = Path(path)
            files = sorted(root.glob("*.p[gp]m")) if root.is_dir() else [Path(p) for p in path.split(",")]
            missing = [str(f) for f in files if not f.is_file()]
            if not files or missing:
                raise UsageError(f"no readable images under {path}")
            ppi = cfg.get(sec, "patches_per_image")
            spec = dataio.PatchSpec(_int(cfg, sec, "patch_height"), _int(cfg, sec, "patch_width"),
                                    _int(cfg, sec, "channels"), None if ppi == "grid" else int(ppi))
            corpus = dataio.corpus_from_images(files, spec, np.random.Generator(np.random.Philox(_int(cfg, sec, "seed"))))
        else:
            raise UsageError(f"corpus.kind must be matrix, images or alphabet, not {kind!r}")
    ann = cfg.get(sec, "annotations")
    if ann:
        corpus = _attach_words(corpus, ann, _int(cfg, sec, "min_count"))
    return corpus


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.flat:
        overrides.append("run.flat=true")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.sweeps is not None:
        overrides.append(f"run.sweeps={args.sweeps}")
    if args.out is not None:
        overrides.append(f"output.dir={args.out}")
    cfg = load_config(args.config, overrides)
    config = run_config(cfg)
    corpus = load_corpus(cfg)
    out = Path(cfg.get("output", "dir"))
    out.mkdir(parents=True, exist_ok=True)

    def progress(sweep, lj, state):
        if args.verbose:
            print(f"sweep {sweep} log_joint {lj:.3f} nodes {len(state.tree) - 1}", file=sys.stderr)

    trace, best = engine.run(corpus, config, progress=progress)
    dataio.save_checkpoint(best, out / "ml_checkpoint.json")
    trace.write_csv(out / "trace.csv")
    dataio.export_tree(best, "dot", out / "tree.dot")
    meta = metadata_block("train", config.seed, cfg, ml_sweep=trace.ml_sweep,
                          n_nodes=len(best.tree) - 1, n_paths=len(best.tree.leaves()))
    _write_metadata(out, meta)
    return EXIT_OK


def _checkpoint(path: str):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    return dataio.load_checkpoint(path)


def _matrix(path: str, counts: bool) -> Corpus:
    if not Path(path).is_file():
        raise UsageError(f"corpus file {path} not found")
    return dataio.load_feature_matrix(path, counts=counts)


def cmd_infer(args) -> int:
    state = _checkpoint(args.checkpoint)
    corpus = _matrix(args.corpus, state.counts_mode)
    dists = engine.infer_heldout(state, corpus, sweeps=args.sweeps, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps([{str(k): v for k, v in d.items()} for d in dists]) + "\n")
    print(json.dumps(metadata_block("infer", args.seed, checkpoint=args.checkpoint, corpus=args.corpus,
                                    sweeps=args.sweeps)))
    return EXIT_OK


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_synth(args) -> int:
    if args.images < 1 or args.draws < 1:
        raise UsageError("--images and --draws must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "alphabet":
        truth = synthetic.default_truth()
        corpus, info = synthetic.generate_alphabet_corpus(truth, args.images, args.draws, args.seed)
        (out / "truth.json").write_text(json.dumps(truth.to_json(), indent=1) + "\n")
    else:
        model = synthetic.planted_hierarchy(seed=args.seed)
        corpus, info = synthetic.generate_patch_corpus(model, args.images, args.draws, seed=args.seed)
    dataio.save_feature_matrix(corpus, out / "corpus.bin")
    (out / "paths.json").write_text(json.dumps(info["paths"]) + "\n")
    files = sorted(p for p in out.iterdir() if p.name in ("corpus.bin", "truth.json", "paths.json"))
    sums = {p.name: _sha256(p) for p in files}
    for name, digest in sums.items():
        print(f"{digest}  {name}")
    meta = metadata_block("synth", args.seed, kind=args.kind, images=args.images, draws=args.draws, checksums=sums)
    (out / "metadata.json").write_text(json.dumps(meta, indent=1) + "\n")
    return EXIT_OK


def cmd_score(args) -> int:
    state = _checkpoint(args.checkpoint)
    if args.truth:
        if not Path(args.truth).is_file():
            raise UsageError(f"truth file {args.truth} not found")
        truth = synthetic.GroundTruthTree.from_json(json.loads(Path(args.truth).read_text()))
    else:
        truth = synthetic.default_truth()
    if truth.P != state.K:
        raise ValueError(f"truth has {truth.P} symbols, model has {state.K}")
    match, err = synthetic.score_tree_recovery(state, truth)
    print(json.dumps({"topology_match": match, "pi_error": err,
                      "n_nodes": len(state.tree) - 1, "n_paths": len(state.tree.leaves())}))
    return EXIT_OK


def cmd_eval(args) -> int:
    state = _checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluation.EvalReport(metadata=metadata_block("eval", args.seed, knn=args.knn, checkpoint=args.checkpoint))
    if args.corpus:
        corpus = _matrix(args.corpus, state.counts_mode)
        if corpus.P != state.corpus.P:
            raise ValueError(f"corpus has dimension {corpus.P}, checkpoint expects {state.corpus.P}")
    else:
        corpus = state.corpus
    if not state.counts_mode:
        if args.corpus and corpus.X.shape != state.corpus.X.shape:
            raise ValueError("reconstruction is only defined on the training corpus; held-out codes are not stored")
        report.mse_mean, report.mse_std = evaluation.reconstruction_mse(state, corpus)
    if args.labels:
        train_labels = dataio.read_labels(args.labels)
        if len(train_labels) != state.corpus.M:
            raise ValueError(f"{len(train_labels)} labels for {state.corpus.M} training images")
        train = [node_distribution(state, m) for m in range(state.corpus.M)]
        if args.test:
            if not args.test_labels:
                raise UsageError("--test needs --test-labels")
            test_corpus = _matrix(args.test, state.counts_mode)
            truth = dataio.read_labels(args.test_labels)
            if len(truth) != test_corpus.M:
                raise ValueError(f"{len(truth)} test labels for {test_corpus.M} test images")
            test = engine.infer_heldout(state, test_corpus, sweeps=args.sweeps, seed=args.seed)
            pred = evaluation.knn_classify(train, train_labels, test, K=args.knn)
        else:
            # leave-one-out over the training images
            truth, pred = train_labels, []
            for m in range(len(train)):
                rest = train[:m] + train[m + 1:]
                labels = train_labels[:m] + train_labels[m + 1:]
                pred += evaluation.knn_classify(rest, labels, [train[m]], K=args.knn)
        cm = evaluation.confusion(truth, pred, sorted(set(train_labels) | set(truth)))
        report.classes, report.matrix = cm.classes, cm.matrix
        (out / "confusion.csv").write_text(report.confusion_csv())
    (out / "report.csv").write_text(report.summary_csv())
    (out / "report.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_export(args) -> int:
    state = _checkpoint(args.checkpoint)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.format in ("dot", "json"):
        dataio.export_tree(state, args.format, out)
    elif args.format == "dictionary-csv":
        if state.D is None:
            raise ValueError("count-unit models have no dictionary")
        dataio.export_dictionary_csv(state.D, out)
    elif args.format == "atoms-pgm":
        if state.D is None:
            raise ValueError("count-unit models have no dictionary")
        dataio.export_atom_sheet(state.D, out)
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nestdl", description="Tree-structured dictionary learning for image patches.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the sampler and write the ML checkpoint, trace and tree")
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    t.add_argument("--flat", action="store_true", help="depth-1 tree")
    t.add_argument("--seed", type=int)
    t.add_argument("--sweeps", type=int)
    t.add_argument("--out")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="node distributions of held-out images under a frozen model")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--corpus", required=True)
    i.add_argument("--sweeps", type=int, default=50)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", default="heldout.json")
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--kind", choices=("alphabet", "patches"), default="alphabet")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--images", type=int, default=100)
    s.add_argument("--draws", type=int, default=1000, help="draws (alphabet) or patches per image")
    s.add_argument("--out", default="synth")
    s.set_defaults(func=cmd_synth)

    c = sub.add_parser("score", help="compare a recovered tree with the true one")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--truth")
    c.set_defaults(func=cmd_score)

    e = sub.add_parser("eval", help="reconstruction and classification reports")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus")
    e.add_argument("--labels", help="class label per training image")
    e.add_argument("--test", help="held-out corpus to classify")
    e.add_argument("--test-labels")
    e.add_argument("--knn", type=int, default=50)
    e.add_argument("--sweeps", type=int, default=50)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="eval")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="tree or dictionary export")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--format", choices=("dot", "json", "dictionary-csv", "atoms-pgm"), default="dot")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"nestdl {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (engine.SweepError, InvariantError, FloatingPointError) as exc:
        print(f"nestdl {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (dataio.FormatError, dataio.CheckpointError, ValueError, OSError) as exc:
        print(f"nestdl {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
