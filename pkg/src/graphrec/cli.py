"""Command-line entry point: ingest, split, train, evaluate, ablate, sweep, predict, synth.

Settings come from a flat ``key = value`` file (``--config``) with command
line flags taking precedence. Every command prints one JSON document on
stdout and writes its artifacts plus a ``manifest.json`` into the output
directory (``--output-dir``, else ``$GRAPHREC_OUTPUT_DIR``, else ``runs``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import DEFAULT_SIZES, ablation_report, embedding_sweep, evaluate, git_blob_hash, synth_generate
from .graphdata import (
    DataFormatError, RatingGraph, SocialGraph, TooSmallError, export_ratings, export_trust, file_hash, load_ratings,
    load_trust, split, write_split,
)
from .model import VARIANTS, AblationConfig, CheckpointError, load_checkpoint, predict_rating, save_checkpoint
from .training import PURPOSES, DivergenceError, EpochRecord, TrainConfig, derive_seed, eval_view, train

log = logging.getLogger("graphrec")

EXIT_MISSING, EXIT_INVALID, EXIT_CHECKPOINT, EXIT_DIVERGED = 2, 3, 4, 5
OUTPUT_ENV = "GRAPHREC_OUTPUT_DIR"


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    ratings: str | None = None
    trust: str | None = None
    r_max: int = 5
    round_ratings: bool = False
    symmetrize: bool = False
    train_fraction: float = 0.8
    split_seed: int | None = None  # defaults to the root seed
    variant: str = "full"
    clamp: bool = False

    def resolved_split_seed(self, seed: int) -> int:
        return seed if self.split_seed is None else self.split_seed


TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
RUN_KEYS = {f.name: f.type for f in fields(RunConfig)}
ABLATION_KEYS = {f.name for f in fields(AblationConfig)}


# ---------------------------------------------------------------------------
# config handling


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. A JSON run manifest is accepted too."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        manifest = json.loads(text)
        return {k: ("none" if v is None else str(v)) for k, v in manifest.get("config", manifest).items()}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(path, lineno, "expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(key: str, value, kind):
    if not isinstance(value, str):
        return value
    v = value.strip()
    kind = str(kind)
    if v.lower() in ("none", "null", "") and "None" in kind:
        return None
    if "bool" in kind:
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {value!r}")
    try:
        if "int" in kind:
            return int(v)
        if "float" in kind:
            return float(v)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {value!r}") from None
    return v


def build_configs(settings: dict) -> tuple[RunConfig, TrainConfig, AblationConfig]:
    unknown = set(settings) - set(TRAIN_KEYS) - set(RUN_KEYS) - ABLATION_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    run = RunConfig(**{k: _coerce(k, v, RUN_KEYS[k]) for k, v in settings.items() if k in RUN_KEYS})
    tcfg = TrainConfig(**{k: _coerce(k, v, TRAIN_KEYS[k]) for k, v in settings.items() if k in TRAIN_KEYS})
    ablation = AblationConfig.variant(run.variant)
    overrides = {k: _coerce(k, v, "bool") for k, v in settings.items() if k in ABLATION_KEYS}
    ablation = replace(ablation, **overrides)
    if not 0.0 < run.train_fraction < 1.0:
        raise UsageError("train_fraction must lie in (0, 1)")
    return run, tcfg, ablation


def flat_config(run: RunConfig, tcfg: TrainConfig, ablation: AblationConfig) -> dict:
    return {**asdict(run), **tcfg.as_dict(), **asdict(ablation)}


# ---------------------------------------------------------------------------
# shared helpers


def output_dir(args) -> Path:
    out = Path(args.output_dir or os.environ.get(OUTPUT_ENV) or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"no {what} file given")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(p)
    return p


def load_graphs(run: RunConfig) -> tuple[RatingGraph, SocialGraph, dict]:
    rpath = _require(run.ratings, "ratings")
    graph = load_ratings(rpath, run.r_max, run.round_ratings)
    hashes = {"ratings": {"path": str(rpath), "sha256": file_hash(rpath)}}
    if run.trust is None:
        social = SocialGraph.empty(graph.n_users)
    else:
        tpath = _require(run.trust, "trust")
        social = load_trust(tpath, graph, run.symmetrize)
        hashes["trust"] = {"path": str(tpath), "sha256": file_hash(tpath)}
    return graph, social, hashes


def make_manifest(command: str, config: dict, seed: int, data: dict, **extra) -> dict:
    return {
        "tool": "graphrec",
        "version": __version__,
        "command": command,
        "config": config,
        "seeds": {"root": seed, "split": seed if config.get("split_seed") is None else config["split_seed"],
                  **{p: derive_seed(seed, p) for p in PURPOSES}},
        "data": data,
        "python": platform.python_version(),
        "numpy": np.__version__,
        **extra,
    }


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def emit(payload) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")


def _prepare(args):
    settings = read_config_file(args.config) if args.config else {}
    settings.update(_flag_settings(args))
    run, tcfg, ablation = build_configs(settings)
    # absolute paths keep manifests replayable from any working directory
    for key in ("ratings", "trust"):
        if getattr(run, key) is not None:
            setattr(run, key, str(Path(getattr(run, key)).resolve()))
    return run, tcfg, ablation


def _flag_settings(args) -> dict:
    keys = set(TRAIN_KEYS) | set(RUN_KEYS) | ABLATION_KEYS
    return {k: v for k, v in vars(args).items() if k in keys and v is not None}


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> dict:
    run, tcfg, _ = _prepare(args)
    graph, social, hashes = load_graphs(run)
    out = output_dir(args)
    export_ratings(graph, out / "ratings.tsv")
    export_trust(social, graph, out / "trust.tsv")
    (out / "user_ids.txt").write_text("".join(f"{k}\t{raw}\n" for k, raw in enumerate(graph.user_ids)))
    (out / "item_ids.txt").write_text("".join(f"{k}\t{raw}\n" for k, raw in enumerate(graph.item_ids)))
    report = {
        "users": graph.n_users,
        "items": graph.n_items,
        "ratings": len(graph.triples),
        "social_edges": social.n_edges,
        "ratings_report": graph.report.as_dict(),
        "trust_report": social.report.as_dict(),
    }
    write_json(out / "load_report.json", report)
    write_json(out / "manifest.json", make_manifest("ingest", asdict(run), tcfg.seed, hashes))
    return {**report, "output_dir": str(out)}


def cmd_split(args) -> dict:
    run, tcfg, _ = _prepare(args)
    graph, _, hashes = load_graphs(run)
    seed = run.resolved_split_seed(tcfg.seed)
    parts = split(graph, run.train_fraction, seed)
    out = output_dir(args)
    write_split(parts, graph, out, hashes["ratings"]["sha256"])
    return {"counts": parts.counts, "seed": seed, "train_fraction": run.train_fraction, "output_dir": str(out)}


def _train_setup(args):
    run, tcfg, ablation = _prepare(args)
    graph, social, hashes = load_graphs(run)
    parts = split(graph, run.train_fraction, run.resolved_split_seed(tcfg.seed))
    return run, tcfg, ablation, graph, social, parts, hashes


def write_history(path: Path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EpochRecord.CSV_FIELDS)
        for rec in history:
            w.writerow(rec.as_row())


def cmd_train(args) -> dict:
    run, tcfg, ablation, graph, social, parts, hashes = _train_setup(args)
    out = output_dir(args)
    config = flat_config(run, tcfg, ablation)
    history: list[EpochRecord] = []
    try:
        result = train(graph, social, parts, tcfg, ablation, callback=history.append)
    finally:
        write_history(out / "history.csv", history)
    manifest = make_manifest("train", config, tcfg.seed, hashes, split_counts=parts.counts,
                             best_epoch=result.best_epoch, best_val_rmse=result.best_val_rmse)
    save_checkpoint(out / "checkpoint.npz", result.params, manifest)
    manifest["checkpoint_sha1"] = git_blob_hash(out / "checkpoint.npz")
    write_json(out / "manifest.json", manifest)
    (out / "config.txt").write_text("".join(f"{k} = {'none' if v is None else v}\n" for k, v in config.items()))
    return {
        "best_epoch": result.best_epoch,
        "best_val_rmse": result.best_val_rmse,
        "epochs": len(result.history),
        "stopped_early": result.stopped_early,
        "checkpoint": str(out / "checkpoint.npz"),
        "output_dir": str(out),
    }


def _load_for_checkpoint(args):
    ckpt = _require(args.checkpoint, "checkpoint")
    try:
        params, meta = load_checkpoint(ckpt)
    except (KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"{ckpt}: unreadable checkpoint ({exc})") from exc
    settings = {k: ("none" if v is None else str(v)) for k, v in meta.get("config", {}).items()}
    if args.config:
        settings.update(read_config_file(args.config))
    settings.update(_flag_settings(args))
    run, tcfg, ablation = build_configs(settings)
    graph, social, hashes = load_graphs(run)
    for key, info in meta.get("data", {}).items():
        now = hashes.get(key, {}).get("sha256")
        if now is not None and now != info.get("sha256"):
            log.warning("%s file differs from the one the checkpoint was trained on", key)
    shp = params.shape
    if (shp.n_users, shp.n_items, shp.r_max) != (graph.n_users, graph.n_items, graph.r_max):
        raise CheckpointError(
            f"checkpoint expects {shp.n_users} users / {shp.n_items} items / r_max {shp.r_max}, "
            f"data has {graph.n_users} / {graph.n_items} / {graph.r_max}")
    if shp.dim != tcfg.embed_dim or shp.mlp_depth != tcfg.mlp_depth:
        tcfg = replace(tcfg, embed_dim=shp.dim, mlp_depth=shp.mlp_depth)
    return ckpt, params, run, tcfg, ablation, graph, social


def cmd_evaluate(args) -> dict:
    ckpt, params, run, tcfg, ablation, graph, social = _load_for_checkpoint(args)
    parts = split(graph, run.train_fraction, run.resolved_split_seed(tcfg.seed))
    train_graph = graph.restricted(parts.train)
    report = evaluate(params, train_graph, social, parts.part(args.split), tcfg, ablation,
                      clamp=run.clamp, split_name=args.split)
    report.checkpoint_hash = git_blob_hash(ckpt)
    out = output_dir(args)
    write_json(out / f"metrics_{args.split}.json", report.as_dict())
    (out / f"metrics_{args.split}.txt").write_text(report.to_text() + "\n")
    return report.as_dict()


def _table_command(args, name: str, build) -> dict:
    run, tcfg, ablation, graph, social, parts, hashes = _train_setup(args)
    table = build(run, tcfg, ablation, graph, social, parts)
    out = output_dir(args)
    (out / f"{name}.csv").write_text(table.to_csv())
    (out / f"{name}.txt").write_text(table.to_text() + "\n")
    write_json(out / "manifest.json", make_manifest(name, flat_config(run, tcfg, ablation), tcfg.seed, hashes,
                                                    split_counts=parts.counts))
    return {"rows": table.to_records(), "output_dir": str(out)}


def cmd_ablate(args) -> dict:
    names = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in names:
        AblationConfig.variant(v)  # unknown names fail before any training
    return _table_command(args, "ablation", lambda run, tcfg, ab, g, s, p: ablation_report(g, s, p, tcfg, names))


def cmd_sweep(args) -> dict:
    try:
        sizes = [int(v) for v in args.sizes.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"sizes must be comma-separated integers, got {args.sizes!r}") from None
    return _table_command(args, "sweep", lambda run, tcfg, ab, g, s, p: embedding_sweep(g, s, p, tcfg, sizes, ab))


def cmd_predict(args) -> dict:
    _, params, run, tcfg, ablation, graph, social = _load_for_checkpoint(args)
    parts = split(graph, run.train_fraction, run.resolved_split_seed(tcfg.seed))
    train_graph = graph.restricted(parts.train)
    users, items = graph.user_index, {raw: k for k, raw in enumerate(graph.item_ids)}
    if args.user not in users:
        raise UsageError(f"unknown user {args.user!r}")
    if args.item not in items:
        raise UsageError(f"unknown item {args.item!r}")
    value = predict_rating(users[args.user], items[args.item], eval_view(train_graph, social, tcfg), params, ablation)
    if run.clamp:
        value = min(max(value, 1.0), float(graph.r_max))
    return {"user": args.user, "item": args.item, "prediction": value, "clamped": run.clamp}


def cmd_synth(args) -> dict:
    data = synth_generate(args.users, args.items, args.d_true, args.homophily, args.noise, args.seed,
                          ratings_per_user=args.ratings_per_user, spread=args.spread,
                          erratic_items=args.erratic_items)
    out = output_dir(args)
    export_ratings(data.graph, out / "ratings.txt")
    export_trust(data.social, data.graph, out / "trust.txt")
    return {"users": data.graph.n_users, "items": data.graph.n_items, "ratings": len(data.graph.triples),
            "social_edges": data.social.n_edges, "output_dir": str(out)}


# ---------------------------------------------------------------------------
# argument parsing


def _bool_flag(p, name, help):
    p.add_argument(f"--{name.replace('_', '-')}", dest=name, action=argparse.BooleanOptionalAction, default=None,
                   help=help)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file (flags override it)")
    common.add_argument("--output-dir", help=f"where artifacts go (default ${OUTPUT_ENV} or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--ratings", help="ratings file: user item rating per line")
    data.add_argument("--trust", help="trust file: truster trustee per line")
    data.add_argument("--r-max", dest="r_max", type=int)
    _bool_flag(data, "round_ratings", "round non-integer ratings to the nearest level")
    _bool_flag(data, "symmetrize", "add the reverse of every trust edge")
    data.add_argument("--train-fraction", dest="train_fraction", type=float)
    data.add_argument("--split-seed", dest="split_seed", type=int)
    data.add_argument("--seed", type=int, help="root seed for every random stream")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--embed-dim", dest="embed_dim", type=int)
    model.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    model.add_argument("--batch-size", dest="batch_size", type=int)
    model.add_argument("--dropout-rate", dest="dropout_rate", type=float)
    model.add_argument("--rmsprop-decay", dest="rmsprop_decay", type=float)
    model.add_argument("--rmsprop-epsilon", dest="rmsprop_epsilon", type=float)
    model.add_argument("--max-epochs", dest="max_epochs", type=int)
    model.add_argument("--patience", type=int)
    model.add_argument("--neighbor-cap", dest="neighbor_cap", type=int)
    model.add_argument("--mlp-depth", dest="mlp_depth", type=int)
    model.add_argument("--variant", choices=sorted(VARIANTS), help="ablation variant")
    for key in sorted(ABLATION_KEYS):
        _bool_flag(model, key, f"ablation switch {key}")

    parser = argparse.ArgumentParser(prog="graphrec", description="Social recommendation with graph attention.")
    parser.add_argument("--version", action="version", version=f"graphrec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("ingest", parents=[common, data], help="load, validate and re-index the input files")
    sub.add_parser("split", parents=[common, data], help="write a seeded train/validation/test split")
    sub.add_parser("train", parents=[common, data, model], help="train and save the best checkpoint")

    p = sub.add_parser("evaluate", parents=[common, data, model], help="score a checkpoint on one split part")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", dest="split", default="test", choices=["train", "validation", "test"])
    _bool_flag(p, "clamp", "clamp predictions to [1, r_max]")

    p = sub.add_parser("ablate", parents=[common, data, model], help="train each ablation variant")
    p.add_argument("--variants", default=",".join(VARIANTS), help="comma-separated variant names")

    p = sub.add_parser("sweep", parents=[common, data, model], help="train once per embedding size")
    p.add_argument("--sizes", default=",".join(map(str, DEFAULT_SIZES)))

    p = sub.add_parser("predict", parents=[common, data, model], help="predict one rating from a checkpoint")
    p.add_argument("user", help="raw user id")
    p.add_argument("item", help="raw item id")
    p.add_argument("--checkpoint", required=True)
    _bool_flag(p, "clamp", "clamp the prediction to [1, r_max]")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic ratings + trust dataset")
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--items", type=int, default=300)
    p.add_argument("--d-true", dest="d_true", type=int, default=4)
    p.add_argument("--homophily", type=float, default=0.8)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratings-per-user", dest="ratings_per_user", type=float, default=10.0,
                   help="median ratings per user")
    p.add_argument("--spread", type=float, default=0.5, help="individual taste noise around the community")
    p.add_argument("--erratic-items", dest="erratic_items", type=float, default=0.0,
                   help="fraction of items rated with heavy noise")
    return parser


COMMANDS = {
    "ingest": cmd_ingest, "split": cmd_split, "train": cmd_train, "evaluate": cmd_evaluate,
    "ablate": cmd_ablate, "sweep": cmd_sweep, "predict": cmd_predict, "synth": cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        emit(COMMANDS[args.command](args))
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataFormatError, TooSmallError, UsageError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    return 0


if __name__ == "__main__":
    sys.exit(main())
