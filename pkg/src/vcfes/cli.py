"""Command-line front end.

Exit codes: 0 success, 2 usage/config, 3 numerical failure, 4 format
mismatch, 5 empty or degenerate data.
"""
from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import sys
from dataclasses import fields

from . import pipeline
from .errors import ConfigError, EmptyGallery, FormatMismatch, IoFailure, VCFeSError
from .evaluation import EvalProtocol, compare_modes, mode_deltas, rank_table
from .gradcheck import run_gradcheck, summarize
from .heads import load_checkpoint, save_checkpoint
from .retrieval import COMBINE_MODES, FUSION_MODES, load_index, query_topk, save_index
from .synthetic import SyntheticSpec, generate
from .training import TrainConfig, fit

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("vcfes")

PATH_KEYS = ("dataset", "manifest", "embeddings", "masks", "checkpoint", "log")
GRADCHECK_TOLERANCE = 1e-4


def _write_text(path, text):
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _data_args(p, default_split):
    p.add_argument("--dataset", help="dataset directory written by `synth`")
    p.add_argument("--split", default=default_split, choices=("train", "query", "gallery"))
    p.add_argument("--manifest")
    p.add_argument("--embeddings")
    p.add_argument("--masks")


def _resolve_data(args):
    paths = {"manifest": args.manifest, "embeddings": args.embeddings, "masks": args.masks}
    if args.dataset:
        for key, value in pipeline.dataset_paths(args.dataset, args.split).items():
            paths[key] = paths[key] or value
    pipeline.require_paths(**paths)
    return paths


def _load_checkpoint_checked(path):
    pipeline.require_paths(checkpoint=path)
    return load_checkpoint(path)


def _check_index_dim(index, heads):
    if index.dim != heads.embed_dim:
        raise FormatMismatch(
            f"index embedding dim d={index.dim} does not match checkpoint d={heads.embed_dim}")


# -- synth ---------------------------------------------------------------

def cmd_synth(args):
    spec = SyntheticSpec(num_identities=args.identities, views_per_identity=args.views,
                         backbone_dim=args.dim, signature_dim=args.sig_dim,
                         noise_sigma=args.noise, distractor_overlap=args.overlap,
                         seed=args.seed)
    generate(spec).write(args.out)
    print(f"wrote synthetic dataset to {args.out}")
    return 0


# -- train ---------------------------------------------------------------

def _train_keys():
    return {f.name: type(getattr(TrainConfig(), f.name)) for f in fields(TrainConfig)}


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat key = value pairs; found tables {nested}")
    return data


def resolve_run_config(args):
    """Merge config file and flag overrides; flags win."""
    values = _load_config_file(args.config)
    for key in list(_train_keys()) + list(PATH_KEYS):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    paths = {k: values.pop(k) for k in PATH_KEYS if k in values}
    config = TrainConfig.from_mapping(values).validate()
    if "dataset" in paths:
        for key, value in pipeline.dataset_paths(paths["dataset"], "train").items():
            paths.setdefault(key, value)
    paths.pop("dataset", None)
    if "checkpoint" not in paths:
        raise ConfigError("no checkpoint directory given (config key or --checkpoint)")
    paths.setdefault("log", os.path.join(paths["checkpoint"], "train_log.jsonl"))
    pipeline.require_paths(manifest=paths.get("manifest"), embeddings=paths.get("embeddings"),
                           masks=paths.get("masks"))
    return config, paths


def cmd_train(args):
    config, paths = resolve_run_config(args)
    samples = pipeline.load_samples(paths["manifest"], paths["embeddings"], paths["masks"])
    lines = []
    result = fit(samples, config, on_batch=lambda rec: lines.append(rec.to_json()))
    save_checkpoint(paths["checkpoint"], result.heads, result.arcface)
    _write_text(paths["log"], "".join(line + "\n" for line in lines))
    totals = result.epoch_totals()
    print(f"trained {config.epochs} epochs: total loss {totals[0]:.6f} -> {totals[-1]:.6f}")
    return 0


# -- gallery / query / eval ---------------------------------------------

def cmd_gallery(args):
    heads, _ = _load_checkpoint_checked(args.checkpoint)
    paths = _resolve_data(args)
    samples = pipeline.load_samples(**paths)
    index = pipeline.gallery_from_samples(samples, heads)
    save_index(index, args.out)
    print(f"indexed {len(index)} gallery images into {args.out}")
    return 0


def cmd_query(args):
    heads, _ = _load_checkpoint_checked(args.checkpoint)
    pipeline.require_paths(index=args.index)
    paths = _resolve_data(args)
    index = load_index(args.index)
    _check_index_dim(index, heads)
    if len(index) == 0:
        raise EmptyGallery("gallery index is empty")
    samples = [s for s in pipeline.load_samples(**paths) if s.image_id == args.image_id]
    if not samples:
        raise ConfigError(f"image_id {args.image_id!r} not found in {paths['manifest']}")
    query = pipeline.queries_from_samples(samples, heads)[0]
    hits = query_topk(index, query.spaces, query.area_ratios, args.k, args.combine, args.mode)
    lines = ["query_id,rank,gallery_id,identity,fused,d_global,d_front,d_side,d_rear"]
    for rank, hit in enumerate(hits, 1):
        d = hit.distances
        values = ",".join(f"{v:.17g}" for v in (d.fused, d.d_global, d.d_front, d.d_side,
                                                  d.d_rear))
        lines.append(f"{query.image_id},{rank},{hit.image_id},{hit.identity},{values}")
    text = "\n".join(lines) + "\n"
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args):
    heads, _ = _load_checkpoint_checked(args.checkpoint)
    pipeline.require_paths(index=args.index)
    paths = _resolve_data(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in FUSION_MODES]
    if bad or not modes:
        raise ConfigError(f"--modes must be a comma list drawn from {FUSION_MODES}")
    index = load_index(args.index)
    _check_index_dim(index, heads)
    if len(index) == 0:
        raise EmptyGallery("gallery index is empty")
    queries = pipeline.queries_from_samples(pipeline.load_samples(**paths), heads)
    protocol = EvalProtocol(queries, index, exclude_self=not args.no_self_exclusion,
                            combine=args.combine)
    reports = compare_modes(protocol, modes)
    doc = {"reports": [reports[m].to_dict() for m in modes],
           "combine": args.combine,
           "self_exclusion": not args.no_self_exclusion}
    deltas = mode_deltas(reports)
    if deltas:
        doc["deltas_vs_global_only"] = deltas
    if args.timestamps:
        doc["generated_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    if args.rank_table:
        table = rank_table(EvalProtocol(queries, index, protocol.exclude_self, args.combine,
                                        modes[-1]), k=args.k)
        _write_text(args.rank_table, "\n".join(table) + "\n")
    for m in modes:
        r = reports[m]
        log.info("%-13s top1=%.4f top5=%.4f mAP=%.4f", m, r.top1, r.top5, r.map)
    return 0


def cmd_gradcheck(args):
    results = run_gradcheck(trials=args.trials, seed=args.seed)
    for r in results:
        print(r.line())
    worst, checked, excluded = summarize(results)
    print(f"max_rel_error={worst:.3e} checked={checked} excluded={excluded} "
          f"tolerance={GRADCHECK_TOLERANCE:g}")
    return 0 if worst < GRADCHECK_TOLERANCE else 3


# -- parser --------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="vcfes", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    add = sub.add_parser

    def add_parser(name, **kw):
        return add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--identities", type=int, default=20)
    p.add_argument("--views", type=int, default=12)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--sig-dim", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.15)
    p.add_argument("--overlap", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train projection heads")
    p.add_argument("--config", help="flat TOML file of training keys and paths")
    for key, kind in _train_keys().items():
        flag_names = [f"--{key}"]
        if "_" in key:
            flag_names.append(f"--{key.replace('_', '-')}")
        if kind is bool:
            p.add_argument(*flag_names, dest=key, type=lambda s: s.lower() in ("1", "true",
                                                                               "yes", "on"))
        else:
            p.add_argument(*flag_names, dest=key, type=kind)
    for key in PATH_KEYS:
        p.add_argument(f"--{key}", dest=key)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gallery", help="build a gallery index")
    p.add_argument("--checkpoint", required=True)
    _data_args(p, "gallery")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gallery)

    p = sub.add_parser("query", help="rank the gallery for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    _data_args(p, "query")
    p.add_argument("--image-id", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--combine", choices=COMBINE_MODES, default="query_only")
    p.add_argument("--mode", choices=FUSION_MODES, default="all_views")
    p.add_argument("--out")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="compute Top1/Top5/mAP/CMC")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    _data_args(p, "query")
    p.add_argument("--modes", default="all_views")
    p.add_argument("--combine", choices=COMBINE_MODES, default="query_only")
    p.add_argument("--no-self-exclusion", action="store_true")
    p.add_argument("--out")
    p.add_argument("--rank-table")
    p.add_argument("--k", type=int, default=None, help="rows per query in the rank table")
    p.add_argument("--timestamps", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--trials", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VCFeSError as exc:
        print(f"vcfes {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"vcfes {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
