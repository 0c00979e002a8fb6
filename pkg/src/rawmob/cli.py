"""Command-line pipeline: generate-data, pretrain, embed, finetune, rollout, evaluate.

Configuration precedence, lowest first: built-in defaults, ``--config`` YAML file, ``--set
section.key=value`` overrides. The resolved configuration is written as ``run_config.yaml``
into every output directory.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import io
from .errors import ConfigError, RawError
from .evaluation import (MetricReport, evaluate_head, evaluate_unique, rollout_error_table, rollout_geojson,
                         split_indices, statics_baseline, statics_features, unique_baseline)
from .finetune import (load_head, read_embeddings, region_embed_all, embed_many, save_head, train_head,
                       write_embeddings)
from .model import init_params, load_checkpoint
from .pretrain import TrainState, pretrain, write_train_checkpoint
from .tasks import get_task, task_labels
from .trajectory import STEPS_PER_DAY, fit_stats, interpolate_to_grid
from .world import generate_synthetic_world

log = logging.getLogger("rawmob")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _gridded(cfg: dict, data_dir: Path):
    world = C.build_world(cfg)
    raws = io.read_trajectories(data_dir / "trajectories.jsonl")
    return [interpolate_to_grid(r, world.start_t, world.n_days * STEPS_PER_DAY) for r in raws]


def _user_split(ids, cfg):
    return split_indices(len(ids), cfg["eval"]["seed"])


def _chunks(coords: np.ndarray, n: int):
    for i in range(0, len(coords), n):
        if len(coords[i:i + n]) >= 2:
            yield coords[i:i + n]


def cmd_generate_data(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = generate_synthetic_world(C.build_world(cfg))
    io.write_trajectories(out / "trajectories.jsonl", world.trajectories)
    io.write_labels(out / "labels.jsonl", world.labels)
    io.write_regions(out / "regions.geojson", world.regions)
    C.write_config(out, cfg)
    log.info("wrote %d users and %d regions to %s", len(world.trajectories), len(world.regions), out)


def cmd_pretrain(args, cfg):
    out = Path(args.out)
    trajs = sorted(_gridded(cfg, Path(args.data)), key=lambda t: t.user_id)
    split = _user_split([t.user_id for t in trajs], cfg)
    train = [trajs[i] for i in split.train]
    stats = fit_stats(train)
    mcfg = C.build_model(cfg)
    tcfg = C.build_train(cfg)
    seqs = [c for t in train for c in _chunks(stats.normalize(t.coords), mcfg.max_seq_len)]
    params = init_params(mcfg, cfg["model"]["init_seed"])
    state = TrainState.create(params, tcfg)
    C.write_config(out, cfg)
    if tcfg.total_steps > 0:
        pretrain(params, seqs, tcfg, stats=stats, log_path=out / "train_log.jsonl",
                 checkpoint_dir=out / "checkpoints", checkpoint_every=cfg["train"]["checkpoint_every"],
                 state=state)
    else:
        (out / "train_log.jsonl").write_text("")
    write_train_checkpoint(out / "model.ckpt", state, stats)
    log.info("trained %d steps on %d sequences; checkpoint %s", state.step, len(seqs), out / "model.ckpt")


def cmd_embed(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ck = load_checkpoint(args.checkpoint)
    if ck.stats is None:
        raise ConfigError(f"checkpoint {args.checkpoint} carries no normalization stats")
    data = Path(args.data)
    trajs = sorted(_gridded(cfg, data), key=lambda t: t.user_id)
    fc = cfg["finetune"]
    if args.what in ("users", "both"):
        embs = embed_many(ck.params, trajs, ck.stats, fc["pooling"], truncate=True)
        write_embeddings(out / "user_embeddings.jsonl", embs)
    if args.what in ("regions", "both"):
        world = C.build_world(cfg)
        regions = io.read_regions(data / "regions.geojson")
        as_of = world.start_t + world.n_days * 86400
        embs = region_embed_all(ck.params, trajs, regions, as_of, ck.stats, fc["K_days"], fc["proximity_m"],
                                fc["pooling"])
        write_embeddings(out / "region_embeddings.jsonl", embs)
    C.write_config(out, cfg)


def _load_labels(task, path):
    path = Path(path)
    if task.target == "user":
        return io.read_labels(path), None
    return None, io.read_regions(path)


def cmd_finetune(args, cfg):
    out = Path(args.out)
    task = get_task(args.task)
    ck = load_checkpoint(args.checkpoint)
    ids, x = read_embeddings(args.embeddings)
    if x.shape[1] != ck.params.config.d_model:
        raise ConfigError(f"embedding width {x.shape[1]} does not match checkpoint d_model {ck.params.config.d_model}")
    labels, regions = _load_labels(task, args.labels)
    y = task_labels(task, ids, labels, regions)
    split = split_indices(len(ids), cfg["eval"]["seed"])
    head = train_head(x[split.train], y[split.train], task.kind, C.build_head(cfg), task_id=task.name,
                      n_classes=task.n_classes, val=(x[split.val], y[split.val]),
                      pooling=cfg["finetune"]["pooling"])
    save_head(out / "head.ckpt", head)
    uniq = unique_baseline(y[split.train], task.kind)
    report = MetricReport(task.name, split.sizes(), {
        "RAW": evaluate_head(head, x[split.test], y[split.test]),
        "Unique": evaluate_unique(uniq, y[split.test]),
    })
    report.write(out)
    # inputs are identified by content, so the record does not depend on where the run happened
    io.write_json(out / "finetune_meta.json", {
        "task": task.name,
        "checkpoint": {"name": Path(args.checkpoint).name, "sha256": sha256_file(args.checkpoint)},
        "embeddings": {"name": Path(args.embeddings).name, "sha256": sha256_file(args.embeddings)},
        "labels": {"name": Path(args.labels).name, "sha256": sha256_file(args.labels)},
    })
    C.write_config(out, cfg)
    sys.stdout.write(report.to_text())


def cmd_rollout(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ck = load_checkpoint(args.checkpoint)
    trajs = sorted(_gridded(cfg, Path(args.data)), key=lambda t: t.user_id)
    split = _user_split([t.user_id for t in trajs], cfg)
    ev = cfg["eval"]
    horizons = list(range(1, args.horizons + 1)) if args.horizons else ev["horizons"]
    table = rollout_error_table(ck.params, [trajs[i] for i in split.test], ck.stats, ev["start_times"], horizons,
                                keep_paths=ev["keep_paths"])
    (out / "rollout_table.txt").write_text(table.to_text() + "\n")
    io.write_json(out / "rollout.json", table.to_dict())
    io.write_json(out / "rollout_paths.geojson", rollout_geojson(table))
    C.write_config(out, cfg)
    sys.stdout.write(table.to_text() + "\n")


def cmd_evaluate(args, cfg):
    out = Path(args.out)
    data = Path(args.data)
    emb_dir = Path(args.embeddings)
    reports = []
    regions = None
    for fdir in args.finetune:
        head = load_head(Path(fdir) / "head.ckpt")
        task = get_task(head.task_id)
        ids, x = read_embeddings(emb_dir / f"{task.target}_embeddings.jsonl")
        if task.target == "user":
            y = task_labels(task, ids, io.read_labels(data / "labels.jsonl"))
        else:
            regions = regions or io.read_regions(data / "regions.geojson")
            y = task_labels(task, ids, regions=regions)
        split = split_indices(len(ids), cfg["eval"]["seed"])
        metrics = {"RAW": evaluate_head(head, x[split.test], y[split.test]),
                   "Unique": evaluate_unique(unique_baseline(y[split.train], task.kind), y[split.test])}
        if task.target == "region":
            by_id = {r.region_id: r for r in regions}
            trajs = _gridded(cfg, data)
            feats = statics_features(trajs, [by_id[i] for i in ids], cfg["finetune"]["proximity_m"])
            st_head = statics_baseline(feats, y, split, task.kind, C.build_head(cfg))
            metrics["Statics"] = evaluate_head(st_head, feats[split.test], y[split.test])
        reports.append(MetricReport(task.name, split.sizes(), metrics))
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text("\n".join(r.to_text() for r in reports))
    io.write_json(out / "report.json", [r.to_dict() for r in reports])
    C.write_config(out, cfg)
    sys.stdout.write("\n".join(r.to_text() for r in reports))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable; wins over --config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rawmob", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate-data", parents=[common], help="write a synthetic world")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate_data)

    s = sub.add_parser("pretrain", parents=[common], help="next-GPS pretraining")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("embed", parents=[common], help="user and region embeddings")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--what", choices=("users", "regions", "both"), default="both")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("finetune", parents=[common], help="train a task head on frozen embeddings")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--embeddings", required=True)
    s.add_argument("--labels", required=True, help="labels.jsonl for user tasks, regions.geojson for region tasks")
    s.add_argument("--task", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("rollout", parents=[common], help="greedy rollout error table on test users")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--horizons", type=int, help="evaluate horizons 1..N (default from config)")
    s.set_defaults(func=cmd_rollout)

    s = sub.add_parser("evaluate", parents=[common], help="compare task heads with baselines")
    s.add_argument("--data", required=True)
    s.add_argument("--embeddings", required=True, help="directory written by embed")
    s.add_argument("--finetune", required=True, nargs="+", help="directories written by finetune")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.resolve(args.config, args.overrides)
        args.func(args, cfg)
    except (RawError, OSError, KeyError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
