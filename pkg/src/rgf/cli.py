"""Command line entry point (``rgf``).

Exit codes: 0 on success, 2 on bad input (flags, files, configs), 1 on any
other failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import env as env_mod
from . import mcts, metrics, nets, pipeline, synthgen, trainer
from .graph import GraphValidationError, read_graph, write_graph

log = logging.getLogger("rgf")


class UsageError(ValueError):
    """Invalid user input; maps to exit code 2."""


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _scene_dirs(path: str | Path) -> list[Path]:
    p = Path(path)
    if (p / "meta.json").is_file():
        return [p]
    if p.is_dir():
        dirs = sorted(d for d in p.iterdir() if (d / "meta.json").is_file())
        if dirs:
            return dirs
    raise UsageError(f"{path}: not a scene directory or a dataset of scenes")


def _load_params(path: str) -> nets.ModelParams:
    try:
        params, _ = nets.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {path}") from exc
    return params


def _scene_for_agent(record) -> trainer.TrainScene:
    """Scene with stored oracle keypoints, or keypoints extracted from the road mask."""
    if record.keypoints is not None:
        return trainer.scene_from_record(record)
    ex = pipeline.extract_keypoints(record.road_mask.astype(np.uint8) * 255)
    return trainer.TrainScene(record.image, ex.keypoints, record.gt_graph, None, None, record.path.name)


def _write_rows(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if not 0.0 <= args.density <= 1.0:
        raise UsageError("--density must lie in [0, 1]")
    base = synthgen.tiny_profile() if args.profile == "tiny" else synthgen.TownParams()
    params = replace(base, vegetation_density=args.density)
    paths = synthgen.generate_dataset(args.out, args.n, args.seed, params, args.max_len, args.distractors,
                                      args.max_difficulty, workers=trainer.n_workers())
    for p in paths:
        meta = json.loads((p / "meta.json").read_text())
        print(f"{p.name} difficulty={meta['difficulty']:.4f}")
    return 0


def cmd_extract(args) -> int:
    ex = pipeline.extract_keypoints(args.mask, args.rdp_epsilon, args.max_edge_len, args.threshold)
    write_graph(args.out, ex.graph)
    print(f"keypoints={len(ex.keypoints)} edges={ex.graph.n_edges}")
    return 0


def _graph_pairs(gt: str, pred: str) -> list[tuple[str, Path, Path]]:
    g, p = Path(gt), Path(pred)
    if g.is_file() and p.is_file():
        return [(p.name, g, p)]
    if g.is_dir() and p.is_dir():
        pairs = []
        for f in sorted(g.rglob("*.json")):
            if f.name == "meta.json":  # scene metadata in dataset directories
                continue
            rel = f.relative_to(g)
            if (p / rel).is_file():
                pairs.append((str(rel), f, p / rel))
        if not pairs:
            raise UsageError("no graph files with matching names under --gt and --pred")
        return pairs
    raise UsageError("--gt and --pred must both be files or both be directories")


def cmd_eval(args) -> int:
    pairs = _graph_pairs(args.gt, args.pred)
    cfg = metrics.MetricConfig(rng_seed=args.seed)

    def one(item):
        name, g, p = item
        return name, metrics.evaluate(read_graph(g), read_graph(p), cfg)

    with ThreadPoolExecutor(trainer.n_workers()) as pool:
        results = list(pool.map(one, pairs))
    rows = []
    for name, rep in results:
        d = rep.as_dict()
        if len(results) > 1:
            print(f"[{name}]")
        for k in metrics.MetricReport.score_fields():
            print(f"{k}={d[k]:.6g}")
        if rep.flags:
            print(f"flags={d['flags']}")
        rows.append({"name": name, **d})
    if len(results) > 1:
        print(f"mean_combined={np.mean([r.combined for _, r in results]):.6g}")
    if args.csv:
        _write_rows(args.csv, rows)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({r["name"]: {k: v for k, v in r.items() if k != "name"} for r in rows}, fh, indent=1)
    return 0


def cmd_rollout(args) -> int:
    if args.sims < 1:
        raise UsageError("--sims must be >= 1")
    params = _load_params(args.ckpt)
    dirs = _scene_dirs(args.scene)
    many = len(dirs) > 1
    if args.trace and many:
        Path(args.trace).mkdir(parents=True, exist_ok=True)
    returns = []
    for d in dirs:
        scene = _scene_for_agent(synthgen.read_scene(d))
        state, trace = trainer.run_greedy_episode(scene, params, args.sims, seed=args.seed)
        ret = env_mod.episode_return(trace)
        returns.append(ret)
        print(f"{d.name} return={ret:.6f} score={state.cached_score:.6f} edges={len(state.edges)}")
        if args.trace:
            target = Path(args.trace) / f"{d.name}.jsonl" if many else Path(args.trace)
            env_mod.write_trace(target, trace, {"scene": str(d), "sims": args.sims, "seed": args.seed})
    if many:
        print(f"median_return={np.median(returns):.6f} mean_return={np.mean(returns):.6f}")
    return 0


def _train_scenes(source, seed: int) -> list[trainer.TrainScene]:
    if source is None:
        return []
    if isinstance(source, str):
        source = {"dir": source}
    if not isinstance(source, dict):
        raise UsageError("scene source must be a directory path or an object")
    if "dir" in source:
        return [trainer.scene_from_record(synthgen.read_scene(d)) for d in _scene_dirs(source["dir"])]
    known = {"n", "seed", "max_difficulty", "max_len_px", "n_distractors"}
    if set(source) - known:
        raise UsageError(f"unknown scene source keys: {sorted(set(source) - known)}")
    source = dict(source)
    n = int(source.pop("n", 100))
    return trainer.tiny_scene_set(n, int(source.pop("seed", seed)), **source)


def cmd_train(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config not found: {args.config}") from exc
    if not isinstance(raw, dict):
        raise UsageError("training config must be a JSON object")
    train_source = raw.pop("train_scenes", {"n": 100, "seed": args.seed})
    eval_source = raw.pop("eval_scenes", None)
    raw["seed"] = args.seed
    config = trainer.TrainConfig.from_json(raw)
    scenes = _train_scenes(train_source, args.seed)
    if not scenes:
        raise UsageError("no training scenes")
    eval_scenes = _train_scenes(eval_source, args.seed + 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(
        {**config.to_dict(), "train_scenes": train_source, "eval_scenes": eval_source}, indent=1, sort_keys=True))

    def progress(row):
        if row["step"] % 100 == 0 or row["eval_return"] != "":
            log.info("step %d policy %.4f value %.4f reward %.4f eval %s", row["step"], row["policy_loss"],
                     row["value_loss"], row["reward_loss"], row["eval_return"])

    result = trainer.train(config, scenes, eval_scenes, metrics_path=out / "metrics.csv", progress=progress)
    nets.save_checkpoint(out / "checkpoint.bin", result.params, {"train_config": config.to_dict()})
    last = result.log[-1]
    print(f"updates={len(result.log)} policy_loss={last['policy_loss']:.6f} value_loss={last['value_loss']:.6f} "
          f"reward_loss={last['reward_loss']:.6f}")
    if last["eval_return"] != "":
        print(f"eval_return={last['eval_return']:.6f}")
    return 0


def cmd_infer(args) -> int:
    params = _load_params(args.ckpt)
    [d] = _scene_dirs(args.scene) if (Path(args.scene) / "meta.json").is_file() else [None]
    if d is None:
        raise UsageError("--scene must be a single scene directory")
    record = synthgen.read_scene(d)
    H, W = record.image.shape[:2]
    patch = args.patch_size or max(W, H)
    plan = pipeline.make_tile_plan(W, H, patch, args.overlap if patch < max(W, H) else 0)
    cfg = mcts.SearchConfig(n_simulations=args.sims)
    agent = pipeline.SearchAgent(params, cfg, seed=args.seed)
    if args.keypoints == "oracle":
        if record.keypoints is None:
            raise UsageError("scene has no stored keypoints; use --keypoints extract")
        kp = record.keypoints
    else:
        kp = pipeline.extract_keypoints(record.road_mask.astype(np.uint8) * 255).keypoints
    g = pipeline.infer_tiled(record.image, agent, plan, kp, args.fusion_tolerance, args.mode, args.prune_px)
    write_graph(args.out, g)
    rep = metrics.evaluate(record.gt_graph, g, metrics.MetricConfig(rng_seed=args.seed))
    print(f"patches={len(plan.offsets)} vertices={g.n_vertices} edges={g.n_edges} combined={rep.combined:.6f}")
    return 0


def cmd_stats(args) -> int:
    g = read_graph(args.graph)
    st = metrics.graph_statistics(g, args.bins)
    print(f"vertices={g.n_vertices} edges={g.n_edges} intersections={st.n_intersections} "
          f"total_length={st.total_length:.6f}")
    lo, hi = st.angle_bin_edges[:-1], st.angle_bin_edges[1:]
    for a, b, c in zip(lo, hi, st.angle_histogram):
        print(f"angle[{a:g},{b:g})={c:g}")
    for k, c in enumerate(st.degree_histogram):
        print(f"degree[{k}]={int(c)}")
    if args.csv:
        rows = [{"kind": "angle", "lo": float(a), "hi": float(b), "value": float(c)}
                for a, b, c in zip(lo, hi, st.angle_histogram)]
        rows += [{"kind": "degree", "lo": k, "hi": k, "value": int(c)} for k, c in enumerate(st.degree_histogram)]
        _write_rows(args.csv, rows)
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rgf", description="Road-graph generation with learned tree search.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
        p.set_defaults(fn=fn)
        return p

    p = add("synth", cmd_synth, "generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--density", type=float, default=0.3, help="vegetation density in [0, 1]")
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=("tiny", "default"), default="tiny")
    p.add_argument("--max-len", type=float, default=16.0, help="oracle keypoint spacing (px)")
    p.add_argument("--distractors", type=int, default=2)
    p.add_argument("--max-difficulty", type=float, default=None)

    p = add("extract-keypoints", cmd_extract, "keypoints and seed graph from a road mask")
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rdp-epsilon", type=float, default=2.0)
    p.add_argument("--max-edge-len", type=float, default=20.0)
    p.add_argument("--threshold", type=int, default=128)

    p = add("eval", cmd_eval, "score a predicted graph against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--csv")
    p.add_argument("--json", help="write the report(s) as flat JSON objects keyed by name")

    p = add("rollout", cmd_rollout, "greedy search episode(s) with a checkpoint")
    p.add_argument("--scene", required=True, help="scene directory or dataset directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sims", type=int, default=50)
    p.add_argument("--trace")

    p = add("train", cmd_train, "train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = add("infer", cmd_infer, "tiled inference with graph fusion")
    p.add_argument("--scene", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sims", type=int, default=50)
    p.add_argument("--patch-size", type=int, default=0, help="0 = whole image")
    p.add_argument("--overlap", type=int, default=16)
    p.add_argument("--fusion-tolerance", type=float, default=3.0)
    p.add_argument("--mode", choices=("sequential", "naive"), default="sequential")
    p.add_argument("--keypoints", choices=("oracle", "extract"), default="oracle")
    p.add_argument("--prune-px", type=float, default=0.0)

    p = add("stats", cmd_stats, "graph statistics (angle and degree histograms)")
    p.add_argument("--graph", required=True)
    p.add_argument("--bins", type=int, default=18)
    p.add_argument("--csv")
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (UsageError, GraphValidationError, nets.CheckpointError, FileNotFoundError,
            json.JSONDecodeError, ValueError) as exc:
        print(f"rgf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        print(f"rgf {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
