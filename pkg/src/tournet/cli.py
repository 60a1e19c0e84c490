"""Operator command line: generate data, train, solve, evaluate, benchmark.

Every command is deterministic given --seed (and --threads 1), writes its
outputs atomically (temp file + rename), and drops a manifest with the
resolved configuration next to its primary output. Exit codes: 0 success,
2 configuration error, 3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import io
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (HELD_KARP_MAX_N, brute_force, farthest_insertion,
                        held_karp, two_opt)
from .decoder import BeamConfig, beam_decode, cvrp_decode, greedy_decode, sample_decode
from .instances import (CvrpInstance, InstanceError, TspInstance,
                        cvrp_route_length, distance_matrix, generate_cvrp,
                        generate_uniform, normalize_coords, parse_tsplib,
                        read_instances_jsonl, tour_length, validate_cvrp_solution,
                        write_instances_jsonl)
from .model import ModelConfig, init_params, forward_batch
from .trainer import (Checkpoint, NumericAbort, PRESETS, TrainConfig,
                      evaluate, load_checkpoint, save_checkpoint, train)


class ConfigError(ValueError):
    """Bad flags, config files, or input data; exits with code 2."""


@contextlib.contextmanager
def atomic_write(path, mode: str = "w"):
    """Write to a temp file in the target directory, rename on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    fh = open(tmp, mode, newline="" if "b" not in mode else None)
    try:
        yield fh
        fh.close()
        os.replace(tmp, path)
    except BaseException:
        fh.close()
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_manifest(out_path: Path, command: str, resolved: dict) -> None:
    manifest = {
        "command": command,
        "resolved": resolved,
        "version": __version__,
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    target = out_path / "manifest.json" if out_path.is_dir() \
        else out_path.with_name(out_path.name + ".manifest.json")
    with atomic_write(target) as fh:
        json.dump(manifest, fh, indent=2, default=str)
        fh.write("\n")


def parse_config_file(path) -> dict:
    """Flat key=value text; '#' starts a comment. Values are typed by
    attempted int/float/bool parse, falling back to strings."""
    out: dict = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        out[key.strip()] = _parse_value(val.strip())
    return out


def _parse_value(val: str):
    low = val.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(val)
        except ValueError:
            pass
    return val


def load_instances(path, fmt: str = "auto"):
    path = Path(path)
    if fmt == "auto":
        fmt = "tsplib" if path.suffix.lower() in (".tsp", ".tsplib") else "jsonl"
    if fmt == "tsplib":
        return [parse_tsplib(path.read_text())]
    if fmt == "jsonl":
        return read_instances_jsonl(path)
    raise ConfigError(f"unknown input format {fmt!r}")


# ---------------------------------------------------------------------------
# SVG rendering: unit viewBox, circles for nodes, closed path for the tour.

_ROUTE_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                 "#8c564b", "#e377c2", "#17becf")


def _svg_document(coords: np.ndarray, paths: list[tuple[np.ndarray, str]],
                  closed: bool) -> str:
    lo = coords.min(axis=0)
    span = max(float((coords.max(axis=0) - lo).max()), 1e-12)
    pts = (coords - lo) / span
    out = io.StringIO()
    out.write('<svg xmlns="http://www.w3.org/2000/svg" viewBox="-0.05 -0.05 1.1 1.1" '
              'width="640" height="640">\n')
    out.write('<rect x="-0.05" y="-0.05" width="1.1" height="1.1" fill="white"/>\n')
    for order, color in paths:
        d = "M " + " L ".join(f"{pts[i, 0]:.5f} {1.0 - pts[i, 1]:.5f}" for i in order)
        if closed:
            d += " Z"
        out.write(f'<path d="{d}" fill="none" stroke="{color}" stroke-width="0.004"/>\n')
    for x, y in pts:
        out.write(f'<circle cx="{x:.5f}" cy="{1.0 - y:.5f}" r="0.007" fill="#333"/>\n')
    out.write("</svg>\n")
    return out.getvalue()


def render_tour_svg(coords: np.ndarray, tour: np.ndarray) -> str:
    return _svg_document(coords, [(np.asarray(tour), _ROUTE_COLORS[0])], closed=True)


def render_routes_svg(inst: CvrpInstance, routes) -> str:
    coords = inst.all_coords()
    paths = []
    for i, route in enumerate(routes):
        order = np.array([0, *route, 0])
        paths.append((order, _ROUTE_COLORS[i % len(_ROUTE_COLORS)]))
    return _svg_document(coords, paths, closed=False)


# ---------------------------------------------------------------------------
# Subcommands

def cmd_generate(args) -> int:
    out = Path(args.out)
    if args.cvrp:
        instances = [generate_cvrp(args.n, seed=args.seed + i,
                                   name=f"cvrp{args.n}-{args.seed + i}")
                     for i in range(args.count)]
    else:
        instances = [generate_uniform(args.n, seed=args.seed + i, metric=args.metric,
                                      name=f"{args.metric}{args.n}-{args.seed + i}")
                     for i in range(args.count)]
    with atomic_write(out) as fh:
        for inst in instances:
            from .instances import instance_to_record
            fh.write(json.dumps(instance_to_record(inst)) + "\n")
    write_manifest(out, "generate", vars(args))
    print(f"wrote {len(instances)} instances to {out}")
    return 0


_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"model"}


def _build_train_config(args) -> TrainConfig:
    base = PRESETS[args.preset]() if args.preset else TrainConfig()
    overrides = parse_config_file(args.config) if args.config else {}
    train_kv = {}
    model_kv = {}
    for key, val in overrides.items():
        if key.startswith("model."):
            sub = key[len("model."):]
            if sub not in _MODEL_KEYS:
                raise ConfigError(f"unknown model config key {key!r}")
            model_kv[sub] = val
        elif key in _TRAIN_KEYS:
            train_kv[key] = val
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if args.seed is not None:
        train_kv["seed"] = args.seed
    if args.out_dir is not None:
        train_kv["out_dir"] = args.out_dir
    if args.epochs is not None:
        train_kv["epochs"] = args.epochs
    try:
        model = dataclasses.replace(base.model, **model_kv)
        return dataclasses.replace(base, model=model, **train_kv)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = _build_train_config(args)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir, "train", dataclasses.asdict(cfg))
    resume = args.resume
    if resume is not None and not Path(resume).exists():
        raise ConfigError(f"resume checkpoint {resume} not found")
    best = train(cfg, resume=resume)
    print(f"best validation mean length: {best.best_val:.6f} "
          f"(params: {best.params.num_parameters()})")
    print(f"checkpoints in {out_dir}")
    return 0


def _load_params(path):
    try:
        return load_checkpoint(path).params
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint {path} not found") from exc


def _solve_single(inst, params, args, beam_cfg, seed):
    """Solve one TSP instance; returns (tour, length in original units, seconds)."""
    if isinstance(inst, TspInstance) and inst.metric not in ("euclid", "manhattan"):
        print(f"note: model applied to metric={inst.metric} instance "
              f"{inst.name or '?'} (zero-shot)", file=sys.stderr)
    model_inst = inst
    if args.normalize:
        if not isinstance(inst, TspInstance):
            raise ConfigError("--normalize applies to TSP instances only")
        model_inst = normalize_coords(inst)
    t0 = time.perf_counter()
    out = forward_batch([model_inst], params, mode="eval")[0]
    if isinstance(inst, CvrpInstance):
        sol = cvrp_decode(out, inst, policy="greedy" if args.policy != "sample"
                          else "sample", seed=seed)
        validate_cvrp_solution(sol, inst)
        combined = TspInstance(coords=inst.all_coords())
        length = cvrp_route_length(sol, distance_matrix(combined))
        return sol, length, time.perf_counter() - t0
    dm_model = distance_matrix(model_inst)
    if args.policy == "greedy":
        tour = greedy_decode(out).tour
    elif args.policy == "sample":
        tour = sample_decode(out, seed).tour
    else:
        tour = beam_decode(out, beam_cfg, dm=dm_model)
    length = tour_length(tour, distance_matrix(inst))  # original units
    return tour, length, time.perf_counter() - t0


def cmd_solve(args) -> int:
    params = _load_params(args.checkpoint)
    instances = load_instances(args.input, args.format)
    beam_cfg = BeamConfig(width=args.beam_width, final_rule=args.final_rule)
    svg_path = Path(args.svg) if args.svg else None

    def work(item):
        i, inst = item
        return i, inst, _solve_single(inst, params, args, beam_cfg,
                                      np.random.default_rng([args.seed, i]))

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(work, enumerate(instances)))
    else:
        results = [work(item) for item in enumerate(instances)]

    for i, inst, (solution, length, secs) in results:
        name = inst.name or f"instance{i}"
        if isinstance(inst, CvrpInstance):
            print(f"{name} n={inst.n} routes={len(solution.routes)} "
                  f"length={length:.6f} time={secs:.3f}s")
            print("  " + " | ".join(" ".join(map(str, r)) for r in solution.routes))
        else:
            print(f"{name} n={inst.n} policy={args.policy} "
                  f"length={length:.6f} time={secs:.3f}s")
            print("  tour: " + " ".join(map(str, solution)))
        if svg_path is not None:
            target = svg_path if len(instances) == 1 and svg_path.suffix == ".svg" \
                else svg_path / f"{name}.svg"
            doc = render_routes_svg(inst, solution.routes) \
                if isinstance(inst, CvrpInstance) \
                else render_tour_svg(inst.coords, solution)
            with atomic_write(target) as fh:
                fh.write(doc)
    if svg_path is not None:
        print(f"svg written under {svg_path}")
    return 0


def _oracle_lengths(instances, mode: str):
    if mode == "none":
        return None, "none"
    if mode == "auto":
        n = max(i.n for i in instances)
        if n <= HELD_KARP_MAX_N:
            mode = "held_karp"
        else:
            mode = "reference"
    if mode == "held_karp":
        return np.array([held_karp(i).length for i in instances]), "held_karp"
    if mode == "brute_force":
        return np.array([brute_force(i).length for i in instances]), "brute_force"
    if mode == "reference":
        # improvement-polished construction; a reference bound, not an optimum
        vals = []
        for inst in instances:
            dm = distance_matrix(inst)
            vals.append(tour_length(two_opt(farthest_insertion(dm), dm), dm))
        return np.array(vals), "reference"
    raise ConfigError(f"unknown oracle mode {mode!r}")


def cmd_eval(args) -> int:
    params = _load_params(args.checkpoint)
    instances = load_instances(args.input, args.format)
    if any(isinstance(i, CvrpInstance) for i in instances):
        raise ConfigError("eval handles TSP instances; use solve for CVRP")
    oracle_lengths, oracle_name = _oracle_lengths(instances, args.oracle)
    beam_cfg = BeamConfig(width=args.beam_width, final_rule=args.final_rule)
    report = evaluate(params, instances, policy=args.policy, beam=beam_cfg,
                      seed=args.seed, oracle_lengths=oracle_lengths,
                      all_starts=args.all_starts, measure_single=True)
    out = Path(args.out)
    with atomic_write(out) as fh:
        writer = csv.writer(fh)
        header = ["name", "n", "length"]
        if oracle_lengths is not None:
            header += ["oracle_length", "gap"]
        if args.all_starts:
            header += ["start_min", "start_mean", "start_max"]
        writer.writerow(header)
        for i, inst in enumerate(instances):
            row = [inst.name or f"instance{i}", inst.n, f"{report.lengths[i]:.6f}"]
            if oracle_lengths is not None:
                row += [f"{oracle_lengths[i]:.6f}",
                        f"{report.lengths[i] / oracle_lengths[i] - 1.0:.6f}"]
            if args.all_starts:
                row += [f"{report.start_min[i]:.6f}", f"{report.start_mean[i]:.6f}",
                        f"{report.start_max[i]:.6f}"]
            writer.writerow(row)
        summary = ["summary", len(instances), f"{report.mean_length:.6f}"]
        if oracle_lengths is not None:
            summary += [f"{report.oracle_mean:.6f}", f"{report.gap:.6f}"]
        if args.all_starts:
            summary += [f"{report.start_min.mean():.6f}",
                        f"{report.start_mean.mean():.6f}",
                        f"{report.start_max.mean():.6f}"]
        writer.writerow(summary)
    write_manifest(out, "eval", vars(args) | {"oracle_used": oracle_name})
    gap_text = f" gap={report.gap:.2%} vs {oracle_name}" if report.gap is not None else ""
    print(f"mean length {report.mean_length:.6f}{gap_text}; "
          f"S time {report.s_time_mean:.4f}s, T time {report.t_time:.3f}s")
    print(f"per-instance results in {out}")
    return 0


def cmd_bench(args) -> int:
    params = _load_params(args.checkpoint)
    sizes = [int(s) for s in args.sizes.split(",")]
    widths = [int(w) for w in args.beam_widths.split(",")]
    batches = [int(b) for b in args.batch_sizes.split(",")]
    rows = []
    for n in sizes:
        for width in widths:
            instances = [generate_uniform(n, seed=args.seed + i)
                         for i in range(args.count)]
            beam_cfg = BeamConfig(width=width)
            try:
                singles = []
                for _ in range(args.repeats):
                    rep = evaluate(params, instances, policy="beam" if width > 1
                                   else "greedy", beam=beam_cfg, seed=args.seed,
                                   measure_single=True)
                    singles.append(rep.s_time_mean)
                s_time = float(np.median(singles))
                for batch in batches:
                    rep = evaluate(params, instances, policy="beam" if width > 1
                                   else "greedy", beam=beam_cfg, seed=args.seed,
                                   chunk=batch)
                    rows.append((n, width, batch, s_time, rep.t_time))
            except MemoryError:
                rows.append((n, width, 0, float("nan"), float("nan")))
                print(f"skipped n={n} B={width}: out of memory", file=sys.stderr)
    out = Path(args.out)
    with atomic_write(out) as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "beam_width", "batch", "mean_s_time", "total_t_time"])
        for row in rows:
            writer.writerow(row)
    write_manifest(out, "bench", vars(args))
    print(f"bench results in {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tournet",
        description="GNN tour solver: generate, train, solve, eval, bench")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write random instances as JSON lines")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metric", choices=("euclid", "manhattan"), default="euclid")
    p.add_argument("--cvrp", action="store_true", help="generate CVRP instances")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--config", default=None, help="flat key=value file")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("solve", help="solve instances with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help=".tsp or .jsonl file")
    p.add_argument("--format", choices=("auto", "tsplib", "jsonl"), default="auto")
    p.add_argument("--policy", choices=("greedy", "sample", "beam"), default="greedy")
    p.add_argument("--beam-width", type=int, default=100)
    p.add_argument("--final-rule", choices=("shortest_tour", "highest_prob"),
                   default="shortest_tour")
    p.add_argument("--normalize", action="store_true",
                   help="rescale coords to the unit square before the model; "
                        "lengths still reported in original units")
    p.add_argument("--svg", default=None, help="write tour drawing(s) here")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("eval", help="score instances, optional oracle gap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("auto", "tsplib", "jsonl"), default="auto")
    p.add_argument("--policy", choices=("greedy", "sample", "beam"), default="greedy")
    p.add_argument("--beam-width", type=int, default=100)
    p.add_argument("--final-rule", choices=("shortest_tour", "highest_prob"),
                   default="shortest_tour")
    p.add_argument("--oracle", choices=("auto", "held_karp", "brute_force",
                                        "reference", "none"), default="auto")
    p.add_argument("--all-starts", action="store_true",
                   help="also report min/mean/max over every starting node")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="per-instance CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency sweep over sizes and beam widths")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sizes", default="50,100,200,500")
    p.add_argument("--beam-widths", default="1")
    p.add_argument("--batch-sizes", default="64")
    p.add_argument("--count", type=int, default=5,
                   help="instances per (n, B) cell")
    p.add_argument("--repeats", type=int, default=5,
                   help="repeats for the single-instance timing median")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InstanceError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
