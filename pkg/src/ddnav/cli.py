"""Command-line entry point: ``ddnav <command> [flags]``.

Settings resolve as flags > ``--config`` JSON file > ``DDNAV_*`` environment
variables > defaults, and the resolved values are printed to stderr at startup.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

from ddnav.errors import ConfigError, DDNavError
from ddnav.eval import (
    ABLATIONS,
    DETECT_FILTERS,
    Backend,
    EpisodeConfig,
    bootstrap_kb,
    episode_pool,
    run_ablations,
    run_episode,
    run_reflection_rounds,
    run_suite,
)
from ddnav.knowledge import KnowledgeBase, export_sft
from ddnav.report import (
    ablation_document,
    dumps,
    load_document,
    plot_trajectory,
    render_figures,
    render_table,
    rounds_document,
    suite_document,
    write_tsv,
)
from ddnav.world import SceneConfig, default_ontology, generate_scene, load_ontology, load_scene, save_scene

logger = logging.getLogger("ddnav")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "backend": "rule",
    "parallelism": 1,
    "max_steps": 200,
    "count": 100,
    "rounds": 2,
    "detect": None,
    "ontology": None,
    "width": 16,
    "depth": 16,
    "density": 0.1,
    "rooms": 2,
    "low_bias": 0.0,
}
_INT = {"seed", "parallelism", "max_steps", "count", "rounds", "width", "depth", "rooms"}
_FLOAT = {"density", "low_bias"}


def _env_value(key: str) -> Any:
    raw = os.environ.get(f"DDNAV_{key.upper()}")
    if raw is None:
        return None
    try:
        if key in _INT:
            return int(raw)
        if key in _FLOAT:
            return float(raw)
    except ValueError:
        raise ConfigError(f"DDNAV_{key.upper()}={raw!r} is not a number") from None
    return raw


def resolve_settings(args: argparse.Namespace) -> dict[str, tuple[Any, str]]:
    """Fill unset flags from the config file, the environment, then defaults."""
    file_cfg: dict = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"config file {args.config} must hold a JSON object")
    resolved: dict[str, tuple[Any, str]] = {}
    for key, default in DEFAULTS.items():
        if not hasattr(args, key):
            continue
        flag = getattr(args, key)
        if flag is not None:
            resolved[key] = (flag, "flag")
        elif key in file_cfg:
            resolved[key] = (file_cfg[key], "config")
        elif (env := _env_value(key)) is not None:
            resolved[key] = (env, "env")
        else:
            resolved[key] = (default, "default")
        setattr(args, key, resolved[key][0])
    return resolved


# --------------------------------------------------------------------------- helpers


def _scene_files(directory: str | Path) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"scene directory {d} does not exist")
    files = sorted(d.glob("*.json"))
    if not files:
        raise ConfigError(f"no scene files (*.json) in {d}")
    return files


def _load_scenes(directory, ontology):
    return [load_scene(p, ontology) for p in _scene_files(directory)]


def _instructions(path: str | None, ontology) -> list[str] | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"instruction file {p} does not exist")
    lines = [ln.strip() for ln in p.read_text(encoding="utf-8").splitlines()]
    phrases = [ln for ln in lines if ln and not ln.startswith("#")]
    if not phrases:
        raise ConfigError(f"instruction file {p} is empty")
    return phrases


def _check_out(path: str | None) -> None:
    if path is None:
        return
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise ConfigError(f"output directory {parent} does not exist")


def _ablation_kw(args) -> dict:
    return {
        "no_cot": args.no_cot,
        "no_exploit_ft": args.no_exploit or args.exploit_sequence,
        "exploit_sequence": args.exploit_sequence,
        "no_reflection": args.no_reflection,
    }


def _pool(args, ontology):
    scenes = _load_scenes(args.scenes, ontology)
    unseen = []
    if args.unseen_scenes:
        unseen = _load_scenes(args.unseen_scenes, ontology)
    phrases = _instructions(args.instructions, ontology)
    return episode_pool(scenes + unseen, ontology, count=args.count, seed=args.seed, phrases=phrases,
                        unseen_scenes={s.name for s in unseen}, detect=args.detect, max_steps=args.max_steps,
                        backend=args.backend, **_ablation_kw(args))


def _write(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# --------------------------------------------------------------------------- commands


def cmd_gen_scenes(args, ontology) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = SceneConfig(width=args.width, depth=args.depth, density=args.density, rooms=args.rooms,
                      low_bias=args.low_bias)
    cfg.check()
    for i in range(args.count):
        seed = args.seed * 10007 + i
        scene = generate_scene(seed, cfg, ontology, name=f"scene-{seed:05d}")
        save_scene(scene, out / f"{scene.name}.json")
    _progress(f"wrote {args.count} scenes to {out}")
    return 0


def cmd_bootstrap(args, ontology) -> int:
    scenes = _load_scenes(args.scenes, ontology)
    kb = KnowledgeBase(args.kb)
    added = bootstrap_kb(scenes, kb, ontology, seed=args.seed, parallelism=args.parallelism,
                         phrases=_instructions(args.instructions, ontology))
    _progress(f"bootstrapped {added} experiences from {len(scenes)} scenes; knowledge base now holds {kb.count}")
    return 0


def cmd_run(args, ontology) -> int:
    scene = load_scene(args.scene, ontology)
    cfg = EpisodeConfig(scene=scene, instruction=args.instruction, spawn_index=args.spawn, max_steps=args.max_steps,
                        seed=args.seed, backend=args.backend, start_yaw=args.yaw, **_ablation_kw(args))
    with Backend(args.backend, ontology) as backend:
        result = run_episode(cfg, reasoner=backend.reasoner(cfg.flags), ontology=ontology)
    _write(args.out, json.dumps(result.to_dict(), indent=1, sort_keys=True) + "\n")
    if args.plot:
        plot_trajectory(scene, result, args.plot)
    status = "success" if result.nav_success else "failure"
    _progress(f"{status}: {result.steps} steps, {result.hindrance_count} hindrances, selected {result.selected}")
    return 0


def _settings_dict(args) -> dict:
    keys = ("seed", "backend", "count", "max_steps", "detect", "rounds")
    d = {k: getattr(args, k) for k in keys if hasattr(args, k)}
    d.update(_ablation_kw(args))
    return d


def cmd_suite(args, ontology) -> int:
    configs = _pool(args, ontology)
    _progress(f"running {len(configs)} episodes (parallelism {args.parallelism})")
    with Backend(args.backend, ontology) as backend:
        if args.ablations:
            rows = run_ablations(configs, args.parallelism, backend=backend)
            doc = ablation_document(rows, _settings_dict(args))
        else:
            report, results = run_suite(configs, args.parallelism, backend=backend)
            doc = suite_document(report, results, _settings_dict(args))
            if args.trajectories:
                with open(args.trajectories, "w", encoding="utf-8") as fh:
                    for r in results:
                        fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    _write(args.out, dumps(doc))
    _progress(render_table(doc).rstrip())
    return 0


def cmd_rounds(args, ontology) -> int:
    configs = _pool(args, ontology)
    kb = KnowledgeBase(args.kb)
    before = kb.count
    with Backend(args.backend, ontology) as backend:
        rounds = run_reflection_rounds(configs, args.rounds, kb, parallelism=args.parallelism, backend=backend)
    doc = rounds_document(rounds, _settings_dict(args))
    _write(args.out, dumps(doc))
    _progress(render_table(doc).rstrip())
    _progress(f"knowledge base: {before} -> {kb.count} experiences")
    return 0


def cmd_export(args, ontology) -> int:
    kb_path = Path(args.kb)
    if not kb_path.is_file():
        raise ConfigError(f"knowledge base {kb_path} does not exist")
    n = export_sft(KnowledgeBase(kb_path), args.out)
    _progress(f"exported {n} records to {args.out}")
    return 0


def cmd_report(args, ontology) -> int:
    doc = load_document(args.input)
    table = render_table(doc)
    sys.stdout.write(table)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tsv(doc, out / "table.tsv")
    for p in render_figures(doc, out):
        _progress(f"wrote {p}")
    return 0


# --------------------------------------------------------------------------- parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="base random seed (default 0)")
    p.add_argument("--config", help="JSON file with default settings")
    p.add_argument("--ontology", help="ontology JSON (default: shipped ontology)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def _add_episode(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=("rule", "mock", "llm"), help="reasoner backend (default rule)")
    p.add_argument("--max-steps", type=int, dest="max_steps", help="step budget per episode (default 200)")
    p.add_argument("--no-cot", action="store_true", help="drop description/reasoning stages")
    p.add_argument("--no-exploit", action="store_true", help="generic exploit reasoner (single action)")
    p.add_argument("--exploit-sequence", action="store_true", help="generic exploit reasoner (open-loop sequence)")
    p.add_argument("--no-reflection", action="store_true", help="disable reflection after hindrances")


def _add_pool(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenes", required=True, help="directory of scene JSON files")
    p.add_argument("--unseen-scenes", help="second scene directory reported as the unseen split")
    p.add_argument("--instructions", help="text file with one demand phrase per line")
    p.add_argument("--count", type=int, help="episodes to sample (default 100)")
    p.add_argument("--detect", choices=DETECT_FILTERS, help="keep only episodes whose target is found early")
    p.add_argument("--parallelism", type=int, help="concurrent episodes (default 1)")
    p.add_argument("--out", help="report JSON path (default stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddnav", description="Demand-driven grid navigation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="generate random scenes")
    _add_common(p)
    p.add_argument("--count", type=int, help="number of scenes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--width", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--density", type=float, help="fraction of free cells covered by objects")
    p.add_argument("--rooms", type=int)
    p.add_argument("--low-bias", type=float, dest="low_bias", help="extra weight for low-profile objects")
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("bootstrap-kb", help="fill a knowledge base from A* trajectories")
    _add_common(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--kb", required=True, help="knowledge base JSONL path")
    p.add_argument("--instructions")
    p.add_argument("--parallelism", type=int)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("run", help="run a single episode")
    _add_common(p)
    _add_episode(p)
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--instruction", required=True)
    p.add_argument("--spawn", type=int, default=0)
    p.add_argument("--yaw", type=int, choices=range(0, 360, 30), help="start yaw (default: from seed)")
    p.add_argument("--out", help="episode JSON path (default stdout)")
    p.add_argument("--plot", help="write a trajectory figure to this PNG path")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("suite", help="run an episode pool and report NSR/SPL/SSR")
    _add_common(p)
    _add_episode(p)
    _add_pool(p)
    p.add_argument("--ablations", action="store_true", help="emit one row per ablation: " + ", ".join(ABLATIONS))
    p.add_argument("--trajectories", help="JSONL file for per-episode trajectories")
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("reflect-rounds", help="replay a pool for several reflection rounds")
    _add_common(p)
    _add_episode(p)
    _add_pool(p)
    p.add_argument("--rounds", type=int, help="number of rounds (default 2)")
    p.add_argument("--kb", required=True, help="knowledge base JSONL path")
    p.set_defaults(func=cmd_rounds)

    p = sub.add_parser("export-sft", help="export the knowledge base as question/answer records")
    _add_common(p)
    p.add_argument("--kb", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("report", help="print the table and render figures for a report JSON")
    _add_common(p)
    p.add_argument("--input", required=True, help="report JSON from suite or reflect-rounds")
    p.add_argument("--out-dir", required=True, dest="out_dir", help="directory for table.tsv and figures")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve_settings(args)
        _progress("settings: " + ", ".join(f"{k}={v!r} ({src})" for k, (v, src) in sorted(settings.items())))
        for attr in ("out", "trajectories", "plot"):
            if attr != "out" or args.command != "gen-scenes":
                _check_out(getattr(args, attr, None))
        ontology = load_ontology(args.ontology) if args.ontology else default_ontology()
        return args.func(args, ontology)
    except (DDNavError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
