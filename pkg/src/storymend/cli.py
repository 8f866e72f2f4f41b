"""Command-line surface: run pipelines, re-audit, apply corrections,
compute metrics, serve the HTTP API, validate scenario files."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

from .artifacts import ArtifactStore
from .audit import AuditAgent, load_prompt_templates
from .backends.scenario import load_scenario
from .config import RunConfig, build_suite, load_config
from .director import Director, UserCorrection
from .errors import EngineError
from .memory import SharedMemory
from .metrics import (
    StoryMetrics,
    aggregate_corpus,
    attach_external_scores,
    foreground_masked_metrics,
    load_scores_file,
    render_csv,
    render_markdown,
    story_metrics,
)
from .schema import parse_story_script

log = logging.getLogger(__name__)


def _emit(payload: dict[str, Any], as_json: bool) -> None:
    if as_json:
        print(json.dumps(payload, indent=2, ensure_ascii=False, default=str))
    else:
        for key, value in payload.items():
            print(f"{key}: {value}")


def _load_run(run_dir: Path) -> tuple[SharedMemory, Any, Any]:
    """Load a persisted run and rebuild its backend suite from run config."""
    store = ArtifactStore()
    memory = SharedMemory(run_dir.parent, store)
    state = memory.load_run(run_dir)
    engine_cfg = state.config.get("engine")
    if not engine_cfg:
        raise EngineError(f"{run_dir}: run config carries no engine section; pass --config")
    suite = build_suite(engine_cfg, store)
    return memory, state, suite


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    text = Path(args.script).read_text()
    script = parse_story_script(text, strict=not (args.lenient or config.lenient_parse))
    store = ArtifactStore()
    memory = SharedMemory(config.resolve(config.runs_root), store)
    suite = build_suite(config, store)
    director = Director(
        memory=memory,
        suite=suite,
        templates=load_prompt_templates(config.prompts_dir and config.resolve(config.prompts_dir)),
        controller=config.scale_controller(),
    )
    state = director.run_pipeline(
        script,
        config.director_config(seed=args.seed),
        run_id=args.run_id,
        engine_config=config.engine_dict(),
    )
    _emit({
        "run_id": state.run_id,
        "run_dir": str(memory.run_dir(state.run_id)),
        "status": state.status,
        "iterations": state.iteration,
        "ci_history": state.ci_history,
        "error": state.error,
    }, args.json)
    return 0 if state.status == "done" else 1


def cmd_audit(args: argparse.Namespace) -> int:
    memory, state, suite = _load_run(Path(args.run_dir))
    prompts_dir = state.config.get("engine", {}).get("prompts_dir")
    agent = AuditAgent(suite=suite, templates=load_prompt_templates(prompts_dir))
    report = agent.run_audit(memory, state.run_id)
    _emit({
        "run_id": state.run_id,
        "audit_iteration": report.audit_iteration,
        "ci": report.ci,
        "repairable_panels": report.repairable_indexes(),
    }, args.json)
    return 0


def cmd_repair(args: argparse.Namespace) -> int:
    memory, state, suite = _load_run(Path(args.run_dir))
    prompts_dir = state.config.get("engine", {}).get("prompts_dir")
    director = Director(memory=memory, suite=suite, templates=load_prompt_templates(prompts_dir))
    result = director.ingest_user_corrections(
        state.run_id, [UserCorrection(panel_index=args.panel, instruction=args.instruction)]
    )
    _emit({
        "run_id": state.run_id,
        "applied_panels": list(result.applied),
        "rejected": [{"panel": p, "reason": r} for p, r in result.rejected],
        "ci": result.final_ci,
    }, args.json)
    return 0 if result.applied else 1


def cmd_metrics(args: argparse.Namespace) -> int:
    scores = load_scores_file(args.scores) if args.scores else {}
    stories: list[StoryMetrics] = []
    excluded: dict[str, list[int]] = {}
    label = args.label
    for run_dir in args.runs:
        run_dir = Path(run_dir)
        if args.config:
            config = load_config(args.config)
            store = ArtifactStore()
            memory = SharedMemory(run_dir.parent, store)
            state = memory.load_run(run_dir)
            suite = build_suite(config, store)
        else:
            memory, state, suite = _load_run(run_dir)
        label = label or state.config.get("engine", {}).get("label", "engine")
        panels = [p.image for p in state.panels]
        embedders = {"dino": suite.embedder}
        if "clip_embedder" in suite.extras:
            embedders["clip_i"] = suite.extras["clip_embedder"]
        distance = suite.extras.get("distance")
        story = StoryMetrics(num_panels=len(panels))
        story.values.update(story_metrics(panels, embedders=embedders, distance=distance))
        if args.fg:
            labels = [c.name for c in state.script.characters]
            fg_values, dropped = foreground_masked_metrics(
                suite.store, suite.segmenter, panels, labels,
                embedders=embedders, distance=distance,
            )
            story.values.update(fg_values)
            story.excluded_panels = dropped
            if dropped:
                excluded[state.run_id] = dropped
        attach_external_scores(story.values, scores.get(state.run_id))
        stories.append(story)
    aggregated = aggregate_corpus(stories)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.csv").write_text(render_csv(aggregated, label=label or "engine"))
    (out_dir / "report.md").write_text(
        render_markdown(aggregated, label=label or "engine", include_fg=args.fg, excluded=excluded)
    )
    _emit({
        "stories": len(stories),
        "metrics": {k: f"{m:.6f}±{s:.6f}" for k, (m, s) in aggregated.items()},
        "report_csv": str(out_dir / "report.csv"),
        "report_md": str(out_dir / "report.md"),
    }, args.json)
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import EngineService, create_app

    config = load_config(args.config)
    engine = EngineService(config)
    app = create_app(engine)
    host, _, port = args.addr.rpartition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level="info")
    return 0


def cmd_scenario_validate(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.file)
    _emit({
        "scenario": scenario.name,
        "entities": sorted(scenario.entities),
        "panels_scripted": sorted(scenario.panels),
        "embedding_mode": scenario.embedding_mode,
        "valid": True,
    }, args.json)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="storymend", description=__doc__)
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the full pipeline on a story script")
    p.add_argument("script", help="story script JSON file")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.add_argument("--run-id", default=None)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--lenient", action="store_true", help="repair near-JSON scripts")
    p.add_argument("--json", action="store_true", help="machine-readable stdout")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("audit", help="run one audit pass on a persisted run")
    p.add_argument("run_dir")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_audit)

    p = sub.add_parser("repair", help="apply a user correction to one panel")
    p.add_argument("run_dir")
    p.add_argument("--panel", type=int, required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_repair)

    p = sub.add_parser("metrics", help="compute consistency metrics over run directories")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--fg", action="store_true", help="also compute foreground-masked variants")
    p.add_argument("--scores", default=None, help="external per-image scores JSON file")
    p.add_argument("--config", default=None, help="override backends config")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--label", default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("serve", help="serve the HTTP API")
    p.add_argument("--addr", default="127.0.0.1:8040")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("scenario", help="scenario file tools")
    scenario_sub = p.add_subparsers(dest="scenario_command", required=True)
    v = scenario_sub.add_parser("validate", help="validate a mock scenario file")
    v.add_argument("file")
    v.add_argument("--json", action="store_true")
    v.set_defaults(fn=cmd_scenario_validate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.fn(args)
    except EngineError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
