"""HTTP service: run submission, snapshots, panel bytes, streaming progress
events, and user-in-the-loop corrections."""

from __future__ import annotations

import json
import logging
import os
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from pathlib import Path
from typing import Any, Iterator

from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, Response, StreamingResponse
from pydantic import BaseModel, Field

from .artifacts import ArtifactStore
from .audit import load_prompt_templates
from .config import RunConfig, build_suite
from .director import Director, UserCorrection
from .errors import BadIndex, EngineError, MalformedJson, UnknownRun
from .memory import STATUS_AWAITING_USER, STATUS_DONE, STATUS_FAILED, SharedMemory
from .report import report_json
from .schema import parse_story_script

log = logging.getLogger(__name__)

TERMINAL = (STATUS_DONE, STATUS_FAILED)


class EngineService:
    """Owns the shared memory, the backend suite, and one worker per active run."""

    def __init__(self, config: RunConfig, *, runs_root: str | Path | None = None):
        self.config = config
        self.store = ArtifactStore()
        root = Path(runs_root) if runs_root is not None else config.resolve(config.runs_root)
        self.memory = SharedMemory(root, self.store)
        self.suite = build_suite(config, self.store)
        self.director = Director(
            memory=self.memory,
            suite=self.suite,
            templates=load_prompt_templates(config.prompts_dir and config.resolve(config.prompts_dir)),
            controller=config.scale_controller(),
        )
        self._pool = ThreadPoolExecutor(max_workers=8, thread_name_prefix="pipeline")
        self._tasks: dict[str, Future] = {}
        self._tasks_lock = threading.Lock()

    # -- task bookkeeping ------------------------------------------------------

    def is_busy(self, run_id: str) -> bool:
        with self._tasks_lock:
            task = self._tasks.get(run_id)
            return task is not None and not task.done()

    def _submit(self, run_id: str, fn) -> None:
        with self._tasks_lock:
            if run_id in self._tasks and not self._tasks[run_id].done():
                raise RuntimeError(f"run {run_id} already has an active task")
            self._tasks[run_id] = self._pool.submit(fn)

    # -- operations --------------------------------------------------------------

    def start_run(self, script_doc: Any, overrides: dict[str, Any] | None = None) -> str:
        text = script_doc if isinstance(script_doc, str) else json.dumps(script_doc)
        script = parse_story_script(text, strict=not self.config.lenient_parse)
        director_config = self.config.director_config(**(overrides or {}))
        run_id = self.director.start_run(script, director_config, engine_config=self.config.engine_dict())
        self._submit(run_id, lambda: self.director.resume(run_id))
        return run_id

    def submit_corrections(self, run_id: str, corrections: list[UserCorrection]) -> None:
        state = self.memory.snapshot(run_id)  # raises UnknownRun
        if self.is_busy(run_id) or state.status not in (STATUS_DONE, STATUS_AWAITING_USER):
            raise RunBusy(f"run {run_id} is {state.status}; corrections need a finished run")
        valid = {p.index for p in state.panels}
        for c in corrections:
            if c.panel_index not in valid:
                raise BadIndex(f"panel {c.panel_index} not in run {run_id}")
        self._submit(run_id, lambda: self.director.ingest_user_corrections(run_id, corrections))

    def wait(self, run_id: str, timeout: float | None = None) -> None:
        with self._tasks_lock:
            task = self._tasks.get(run_id)
        if task is not None:
            task.result(timeout=timeout)

    def close(self) -> None:
        self._pool.shutdown(wait=False, cancel_futures=True)


class RunBusy(EngineError):
    pass


class CorrectionBody(BaseModel):
    panel_index: int = Field(ge=1)
    instruction: str = Field(min_length=1)


class CorrectionsRequest(BaseModel):
    corrections: list[CorrectionBody]


class RunRequest(BaseModel):
    script: dict[str, Any] | str
    config: dict[str, Any] | None = None


def snapshot_view(state, run_id: str) -> dict[str, Any]:
    """Snapshot JSON with image bytes replaced by URLs."""
    return {
        "run_id": state.run_id,
        "status": state.status,
        "iteration": state.iteration,
        "ci_history": state.ci_history,
        "error": state.error,
        "reference_url": f"/runs/{run_id}/reference" if state.reference else None,
        "panels": [
            {
                "index": p.index,
                "url": f"/runs/{run_id}/panels/{p.index}",
                "media_type": p.image.media_type,
                "content_hash": p.image.hex_hash,
                "conditioning_scale": p.conditioning_scale,
                "attempt_count": p.attempt_count,
                "skipped": p.skipped,
                "last_refined_prompt": p.last_refined_prompt,
            }
            for p in state.panels
        ],
        "latest_report": state.latest_report.to_dict() if state.latest_report else None,
        "edit_log_length": len(state.edit_log),
        "num_panels": state.script.num_panels,
    }


def create_app(engine: EngineService) -> FastAPI:
    app = FastAPI(title="storymend")
    app.state.engine = engine

    required_token = ""
    token_env = engine.config.service.get("auth_token_env")
    if token_env:
        required_token = os.environ.get(token_env, "")

    async def check_auth(request: Request) -> None:
        if not required_token:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {required_token}":
            raise HTTPException(status_code=401, detail="missing or invalid bearer token")

    dependencies = [Depends(check_auth)]

    @app.exception_handler(UnknownRun)
    async def unknown_run(_, exc):
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.exception_handler(RunBusy)
    async def run_busy(_, exc):
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    @app.exception_handler(BadIndex)
    async def bad_index(_, exc):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.exception_handler(EngineError)
    async def engine_error(_, exc):
        return JSONResponse(status_code=422, content={"detail": f"{type(exc).__name__}: {exc}"})

    @app.post("/runs", status_code=201, dependencies=dependencies)
    def create_run(body: RunRequest):
        try:
            run_id = engine.start_run(body.script, body.config)
        except (MalformedJson, EngineError) as exc:
            raise HTTPException(status_code=422, detail=f"{type(exc).__name__}: {exc}") from exc
        return {"run_id": run_id}

    @app.get("/runs", dependencies=dependencies)
    def list_runs():
        runs = []
        for run_id in engine.memory.list_runs():
            state = engine.memory.snapshot(run_id)
            runs.append({
                "run_id": run_id,
                "status": state.status,
                "iteration": state.iteration,
                "ci": state.ci_history[-1] if state.ci_history else None,
            })
        return {"runs": runs}

    @app.get("/runs/{run_id}", dependencies=dependencies)
    def get_run(run_id: str):
        return snapshot_view(engine.memory.snapshot(run_id), run_id)

    @app.get("/runs/{run_id}/events", dependencies=dependencies)
    def stream_events(run_id: str, since: int = 0, follow: bool = True):
        engine.memory.snapshot(run_id)  # 404 before streaming starts

        def stopped() -> bool:
            if engine.is_busy(run_id):
                return False
            return engine.memory.snapshot(run_id).status in TERMINAL

        def generate() -> Iterator[bytes]:
            if follow:
                source = engine.memory.follow(run_id, since=since, stop=stopped)
            else:
                source = (e for e in engine.memory.events(run_id)[since:])
            for event in source:
                yield (json.dumps(event, ensure_ascii=False) + "\n").encode("utf-8")

        return StreamingResponse(generate(), media_type="application/x-ndjson")

    @app.get("/runs/{run_id}/panels/{index}", dependencies=dependencies)
    def get_panel(run_id: str, index: int):
        state = engine.memory.snapshot(run_id)
        try:
            panel = state.panel(index)
        except BadIndex:
            raise HTTPException(status_code=404, detail=f"no panel {index}") from None
        return Response(content=engine.store.get(panel.image), media_type=panel.image.media_type)

    @app.get("/runs/{run_id}/reference", dependencies=dependencies)
    def get_reference(run_id: str):
        state = engine.memory.snapshot(run_id)
        if state.reference is None:
            raise HTTPException(status_code=404, detail="reference not generated yet")
        return Response(content=engine.store.get(state.reference), media_type=state.reference.media_type)

    @app.get("/runs/{run_id}/report", dependencies=dependencies)
    def get_report(run_id: str):
        state = engine.memory.snapshot(run_id)
        if state.latest_report is None:
            raise HTTPException(status_code=404, detail="no report yet")
        return Response(content=report_json(state.latest_report), media_type="application/json")

    @app.post("/runs/{run_id}/corrections", status_code=202, dependencies=dependencies)
    def post_corrections(run_id: str, body: CorrectionsRequest):
        corrections = [UserCorrection(c.panel_index, c.instruction) for c in body.corrections]
        engine.submit_corrections(run_id, corrections)
        return {"accepted": len(corrections)}

    return app
