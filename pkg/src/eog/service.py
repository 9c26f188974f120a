"""HTTP reward sidecar: score traces against preloaded tasks."""
from __future__ import annotations

from typing import Literal, Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .kg import KnowledgeGraph, TaskInstance
from .rewards import RewardConfig, reward_record, score_text

__all__ = ["create_app", "ScoreRequest", "BatchRequest"]


class Overrides(BaseModel):
    alpha: Optional[float] = None
    phase: Optional[Literal["outcome_only", "joint"]] = None
    overlong_threshold: Optional[int] = None
    overlong_penalty_per_token: Optional[float] = None
    overlong_penalty_cap: Optional[float] = None


class ScoreRequest(BaseModel):
    id: str
    text: str
    overrides: Optional[Overrides] = None


class BatchRequest(BaseModel):
    items: list[ScoreRequest] = Field(default_factory=list)


def create_app(graph: KnowledgeGraph | None, tasks: dict[str, TaskInstance] | list[TaskInstance], reward_cfg: RewardConfig | None = None) -> FastAPI:
    """Build the app over immutable in-memory graph and tasks."""
    if not isinstance(tasks, dict):
        tasks = {t.id: t for t in tasks}
    base_cfg = reward_cfg or RewardConfig()
    app = FastAPI(title="eog reward service")

    @app.exception_handler(RequestValidationError)
    async def _bad_request(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": "malformed request", "detail": exc.errors()})

    def score_one(req: ScoreRequest) -> dict:
        task = tasks.get(req.id)
        if task is None:
            raise HTTPException(status_code=404, detail=f"unknown task id {req.id!r}")
        cfg = base_cfg
        if req.overrides is not None:
            try:
                cfg = base_cfg.override(**req.overrides.model_dump())
            except ValueError as exc:
                raise HTTPException(status_code=400, detail=str(exc)) from None
        return reward_record(req.id, score_text(req.text, task, cfg))

    @app.post("/v1/score")
    def score(req: ScoreRequest):
        return score_one(req)

    @app.post("/v1/score_batch")
    def score_batch(req: BatchRequest):
        missing = [it.id for it in req.items if it.id not in tasks]
        if missing:
            raise HTTPException(status_code=404, detail=f"unknown task ids: {', '.join(missing)}")
        return {"results": [score_one(it) for it in req.items]}

    @app.get("/healthz")
    def healthz():
        stats = graph.stats() if graph is not None else {}
        return {"status": "ok", "n_tasks": len(tasks), **stats}

    return app
