"""HTTP face of an oracle session.

Mirrors the socket protocol: ``POST /query`` takes ``{"x": [[...]]}`` and
answers ``{"queries_used": n, "y": [[...]]}``; ``GET /info`` reports the
victim's class count, input shape and the counter; ``GET /cost`` applies the
per-1k price.  Over-budget batches get HTTP 429, shape mismatches 422.
"""

from __future__ import annotations

import math

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field, field_validator

from .errors import BudgetExhaustedError, DimensionError
from .oracle import OracleSession


class QueryRequest(BaseModel):
    x: list[list[float]] = Field(min_length=1)

    @field_validator("x")
    @classmethod
    def _finite_rectangular(cls, rows):
        width = len(rows[0])
        if any(len(r) != width for r in rows):
            raise ValueError("rows must all have the same length")
        if not all(math.isfinite(v) for r in rows for v in r):
            raise ValueError("inputs must be finite")
        return rows


class QueryResponse(BaseModel):
    queries_used: int
    y: list[list[float]]


class InfoResponse(BaseModel):
    class_count: int
    input_shape: list[int]
    queries_used: int
    budget: int | None = None


class CostResponse(BaseModel):
    queries_used: int
    price_per_1k: float
    cost: float


def create_app(session: OracleSession) -> FastAPI:
    app = FastAPI(title="eslab oracle", version="0.1.0")

    @app.post("/query", response_model=QueryResponse)
    def query(req: QueryRequest) -> QueryResponse:
        try:
            y, used = session.query_counted(np.asarray(req.x, dtype=np.float64))
        except BudgetExhaustedError as exc:
            raise HTTPException(status_code=429, detail="budget_exhausted") from exc
        except DimensionError as exc:
            raise HTTPException(status_code=422, detail="bad_shape") from exc
        return QueryResponse(queries_used=used, y=y.tolist())

    @app.get("/info", response_model=InfoResponse)
    def info() -> InfoResponse:
        return InfoResponse(budget=session.budget, **session.info())

    @app.get("/cost", response_model=CostResponse)
    def cost() -> CostResponse:
        return CostResponse(queries_used=session.query_count, price_per_1k=session.price_per_1k,
                            cost=session.estimate_cost())

    return app


def run(session: OracleSession, host: str = "127.0.0.1", port: int = 8000) -> None:
    import uvicorn

    uvicorn.run(create_app(session), host=host, port=port, log_level="warning")
