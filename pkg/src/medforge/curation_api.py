"""HTTP surface for the curation workflow.

Every mutation goes through ``CurationStore.submit_decision``, so the API
adds no state of its own; state-machine conflicts surface as 409s with the
refreshed item attached. Payloads are the canonical record serialization.
"""

from __future__ import annotations

import threading
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Any

from fastapi import FastAPI, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .curation import CurationState, CurationStore, generate_preference_set
from .datamodel import DialogueSample, write_dataset
from .errors import LeakError, StateMachineError
from .gateway import Gateway


class DecisionBody(BaseModel):
    action: str
    reviewer: str
    notes: str = ""
    edited_sample: dict | None = None


class GenerateBody(BaseModel):
    target: int
    fewshot_k: int = 3
    seed: int = 0


class ExportBody(BaseModel):
    stage1_ids: list[str] = []
    path: str | None = None


def _item_summary(item) -> dict:
    sample = item.effective_sample()
    preview = sample.turns[0].content if sample.turns else ""
    return {
        "id": item.id,
        "state": item.state.value,
        "department": sample.department,
        "turn_count": len(sample.turns),
        "rounds": sample.rounds(),
        "preview": preview[:120],
        "reviewer": item.reviewer,
    }


def create_app(
    store: CurationStore,
    gateway: Gateway | None = None,
    generation_backend: str = "",
    ui_dir: str | None = None,
) -> FastAPI:
    @asynccontextmanager
    async def lifespan(_app: FastAPI):
        yield
        store.snapshot()

    app = FastAPI(title="medforge curation api", lifespan=lifespan)
    # The review UI may be served from another origin (dev server, file host).
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"],
    )

    @app.get("/api/queue")
    def queue(
        state: str | None = Query(default=None),
        department: str | None = Query(default=None),
        offset: int = Query(default=0, ge=0),
        limit: int = Query(default=50, ge=1, le=500),
    ) -> dict:
        state_filter = CurationState(state) if state else None
        items = store.items(state=state_filter, department=department)
        return {
            "total": len(items),
            "offset": offset,
            "items": [_item_summary(i) for i in items[offset:offset + limit]],
        }

    @app.get("/api/items/{item_id}")
    def get_item(item_id: str) -> dict:
        try:
            return store.get(item_id).to_record()
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no item {item_id!r}")

    @app.post("/api/items/{item_id}/decision")
    def decide(item_id: str, body: DecisionBody) -> dict:
        edited = None
        if body.edited_sample is not None:
            try:
                edited = DialogueSample.from_record(body.edited_sample)
            except (KeyError, ValueError, TypeError) as exc:
                raise HTTPException(status_code=400, detail=f"malformed edited sample: {exc}")
        try:
            updated = store.submit_decision(
                item_id, body.action, body.reviewer, edited=edited, notes=body.notes
            )
        except StateMachineError as exc:
            raise HTTPException(
                status_code=409,
                detail={"error": str(exc), "item": store.get(item_id).to_record()},
            )
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no item {item_id!r}")
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return updated.to_record()

    @app.post("/api/generate")
    def generate(body: GenerateBody) -> dict:
        if gateway is None or not generation_backend:
            raise HTTPException(status_code=503, detail="no generation backend configured")
        seeds = store.items(state=CurationState.PENDING)
        try:
            created, quarantined = generate_preference_set(
                store,
                seeds=seeds,
                gateway=gateway,
                backend_id=generation_backend,
                target=body.target,
                fewshot_k=body.fewshot_k,
                seed=body.seed,
            )
        except ValueError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return {"created": len(created), "quarantined": len(quarantined)}

    @app.post("/api/export")
    def export(body: ExportBody) -> dict:
        try:
            samples = store.export_stage2(set(body.stage1_ids))
        except LeakError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        result: dict[str, Any] = {
            "count": len(samples),
            "samples": [s.to_record() for s in samples],
        }
        if body.path:
            write_dataset(samples, body.path)
            result["path"] = body.path
        return result

    @app.get("/api/stats")
    def stats() -> dict:
        return store.stats()

    if ui_dir:
        app.mount("/", StaticFiles(directory=Path(ui_dir), html=True), name="ui")

    return app


class CurationServer:
    """Uvicorn server running in a thread; ``stop`` flushes the store."""

    def __init__(self, store: CurationStore, host: str, port: int,
                 gateway: Gateway | None = None, generation_backend: str = "",
                 ui_dir: str | None = None):
        import uvicorn

        self.store = store
        self.app = create_app(store, gateway, generation_backend, ui_dir=ui_dir)
        self._config = uvicorn.Config(self.app, host=host, port=port, log_level="warning")
        self._server = uvicorn.Server(self._config)
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.run, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._server.should_exit = True
        if self._thread is not None:
            self._thread.join(timeout=10)
        self.store.snapshot()

    def run_forever(self) -> None:
        try:
            self._server.run()
        finally:
            self.store.snapshot()


def serve_curation_api(
    store: CurationStore,
    address: str,
    gateway: Gateway | None = None,
    generation_backend: str = "",
) -> CurationServer:
    host, _, port = address.rpartition(":")
    server = CurationServer(store, host or "127.0.0.1", int(port), gateway, generation_backend)
    server.start()
    return server
