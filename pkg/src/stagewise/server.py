"""Local HTTP API for the training cockpit.

One run at a time: the training loop owns its state and publishes
immutable snapshots after every status change and epoch; handlers only
read snapshots.  The LR-choice endpoint feeds the trainer's single-consumer
queue and is valid only while the run is parked in ``awaiting_lr``.
"""

from __future__ import annotations

import queue
import threading
import uuid
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from .data import BatchStream, load_manifest
from .errors import StagewiseError
from .metrics import evaluate
from .optim import LrCurve
from .trainer import Hooks, ProtocolConfig, RunState, run_protocol


class RunManager:
    """Holds the active run's thread, snapshots, curves, and final report."""

    def __init__(self):
        self._lock = threading.Lock()
        self._thread: Optional[threading.Thread] = None
        self.run_id: Optional[str] = None
        self.config_echo: Optional[dict] = None
        self.snapshot: dict = RunState().snapshot()
        self.lr_curves: dict[int, dict] = {}
        self.eval_report: Optional[dict] = None
        self.lr_choices: "queue.Queue[dict]" = queue.Queue()

    # -- state published by the trainer thread ---------------------------------

    def _publish_state(self, state: RunState) -> None:
        with self._lock:
            self.snapshot = state.snapshot()

    def _publish_curve(self, stage: int, curve: LrCurve) -> None:
        with self._lock:
            self.lr_curves[stage] = curve.to_json_dict()

    # -- queries -----------------------------------------------------------------

    def active(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def status(self) -> str:
        with self._lock:
            return self.snapshot["status"]

    def api_run(self) -> dict:
        with self._lock:
            latest = max(self.lr_curves) if self.lr_curves else None
            return {
                "run_id": self.run_id,
                "state": dict(self.snapshot),
                "lr_curve": self.lr_curves.get(latest) if latest is not None
                else None,
                "eval_report": self.eval_report,
                "config": self.config_echo,
            }

    # -- lifecycle ----------------------------------------------------------------

    def start(self, config: ProtocolConfig, interactive: bool) -> str:
        if self.active():
            raise RuntimeError("a run is already active")
        self.run_id = uuid.uuid4().hex[:12]
        self.config_echo = config.to_dict()
        self.lr_curves = {}
        self.eval_report = None
        self.lr_choices = queue.Queue()
        self.snapshot = RunState(total_epochs=config.total_epochs).snapshot()

        hooks = Hooks(
            on_status=self._publish_state,
            on_lr_curve=self._publish_curve,
        )

        def runner():
            try:
                model, state, _ = run_protocol(
                    config, interactive=interactive,
                    lr_choices=self.lr_choices, hooks=hooks)
                manifest = load_manifest(config.manifest_path)
                stream = BatchStream(manifest, "test",
                                     config.stages[-1].image_size,
                                     config.batch_size, stats=config.stats)
                report = evaluate(model, stream)
                with self._lock:
                    self.eval_report = report.to_json_dict()
                    self.snapshot = state.snapshot()
            except Exception as exc:  # surface every failure to pollers
                with self._lock:
                    self.snapshot = dict(self.snapshot)
                    self.snapshot["status"] = "failed"
                    self.snapshot["error"] = str(exc)

        self._thread = threading.Thread(target=runner, daemon=True,
                                        name="stagewise-run")
        self._thread.start()
        return self.run_id


def create_app(manager: Optional[RunManager] = None,
               frontend_dir: Optional[str] = None) -> FastAPI:
    app = FastAPI(title="stagewise")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],     # the cockpit is a local static page
        allow_methods=["*"],
        allow_headers=["*"],
    )
    mgr = manager or RunManager()
    app.state.manager = mgr

    @app.exception_handler(RequestValidationError)
    async def bad_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    @app.get("/api/run")
    def get_run() -> dict:
        return mgr.api_run()

    @app.post("/api/run/start")
    async def start_run(request: Request):
        if mgr.active():
            return JSONResponse(
                status_code=409,
                content={"detail": f"run {mgr.run_id} is active "
                                   f"({mgr.status()})"})
        try:
            body = await request.json()
        except Exception:
            return JSONResponse(status_code=400,
                                content={"detail": "body must be JSON"})
        if not isinstance(body, dict) or "config" not in body:
            return JSONResponse(status_code=400,
                                content={"detail": "missing 'config'"})
        try:
            config = ProtocolConfig.from_dict(body["config"])
        except (StagewiseError, TypeError, ValueError) as exc:
            return JSONResponse(status_code=400,
                                content={"detail": f"bad config: {exc}"})
        run_id = mgr.start(config, interactive=bool(body.get("interactive",
                                                             True)))
        return {"run_id": run_id}

    @app.get("/api/run/lrcurve")
    def get_lr_curve():
        snapshot = mgr.api_run()
        if snapshot["lr_curve"] is None:
            return JSONResponse(status_code=404,
                                content={"detail": "no LR curve yet"})
        return snapshot["lr_curve"]

    @app.post("/api/run/lr")
    async def post_lr(request: Request):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse(status_code=400,
                                content={"detail": "body must be JSON"})
        if (not isinstance(body, dict) or "stage" not in body
                or "lr" not in body
                or not isinstance(body["stage"], int)
                or not isinstance(body["lr"], (int, float))
                or body["lr"] <= 0):
            return JSONResponse(
                status_code=400,
                content={"detail": "body must be {stage: int, lr: float > 0}"})
        status = mgr.status()
        if status != "awaiting_lr":
            return JSONResponse(
                status_code=409,
                content={"detail": f"run is {status}, not awaiting_lr"})
        mgr.lr_choices.put({"stage": body["stage"], "lr": float(body["lr"])})
        return {"accepted": True}

    @app.get("/api/run/progress")
    def get_progress() -> dict:
        snap = mgr.api_run()["state"]
        return {
            "status": snap["status"],
            "stage": snap["stage"],
            "step": snap["step"],
            "epochs_completed": snap["epochs_completed"],
            "total_epochs": snap["total_epochs"],
            "history": snap["history"],
            "error": snap["error"],
        }

    @app.get("/api/run/metrics")
    def get_metrics():
        report = mgr.api_run()["eval_report"]
        if report is None:
            return JSONResponse(status_code=404,
                                content={"detail": "no metrics yet"})
        return report

    if frontend_dir:
        app.mount("/", StaticFiles(directory=frontend_dir, html=True),
                  name="cockpit")
    return app
