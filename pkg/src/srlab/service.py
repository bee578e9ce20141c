"""HTTP service for blinded pairwise judging sessions.

A session is created from an exported comparison bundle (a directory with
tasks.json plus the PNG triplets). Annotators pull tasks one at a time; the
payload shows two images as plain "left" and "right" -- which system lands on
which side is a pure function of (placement_seed, task_id) and never leaves
the server. Judgments append to a per-session JSONL log that is flushed and
fsynced on every write; startup rebuilds all state by replaying the logs, so
a restart loses nothing.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
import uuid
from pathlib import Path
from typing import Literal, Optional

from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse
from pydantic import BaseModel

from .metrics import SbsTally, binom_sbs_test, significance, win_rate

__all__ = [
    "DEFAULT_CRITERIA",
    "placement_left_is_1",
    "SbsTask",
    "SbsSession",
    "JudgmentConflict",
    "SessionStore",
    "create_app",
]

DEFAULT_CRITERIA = [
    "sharper fine detail",
    "fewer artifacts",
    "more faithful to the reference",
]


def placement_left_is_1(placement_seed: int, task_id: str) -> bool:
    """Blinded side assignment: stable under restarts, balanced across tasks."""
    digest = hashlib.sha256(f"{placement_seed}:{task_id}".encode()).digest()
    return bool(digest[0] & 1)


@dataclasses.dataclass
class SbsTask:
    task_id: str
    source_id: str
    image_1: str
    image_2: str
    reference: str


@dataclasses.dataclass
class SbsSession:
    session_id: str
    name: str
    system_1: str
    system_2: str
    images_dir: str
    placement_seed: int
    criteria: list[str]
    annotators: Optional[list[str]]
    tasks: list[SbsTask]
    # (annotator, task_id) -> judgment record
    judgments: dict = dataclasses.field(default_factory=dict)

    def task_by_id(self, task_id: str) -> Optional[SbsTask]:
        for task in self.tasks:
            if task.task_id == task_id:
                return task
        return None

    def next_task_for(self, annotator: str) -> Optional[SbsTask]:
        for task in self.tasks:
            if (annotator, task.task_id) not in self.judgments:
                return task
        return None


class JudgmentConflict(ValueError):
    """Same annotator, same task, different choice than already recorded."""


class SessionStore:
    """Append-only event log per session plus an in-memory fold of each log."""

    def __init__(self, root):
        self.root = Path(root)
        self.sessions: dict[str, SbsSession] = {}
        self.root.joinpath("sessions").mkdir(parents=True, exist_ok=True)
        self._replay_all()

    # -- persistence ---------------------------------------------------------

    def _log_path(self, session_id: str) -> Path:
        return self.root / "sessions" / session_id / "log.jsonl"

    def _append(self, session_id: str, event: dict) -> None:
        path = self._log_path(session_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        snapshot = self.root / "sessions" / session_id / "state.json"
        session = self.sessions[session_id]
        state = dataclasses.asdict(session)
        # Tuple keys do not survive JSON; snapshot judgments as a list.
        state["judgments"] = sorted(
            session.judgments.values(), key=lambda r: (r["annotator"], r["task_id"])
        )
        snapshot.write_text(json.dumps(state, indent=2))

    def _replay_all(self) -> None:
        for log in sorted(self.root.joinpath("sessions").glob("*/log.jsonl")):
            with open(log, encoding="utf-8") as fh:
                for line in fh:
                    self._apply(json.loads(line))

    def _apply(self, event: dict) -> None:
        kind = event["type"]
        if kind == "session_created":
            data = {k: v for k, v in event.items() if k != "type"}
            data["tasks"] = [SbsTask(**t) for t in data["tasks"]]
            session = SbsSession(**data)
            self.sessions[session.session_id] = session
        elif kind == "judgment":
            session = self.sessions[event["session_id"]]
            key = (event["annotator"], event["task_id"])
            session.judgments[key] = {
                k: event[k] for k in ("annotator", "task_id", "choice", "verdict", "recorded_at")
            }
        else:
            raise ValueError(f"unknown event type {kind!r}")

    # -- operations ----------------------------------------------------------

    def create_session(
        self,
        source_dir,
        name: str = "",
        placement_seed: int = 0,
        annotators: Optional[list[str]] = None,
        criteria: Optional[list[str]] = None,
    ) -> SbsSession:
        source_dir = Path(source_dir)
        spec_path = source_dir / "tasks.json"
        if not spec_path.exists():
            raise FileNotFoundError(f"no tasks.json under {source_dir}")
        spec = json.loads(spec_path.read_text())
        tasks = [SbsTask(**t) for t in spec["tasks"]]
        if not tasks:
            raise ValueError(f"empty task list in {spec_path}")
        for task in tasks:
            for field in ("image_1", "image_2", "reference"):
                rel = getattr(task, field)
                if not (source_dir / rel).exists():
                    raise FileNotFoundError(f"missing image {rel} for {task.task_id}")
        session = SbsSession(
            session_id=uuid.uuid4().hex[:12],
            name=name or spec.get("system_1", "") + "-vs-" + spec.get("system_2", ""),
            system_1=spec["system_1"],
            system_2=spec["system_2"],
            images_dir=str(source_dir.resolve()),
            placement_seed=placement_seed,
            criteria=list(criteria) if criteria is not None else list(DEFAULT_CRITERIA),
            annotators=list(annotators) if annotators is not None else None,
            tasks=tasks,
        )
        self.sessions[session.session_id] = session
        self._append(
            session.session_id,
            {"type": "session_created", **dataclasses.asdict(session)},
        )
        return session

    def get_session(self, session_id: str) -> SbsSession:
        if session_id not in self.sessions:
            raise KeyError(session_id)
        return self.sessions[session_id]

    def record_judgment(
        self, session_id: str, annotator: str, task_id: str, choice: str
    ) -> str:
        """Returns 'recorded' or 'duplicate'; conflicts raise JudgmentConflict."""
        session = self.get_session(session_id)
        task = session.task_by_id(task_id)
        if task is None:
            raise KeyError(task_id)
        if session.annotators is not None and annotator not in session.annotators:
            raise PermissionError(f"annotator {annotator!r} not registered for session")
        key = (annotator, task_id)
        if key in session.judgments:
            if session.judgments[key]["choice"] == choice:
                return "duplicate"
            raise JudgmentConflict(
                f"{annotator} already judged {task_id} as "
                f"{session.judgments[key]['choice']!r}"
            )
        verdict = _resolve_verdict(session, task_id, choice)
        event = {
            "type": "judgment",
            "session_id": session_id,
            "annotator": annotator,
            "task_id": task_id,
            "choice": choice,
            "verdict": verdict,
            "recorded_at": time.time(),
        }
        session.judgments[key] = {
            k: event[k] for k in ("annotator", "task_id", "choice", "verdict", "recorded_at")
        }
        self._append(session_id, event)
        return "recorded"


def _resolve_verdict(session: SbsSession, task_id: str, choice: str) -> str:
    """Map a blinded left/right/tie choice onto system identities."""
    if choice == "tie":
        return "tie"
    left_is_1 = placement_left_is_1(session.placement_seed, task_id)
    if choice == "left":
        return "1" if left_is_1 else "2"
    return "2" if left_is_1 else "1"


def _tally_stats(tally: SbsTally) -> Optional[dict]:
    if tally.total == 0:
        return None
    stats = {
        "wins_1": tally.wins_1,
        "wins_2": tally.wins_2,
        "ties": tally.ties,
        "total": tally.total,
        "win_rate_1": win_rate(tally),
    }
    try:
        p = binom_sbs_test(tally)
        stats["p_value"] = p
        stats["verdict"] = significance(tally, p)
    except ValueError:
        stats["p_value"] = None
        stats["verdict"] = None
    return stats


# ---------------------------------------------------------------------------
# HTTP layer


class CreateSessionRequest(BaseModel):
    source_dir: str
    name: str = ""
    placement_seed: int = 0
    annotators: Optional[list[str]] = None
    criteria: Optional[list[str]] = None


class JudgmentRequest(BaseModel):
    session_id: str
    task_id: str
    annotator: str
    choice: Literal["left", "right", "tie"]


def create_app(root) -> FastAPI:
    """Build the judging service over a storage root directory."""
    store = SessionStore(root)
    app = FastAPI(title="pairwise judging service")
    app.state.store = store

    def _session_or_404(session_id: str) -> SbsSession:
        try:
            return store.get_session(session_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no session {session_id}")

    @app.get("/health")
    def health():
        return {"status": "ok", "sessions": len(store.sessions)}

    @app.post("/sessions", status_code=201)
    def create_session(req: CreateSessionRequest):
        try:
            session = store.create_session(
                req.source_dir,
                name=req.name,
                placement_seed=req.placement_seed,
                annotators=req.annotators,
                criteria=req.criteria,
            )
        except (FileNotFoundError, ValueError, KeyError) as err:
            raise HTTPException(status_code=400, detail=str(err))
        return {
            "session_id": session.session_id,
            "name": session.name,
            "n_tasks": len(session.tasks),
            "criteria": session.criteria,
        }

    @app.get("/sessions")
    def list_sessions():
        return {
            "sessions": [
                {
                    "session_id": s.session_id,
                    "name": s.name,
                    "n_tasks": len(s.tasks),
                    "n_judgments": len(s.judgments),
                }
                for s in store.sessions.values()
            ]
        }

    @app.get("/sessions/{session_id}")
    def session_status(session_id: str):
        session = _session_or_404(session_id)
        by_annotator: dict[str, int] = {}
        for annotator, _ in session.judgments:
            by_annotator[annotator] = by_annotator.get(annotator, 0) + 1
        return {
            "session_id": session.session_id,
            "name": session.name,
            "n_tasks": len(session.tasks),
            "n_judgments": len(session.judgments),
            "judged_by_annotator": by_annotator,
            "criteria": session.criteria,
        }

    @app.get("/sessions/{session_id}/next")
    def next_task(session_id: str, annotator: str):
        session = _session_or_404(session_id)
        if session.annotators is not None and annotator not in session.annotators:
            raise HTTPException(status_code=403, detail=f"unknown annotator {annotator!r}")
        task = session.next_task_for(annotator)
        remaining = sum(
            1 for t in session.tasks if (annotator, t.task_id) not in session.judgments
        )
        if task is None:
            return {"done": True, "task": None, "remaining": 0}
        left_is_1 = placement_left_is_1(session.placement_seed, task.task_id)
        left, right = (
            (task.image_1, task.image_2) if left_is_1 else (task.image_2, task.image_1)
        )
        base = f"/images/{session.session_id}"
        return {
            "done": False,
            "remaining": remaining,
            "task": {
                "task_id": task.task_id,
                "left": f"{base}/{left}",
                "right": f"{base}/{right}",
                "reference": f"{base}/{task.reference}",
                "criteria": session.criteria,
            },
        }

    @app.post("/judgments")
    def post_judgment(req: JudgmentRequest):
        _session_or_404(req.session_id)
        try:
            status = store.record_judgment(
                req.session_id, req.annotator, req.task_id, req.choice
            )
        except KeyError as err:
            raise HTTPException(status_code=404, detail=f"no task {err}")
        except PermissionError as err:
            raise HTTPException(status_code=403, detail=str(err))
        except JudgmentConflict as err:
            raise HTTPException(status_code=409, detail=str(err))
        return {"status": status}

    @app.get("/sessions/{session_id}/results")
    def results(session_id: str):
        session = _session_or_404(session_id)
        pooled = SbsTally()
        per_annotator: dict[str, SbsTally] = {}
        for (annotator, _), record in sorted(session.judgments.items()):
            pooled = pooled.add(record["verdict"])
            per_annotator[annotator] = per_annotator.get(annotator, SbsTally()).add(
                record["verdict"]
            )
        return {
            "session_id": session.session_id,
            "system_1": session.system_1,
            "system_2": session.system_2,
            "n_tasks": len(session.tasks),
            "n_judgments": pooled.total,
            "pooled": _tally_stats(pooled),
            "by_annotator": {
                name: _tally_stats(t) for name, t in sorted(per_annotator.items())
            },
        }

    @app.get("/images/{session_id}/{filename}")
    def image(session_id: str, filename: str):
        session = _session_or_404(session_id)
        if Path(filename).name != filename:
            raise HTTPException(status_code=400, detail="bad filename")
        path = Path(session.images_dir) / filename
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"no image {filename}")
        return FileResponse(path, media_type="image/png")

    return app
