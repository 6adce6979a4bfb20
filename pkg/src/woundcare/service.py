"""HTTP assessment service and per-patient daily tracking store.

Endpoints
---------
- ``POST /assess``: multipart body with exactly one JPEG/PNG part;
  returns the ensemble assessment. The stored copy is re-encoded from
  pixels alone, so no upload metadata (EXIF, filename) survives.
- ``POST /patients``: issue an opaque patient token.
- ``POST /patients/{id}/entries``: upsert the day's tracking entry
  (last write wins, flagged ``revised``).
- ``GET /patients/{id}/report?days=N``: entries and aligned series for
  the last N days (default 30).
- ``GET /health``: 200 with the bundle version once a model is loaded.

Persistence is a single SQLite file with three tables::

    patients(patient_id TEXT PRIMARY KEY, created_at TEXT)
    images(image_id TEXT PRIMARY KEY, png BLOB, received_at TEXT,
           assessment_json TEXT)
    entries(patient_id TEXT, entry_date TEXT, weight_kg REAL,
            pain INTEGER, medication_taken INTEGER, dressing_changed
            INTEGER, image_ref TEXT, revised INTEGER, updated_at TEXT,
            PRIMARY KEY (patient_id, entry_date))

All timestamps are UTC ISO-8601.
"""

from __future__ import annotations

import io
import json
import secrets
import sqlite3
import threading
from datetime import date, datetime, timedelta, timezone
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel, Field
from starlette.datastructures import UploadFile

from .dataset import LABELS
from .ensemble import EnsembleBundle, assess, load_bundle
from .errors import MalformedImage, UnsupportedFormat
from .imaging import RawImage, decode_image

MAX_UPLOAD_BYTES = 16 * 1024 * 1024


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


class Storage:
    """SQLite-backed store; writes are serialized behind one lock."""

    def __init__(self, path: str | Path = ":memory:"):
        self._conn = sqlite3.connect(str(path), check_same_thread=False)
        self._conn.row_factory = sqlite3.Row
        self._lock = threading.Lock()
        with self._lock:
            self._conn.executescript(
                """
                CREATE TABLE IF NOT EXISTS patients (
                    patient_id TEXT PRIMARY KEY,
                    created_at TEXT NOT NULL
                );
                CREATE TABLE IF NOT EXISTS images (
                    image_id TEXT PRIMARY KEY,
                    png BLOB NOT NULL,
                    received_at TEXT NOT NULL,
                    assessment_json TEXT
                );
                CREATE TABLE IF NOT EXISTS entries (
                    patient_id TEXT NOT NULL,
                    entry_date TEXT NOT NULL,
                    weight_kg REAL NOT NULL,
                    pain INTEGER NOT NULL,
                    medication_taken INTEGER NOT NULL,
                    dressing_changed INTEGER NOT NULL,
                    image_ref TEXT,
                    revised INTEGER NOT NULL DEFAULT 0,
                    updated_at TEXT NOT NULL,
                    PRIMARY KEY (patient_id, entry_date)
                );
                """
            )
            self._conn.commit()

    def close(self) -> None:
        self._conn.close()

    def create_patient(self) -> str:
        patient_id = secrets.token_hex(8)
        with self._lock:
            self._conn.execute(
                "INSERT INTO patients VALUES (?, ?)", (patient_id, _utcnow())
            )
            self._conn.commit()
        return patient_id

    def patient_exists(self, patient_id: str) -> bool:
        row = self._conn.execute(
            "SELECT 1 FROM patients WHERE patient_id = ?", (patient_id,)
        ).fetchone()
        return row is not None

    def store_image(self, png: bytes, assessment: dict | None) -> str:
        image_id = secrets.token_hex(12)
        with self._lock:
            self._conn.execute(
                "INSERT INTO images VALUES (?, ?, ?, ?)",
                (
                    image_id,
                    png,
                    _utcnow(),
                    None if assessment is None else json.dumps(assessment),
                ),
            )
            self._conn.commit()
        return image_id

    def image_assessment(self, image_id: str) -> dict | None:
        row = self._conn.execute(
            "SELECT assessment_json FROM images WHERE image_id = ?", (image_id,)
        ).fetchone()
        if row is None or row["assessment_json"] is None:
            return None
        return json.loads(row["assessment_json"])

    def image_exists(self, image_id: str) -> bool:
        row = self._conn.execute(
            "SELECT 1 FROM images WHERE image_id = ?", (image_id,)
        ).fetchone()
        return row is not None

    def upsert_entry(self, patient_id: str, entry: dict) -> bool:
        """Store one day's entry; returns True when it revised a prior one."""
        with self._lock:
            existing = self._conn.execute(
                "SELECT 1 FROM entries WHERE patient_id = ? AND entry_date = ?",
                (patient_id, entry["date"]),
            ).fetchone()
            revised = existing is not None
            self._conn.execute(
                """
                INSERT INTO entries
                    (patient_id, entry_date, weight_kg, pain, medication_taken,
                     dressing_changed, image_ref, revised, updated_at)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)
                ON CONFLICT (patient_id, entry_date) DO UPDATE SET
                    weight_kg = excluded.weight_kg,
                    pain = excluded.pain,
                    medication_taken = excluded.medication_taken,
                    dressing_changed = excluded.dressing_changed,
                    image_ref = excluded.image_ref,
                    revised = 1,
                    updated_at = excluded.updated_at
                """,
                (
                    patient_id,
                    entry["date"],
                    entry["weight_kg"],
                    entry["pain"],
                    int(entry["medication_taken"]),
                    int(entry["dressing_changed"]),
                    entry.get("image_ref"),
                    0,
                    _utcnow(),
                ),
            )
            self._conn.commit()
        return revised

    def entries_between(self, patient_id: str, start: str, end: str) -> list[dict]:
        rows = self._conn.execute(
            """
            SELECT * FROM entries
            WHERE patient_id = ? AND entry_date BETWEEN ? AND ?
            ORDER BY entry_date
            """,
            (patient_id, start, end),
        ).fetchall()
        out = []
        for r in rows:
            out.append(
                {
                    "date": r["entry_date"],
                    "weight_kg": r["weight_kg"],
                    "pain": r["pain"],
                    "medication_taken": bool(r["medication_taken"]),
                    "dressing_changed": bool(r["dressing_changed"]),
                    "image_ref": r["image_ref"],
                    "revised": bool(r["revised"]),
                    "updated_at": r["updated_at"],
                }
            )
        return out


class DailyEntryIn(BaseModel):
    """Client payload for one day's tracking entry."""

    date: date
    weight_kg: float = Field(gt=0)
    pain: int = Field(ge=0, le=10)
    medication_taken: bool
    dressing_changed: bool
    image_ref: str | None = None


def _encode_anonymized_png(img: RawImage) -> bytes:
    """Re-encode pixels as a bare PNG; carries no upload metadata."""
    buf = io.BytesIO()
    Image.fromarray(img.pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def create_app(
    bundle: EnsembleBundle | None = None,
    *,
    bundle_path: str | Path | None = None,
    storage_path: str | Path = ":memory:",
) -> FastAPI:
    """Build the service; pass a bundle instance or a bundle directory."""
    if bundle is None and bundle_path is not None:
        bundle = load_bundle(bundle_path)

    app = FastAPI(title="woundcare", version="0.1.0")
    app.state.bundle = bundle
    app.state.store = Storage(storage_path)

    def _error(status: int, message: str) -> JSONResponse:
        return JSONResponse(status_code=status, content={"detail": message})

    @app.get("/health")
    def health():
        loaded = app.state.bundle is not None
        body = {
            "status": "ok" if loaded else "model not loaded",
            "model_version": app.state.bundle.version if loaded else None,
        }
        return JSONResponse(status_code=200 if loaded else 503, content=body)

    @app.post("/patients", status_code=201)
    def create_patient():
        return {"patient_id": app.state.store.create_patient()}

    @app.post("/assess")
    async def assess_image(request: Request):
        if app.state.bundle is None:
            return _error(503, "model not loaded")
        form = await request.form()
        uploads = [v for v in form.values() if isinstance(v, UploadFile)]
        if len(uploads) != 1:
            return _error(400, f"expected exactly one image part, got {len(uploads)}")
        payload = await uploads[0].read()
        if len(payload) > MAX_UPLOAD_BYTES:
            return _error(413, "image exceeds the 16 MiB limit")
        try:
            img = decode_image(payload)
        except (MalformedImage, UnsupportedFormat) as exc:
            return _error(400, str(exc))
        assessment = assess(app.state.bundle, img).to_dict()
        assessment["threshold"] = app.state.bundle.decision_threshold
        image_ref = app.state.store.store_image(
            _encode_anonymized_png(img), assessment
        )
        return {"image_ref": image_ref, **assessment}

    @app.post("/patients/{patient_id}/entries")
    def put_entry(patient_id: str, entry: DailyEntryIn):
        store: Storage = app.state.store
        if not store.patient_exists(patient_id):
            return _error(404, "unknown patient")
        if entry.image_ref is not None and not store.image_exists(entry.image_ref):
            return _error(422, f"unknown image_ref {entry.image_ref!r}")
        record = {
            "date": entry.date.isoformat(),
            "weight_kg": entry.weight_kg,
            "pain": entry.pain,
            "medication_taken": entry.medication_taken,
            "dressing_changed": entry.dressing_changed,
            "image_ref": entry.image_ref,
        }
        revised = store.upsert_entry(patient_id, record)
        stored = store.entries_between(
            patient_id, record["date"], record["date"]
        )[0]
        return {"revised": revised, "entry": stored}

    @app.get("/patients/{patient_id}/report")
    def report(patient_id: str, days: int = 30):
        store: Storage = app.state.store
        if not store.patient_exists(patient_id):
            return _error(404, "unknown patient")
        if days < 1:
            return _error(422, "days must be >= 1")
        end = datetime.now(timezone.utc).date()
        start = end - timedelta(days=days - 1)
        entries = store.entries_between(
            patient_id, start.isoformat(), end.isoformat()
        )
        for e in entries:
            e["assessment"] = (
                store.image_assessment(e["image_ref"]) if e["image_ref"] else None
            )
        series_dates = [e["date"] for e in entries]
        decision_series: dict[str, list[bool | None]] = {n: [] for n in LABELS}
        for e in entries:
            by_label = {}
            if e["assessment"] is not None:
                by_label = {
                    la["label"]: la["decision"] for la in e["assessment"]["labels"]
                }
            for name in LABELS:
                decision_series[name].append(by_label.get(name))
        return {
            "patient_id": patient_id,
            "start_date": start.isoformat(),
            "end_date": end.isoformat(),
            "days": days,
            "entries": entries,
            "series": {
                "dates": series_dates,
                "weight_kg": [e["weight_kg"] for e in entries],
                "pain": [e["pain"] for e in entries],
                "decisions": decision_series,
            },
        }

    return app
