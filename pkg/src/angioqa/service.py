"""HTTP annotation service backing the rater UI.

Endpoints (JSON bodies, UTF-8):
  GET  /api/session/{rater}/next   -> next unrated triplet for the rater
                                      (204 when the queue is exhausted)
  POST /api/ratings                -> {rater_id, triplet_id, vmc, vbd, oq}
                                      201 on first submission, 200 when the
                                      same (rater, triplet) is overwritten
  GET  /api/calibration/{rater}    -> PLCC/SRCC of the rater against the
                                      consensus of the other raters on the
                                      calibration subset
  GET  /images/{id}/{role}.png     -> PNG bytes (role: mask|contrast|generated)

Persistence is a JSONL append-only log (one rating record per metric per
line); all writes go through a single lock. The in-memory index is rebuilt
from the log at startup, so a killed and restarted service reproduces the
same MOS as an uninterrupted run.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .errors import DataError, InsufficientDataError, UndefinedCorrelationError
from .heads import METRICS
from .mos import RatingRecord, append_rating, dedupe_ratings, load_ratings, reliability_gate
from .synth import ManifestRow, read_manifest

__all__ = ["SessionState", "AnnotationService", "start_server", "serve"]

_ROLES = ("mask", "contrast", "generated")


@dataclass
class SessionState:
    rater_id: str
    active_seconds: float = 0.0
    calibration_passed: bool = False


@dataclass
class AnnotationService:
    manifest_rows: list[ManifestRow]
    ratings_path: str
    base_dir: str
    calib_size: int = 200
    index: dict[tuple[str, str], dict[str, float]] = field(default_factory=dict)
    sessions: dict[str, SessionState] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def __post_init__(self):
        self.rows_by_id = {row.id: row for row in self.manifest_rows}
        if os.path.exists(self.ratings_path):
            for rec in dedupe_ratings(load_ratings(self.ratings_path)):
                cell = self.index.setdefault((rec.subject_id, rec.triplet_id), {})
                cell[rec.metric] = rec.score

    def session(self, rater: str) -> SessionState:
        if rater not in self.sessions:
            self.sessions[rater] = SessionState(rater)
        return self.sessions[rater]

    def rated_ids(self, rater: str) -> set[str]:
        return {t for (r, t), cell in self.index.items()
                if r == rater and len(cell) == len(METRICS)}

    def next_for(self, rater: str) -> dict | None:
        """First manifest triplet the rater has not fully rated."""
        rated = self.rated_ids(rater)
        total = len(self.manifest_rows)
        pending = None
        for row in self.manifest_rows:
            if row.id not in rated:
                pending = row
                break
        if pending is None:
            return None
        return {
            "triplet_id": pending.id,
            "images": {role: f"/images/{pending.id}/{role}.png" for role in _ROLES},
            "progress": {"rated": len(rated), "total": total},
            "active_seconds": self.session(rater).active_seconds,
        }

    def record_rating(self, payload: dict) -> tuple[int, dict]:
        try:
            rater = str(payload["rater_id"])
            triplet = str(payload["triplet_id"])
            scores = {m: float(payload[m]) for m in METRICS}
        except (KeyError, TypeError, ValueError):
            return 400, {"error": "rating needs rater_id, triplet_id, vmc, vbd, oq"}
        if triplet not in self.rows_by_id:
            return 404, {"error": f"unknown triplet {triplet}"}
        for metric, score in scores.items():
            if not 0.0 <= score <= 100.0:
                return 422, {"error": f"{metric} score {score} outside [0, 100]"}
        active = payload.get("active_seconds")
        now = time.time()
        with self.lock:
            existing = (rater, triplet) in self.index
            for metric, score in scores.items():
                append_rating(self.ratings_path,
                              RatingRecord(rater, triplet, metric, score, now))
            self.index[(rater, triplet)] = scores
            session = self.session(rater)
            if isinstance(active, (int, float)):
                session.active_seconds = float(active)
        return (200 if existing else 201), {"status": "ok", "overwrote": existing}

    def calibration(self, rater: str) -> dict:
        """Rater vs consensus-of-others on the calibration subset, pairs
        pooled across metrics; pairwise per-other values for transparency."""
        calib_ids = [row.id for row in self.manifest_rows[:self.calib_size]]
        own, consensus = [], []
        per_other: dict[str, tuple[list, list]] = {}
        for triplet in calib_ids:
            mine = self.index.get((rater, triplet))
            if not mine:
                continue
            others = {r: cell for (r, t), cell in self.index.items()
                      if t == triplet and r != rater and len(cell) == len(METRICS)}
            if not others:
                continue
            for metric in METRICS:
                own.append(mine[metric])
                consensus.append(sum(c[metric] for c in others.values()) / len(others))
                for other, cell in others.items():
                    a, b = per_other.setdefault(other, ([], []))
                    a.append(mine[metric])
                    b.append(cell[metric])
        result: dict = {"n_pairs": len(own), "pairwise": {}}
        try:
            gate = reliability_gate(own, consensus)
            result.update(plcc=gate.plcc, srcc=gate.srcc, passed=gate.passed)
        except (InsufficientDataError, UndefinedCorrelationError) as exc:
            result.update(plcc=None, srcc=None, passed=False, reason=str(exc))
        for other, (a, b) in per_other.items():
            try:
                gate = reliability_gate(a, b)
                result["pairwise"][other] = {"plcc": gate.plcc, "srcc": gate.srcc}
            except (InsufficientDataError, UndefinedCorrelationError):
                result["pairwise"][other] = {"plcc": None, "srcc": None}
        self.session(rater).calibration_passed = bool(result["passed"])
        return result

    def image_bytes(self, triplet: str, role: str) -> bytes | None:
        row = self.rows_by_id.get(triplet)
        if row is None or role not in _ROLES:
            return None
        path = os.path.join(self.base_dir, getattr(row, f"{role}_path"))
        if not os.path.exists(path):
            return None
        with open(path, "rb") as fh:
            return fh.read()


_NEXT_RE = re.compile(r"^/api/session/([^/]+)/next$")
_CALIB_RE = re.compile(r"^/api/calibration/([^/]+)$")
_IMAGE_RE = re.compile(r"^/images/([^/]+)/(mask|contrast|generated)\.png$")


def _make_handler(service: AnnotationService, ui_dir: str | None):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):  # quiet by default
            pass

        def _send_json(self, code: int, payload: dict):
            body = json.dumps(payload).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _send_bytes(self, code: int, body: bytes, content_type: str):
            self.send_response(code)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_GET(self):
            m = _NEXT_RE.match(self.path)
            if m:
                payload = service.next_for(m.group(1))
                if payload is None:
                    self.send_response(204)
                    self.send_header("Access-Control-Allow-Origin", "*")
                    self.send_header("Content-Length", "0")
                    self.end_headers()
                    return
                self._send_json(200, payload)
                return
            m = _CALIB_RE.match(self.path)
            if m:
                self._send_json(200, service.calibration(m.group(1)))
                return
            m = _IMAGE_RE.match(self.path)
            if m:
                data = service.image_bytes(m.group(1), m.group(2))
                if data is None:
                    self._send_json(404, {"error": "unknown image"})
                    return
                self._send_bytes(200, data, "image/png")
                return
            if ui_dir is not None:
                self._serve_static()
                return
            if self.path == "/":
                self._send_json(200, {
                    "service": "angioqa annotation",
                    "endpoints": ["/api/session/{rater}/next", "/api/ratings",
                                   "/api/calibration/{rater}",
                                   "/images/{id}/{role}.png"],
                })
                return
            self._send_json(404, {"error": "not found"})

        def _serve_static(self):
            rel = self.path.lstrip("/") or "index.html"
            rel = rel.split("?", 1)[0]
            root = os.path.realpath(ui_dir)
            full = os.path.realpath(os.path.join(root, rel))
            if not full.startswith(root + os.sep) and full != root:
                self._send_json(404, {"error": "not found"})
                return
            if os.path.isdir(full):
                full = os.path.join(full, "index.html")
            if not os.path.isfile(full):
                self._send_json(404, {"error": "not found"})
                return
            types = {".html": "text/html; charset=utf-8",
                     ".js": "text/javascript; charset=utf-8",
                     ".css": "text/css; charset=utf-8",
                     ".png": "image/png", ".map": "application/json"}
            ext = os.path.splitext(full)[1]
            with open(full, "rb") as fh:
                self._send_bytes(200, fh.read(), types.get(ext, "application/octet-stream"))

        def do_POST(self):
            if self.path != "/api/ratings":
                self._send_json(404, {"error": "not found"})
                return
            length = int(self.headers.get("Content-Length", "0"))
            raw = self.rfile.read(length) if length else b""
            try:
                payload = json.loads(raw.decode("utf-8"))
            except (json.JSONDecodeError, UnicodeDecodeError):
                self._send_json(400, {"error": "body must be JSON"})
                return
            code, body = service.record_rating(payload)
            self._send_json(code, body)

    return Handler


def start_server(manifest_path, ratings_path, port: int = 0,
                 calib_size: int = 200, ui_dir: str | None = None,
                 ) -> tuple[ThreadingHTTPServer, threading.Thread, AnnotationService]:
    """Start the service on a background thread; port 0 picks a free port."""
    rows = read_manifest(manifest_path)
    if not rows:
        raise DataError(f"manifest {manifest_path} has no triplets")
    service = AnnotationService(rows, str(ratings_path),
                                os.path.dirname(os.path.abspath(manifest_path)),
                                calib_size)
    server = ThreadingHTTPServer(("127.0.0.1", port), _make_handler(service, ui_dir))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread, service


def serve(manifest_path, ratings_path, port: int, calib_size: int = 200,
          ui_dir: str | None = None) -> None:
    """Run the annotation service in the foreground."""
    server, thread, _ = start_server(manifest_path, ratings_path, port,
                                     calib_size, ui_dir)
    host, actual_port = server.server_address[:2]
    print(f"annotation service on http://{host}:{actual_port} "
          f"(ratings -> {ratings_path})")
    try:
        thread.join()
    except KeyboardInterrupt:
        server.shutdown()
