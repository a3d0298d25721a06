"""HTTP facade over a session plus a server-sent event stream.

Reads are cheap JSON; mutations funnel through one lock; train and
re-projection run as background jobs that report progress over the
event stream. Replaying a POST with the same request_id returns the
stored response instead of mutating twice.
"""

from __future__ import annotations

import asyncio
import io
import json
import queue
import threading
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import Response, StreamingResponse
from PIL import Image

from .correction import ClickSet
from .errors import InsufficientLabelsError
from .features import bilinear_resize
from .graph import CutConfig
from .metric import TrainConfig
from .projection import local_config, local_reproject
from .session import Session, aggregate, evaluate

TINT = 0.45
EVENT_POLL_SECONDS = 0.25


@dataclass
class Job:
    id: str
    kind: str  # train | layout | reproject-local | recut
    state: str = "queued"  # queued -> running -> done | failed
    progress: float = 0.0
    result: Optional[dict] = None
    error: Optional[str] = None

    def snapshot(self) -> dict:
        out = {"job": self.id, "kind": self.kind, "state": self.state,
               "progress": self.progress}
        if self.error is not None:
            out["error"] = self.error
        return out


class EventBus:
    def __init__(self):
        self._lock = threading.Lock()
        self._subscribers: list[queue.Queue] = []

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue()
        with self._lock:
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    def emit(self, payload: dict) -> None:
        with self._lock:
            targets = list(self._subscribers)
        for q in targets:
            q.put(payload)


@dataclass
class AnnotService:
    session: Session
    directory: Optional[str] = None
    bus: EventBus = field(default_factory=EventBus)
    jobs: dict = field(default_factory=dict)
    replies: dict = field(default_factory=dict)
    # mutex serializes session mutations; job_lock guards the cheap job
    # bookkeeping so a busy check never waits behind a running train
    mutex: threading.RLock = field(default_factory=threading.RLock)
    job_lock: threading.RLock = field(default_factory=threading.RLock)
    _job_counter: int = 0
    _busy: Optional[str] = None  # id of the running train/layout job

    def new_job(self, kind: str) -> Job:
        with self.job_lock:
            self._job_counter += 1
            job = Job(id=f"job-{self._job_counter}", kind=kind)
            self.jobs[job.id] = job
            return job

    def release(self, job: Job) -> None:
        with self.job_lock:
            if self._busy == job.id:
                self._busy = None

    def finish(self, job: Job, result: Optional[dict] = None,
               error: Optional[str] = None) -> None:
        job.state = "failed" if error else "done"
        job.progress = 1.0
        job.result = result
        job.error = error
        payload = {"event": "job-done", **job.snapshot()}
        if result is not None:
            payload["result"] = result
        self.bus.emit(payload)

    def progress(self, job: Job, fraction: float, **extra) -> None:
        job.progress = float(fraction)
        self.bus.emit({"event": "job-progress", **job.snapshot(), **extra})


def _seg_payload(session: Session, key: int) -> dict:
    seg = session.segments[key]
    return {
        "key": str(key),
        "image": seg.image_id,
        "pixel_count": seg.pixel_count,
        "bbox": list(seg.bbox),
        "label": seg.label,
        "x": None if seg.coords is None else seg.coords[0],
        "y": None if seg.coords is None else seg.coords[1],
    }


def _parse_key(raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise HTTPException(status_code=404, detail=f"bad segment key {raw!r}")


def build_app(service: AnnotService) -> FastAPI:
    @asynccontextmanager
    async def lifespan(_app):
        yield
        if service.directory is not None:
            with service.mutex:
                service.session.save(service.directory)

    app = FastAPI(title="fsannot", lifespan=lifespan)
    session = service.session

    def replayed(request_id: Optional[str]):
        if request_id and request_id in service.replies:
            return service.replies[request_id]
        return None

    def remember(request_id: Optional[str], response: dict) -> dict:
        if request_id:
            service.replies[request_id] = response
        return response

    @app.get("/api/projection")
    def projection():
        keys = session.shown_keys()
        return {
            "segments": [_seg_payload(session, k) for k in keys],
            "palette": {str(i): v for i, v in sorted(session.palette.items())},
        }

    @app.get("/api/images")
    def images():
        return [
            {
                "id": image_id,
                "width": session.images[image_id]["width"],
                "height": session.images[image_id]["height"],
                "shown": session.images[image_id]["shown"],
                "cut": {
                    "criterion": session.images[image_id]["cut"].criterion,
                    "threshold": session.images[image_id]["cut"].threshold,
                },
                "segments": [str(k) for k in session.by_image[image_id]],
            }
            for image_id in session.image_order
        ]

    @app.get("/api/segments/{key}")
    def segment(key: str):
        k = _parse_key(key)
        if k not in session.segments:
            raise HTTPException(status_code=404, detail="unknown segment")
        return _seg_payload(session, k)

    @app.get("/api/images/{image_id}/overlay")
    def overlay(image_id: str, highlight: Optional[str] = None,
                thumb: Optional[str] = None, size: int = 64):
        if image_id not in session.images:
            raise HTTPException(status_code=404, detail="unknown image")
        if thumb is not None:
            return _thumbnail(session, image_id, _parse_key(thumb), size)
        png = _render_overlay(
            session, image_id, None if highlight is None else _parse_key(highlight)
        )
        return Response(content=png, media_type="image/png")

    @app.post("/api/labels/box")
    def label_box(payload: dict):
        prev = replayed(payload.get("request_id"))
        if prev is not None:
            return prev
        rect = payload.get("rect")
        if not isinstance(rect, (list, tuple)) or len(rect) != 4:
            raise HTTPException(status_code=400, detail="rect must be [x0, y0, x1, y1]")
        try:
            with service.mutex:
                count = session.assign_label_box(rect, int(payload.get("label", -1)))
        except ValueError as err:
            raise HTTPException(status_code=400, detail=str(err))
        return remember(payload.get("request_id"), {"count": count})

    @app.post("/api/batch/next")
    def batch_next(payload: dict):
        prev = replayed(payload.get("request_id"))
        if prev is not None:
            return prev
        with service.mutex:
            keys = session.next_batch(int(payload.get("n", 1)))
        if keys:
            service.bus.emit({"event": "layout-updated"})
        return remember(payload.get("request_id"), {"keys": [str(k) for k in keys]})

    @app.post("/api/segments/{key}/split")
    def split(key: str, payload: dict):
        prev = replayed(payload.get("request_id"))
        if prev is not None:
            return prev
        k = _parse_key(key)
        if k not in session.segments:
            raise HTTPException(status_code=404, detail="unknown segment")
        try:
            clicks = ClickSet(
                positive=[(int(y), int(x)) for x, y in payload.get("pos", [])],
                negative=[(int(y), int(x)) for x, y in payload.get("neg", [])],
            )
            with service.mutex:
                children = session.apply_split(k, clicks)
        except (ValueError, KeyError) as err:
            raise HTTPException(status_code=400, detail=str(err))
        image_id = session.segments[children[0]].image_id
        service.bus.emit({"event": "segments-changed", "image": image_id})
        return remember(
            payload.get("request_id"), {"children": [str(c) for c in children]}
        )

    @app.post("/api/images/{image_id}/recut")
    def recut(image_id: str, payload: dict):
        prev = replayed(payload.get("request_id"))
        if prev is not None:
            return prev
        if image_id not in session.images:
            raise HTTPException(status_code=404, detail="unknown image")
        try:
            cut = CutConfig(
                criterion=payload.get("criterion", "volume"),
                threshold=float(payload.get("threshold", 1000.0)),
            )
            with service.mutex:
                report = session.recut(image_id, cut)
        except ValueError as err:
            raise HTTPException(status_code=400, detail=str(err))
        service.bus.emit({"event": "segments-changed", "image": image_id})
        body = {
            "added": [str(k) for k in report["added"]],
            "removed": [str(k) for k in report["removed"]],
            "kept": [str(k) for k in report["kept"]],
        }
        return remember(payload.get("request_id"), body)

    @app.post("/api/train")
    def train(payload: dict):
        prev = replayed(payload.get("request_id"))
        if prev is not None:
            return prev
        cfg_kw = {
            k: payload[k]
            for k in ("margin", "momentum", "weight_decay", "epochs",
                      "triplets_per_epoch", "learning_rate", "lr_decay", "seed")
            if k in payload
        }
        try:
            cfg = TrainConfig(**cfg_kw)
        except (TypeError, ValueError) as err:
            raise HTTPException(status_code=400, detail=str(err))
        with service.job_lock:
            if service._busy is not None:
                raise HTTPException(status_code=409,
                                    detail="train/layout already running")
            job = service.new_job("train")
            service._busy = job.id

        def run():
            job.state = "running"
            spawned_layout = False
            try:
                def on_epoch(epoch, loss):
                    service.progress(job, epoch / cfg.epochs, epoch=epoch,
                                     loss=float(loss))

                with service.mutex:
                    session.train(cfg, on_epoch=on_epoch)
                service.finish(job, result={"epochs": cfg.epochs})
                _spawn_layout(service)  # takes over the busy slot
                spawned_layout = True
            except InsufficientLabelsError as err:
                service.finish(job, error=str(err))
            except Exception as err:  # surfacing failures beats a hung job
                service.finish(job, error=repr(err))
            finally:
                if not spawned_layout:
                    service.release(job)

        threading.Thread(target=run, daemon=True).start()
        return remember(payload.get("request_id"), {"job": job.id})

    @app.post("/api/reproject/local")
    def reproject_local(payload: dict):
        prev = replayed(payload.get("request_id"))
        if prev is not None:
            return prev
        keys = [_parse_key(k) for k in payload.get("keys", [])]
        for k in keys:
            if k not in session.segments:
                raise HTTPException(status_code=404, detail=f"unknown segment {k}")
        cfg = local_config(seed=session.seed)
        if len(keys) <= cfg.k:
            raise HTTPException(
                status_code=400, detail=f"need more than {cfg.k} segments"
            )
        job = service.new_job("reproject-local")

        def run():
            job.state = "running"
            try:
                with service.mutex:
                    pts = session._embedded(keys)
                    labels = [session.segments[k].label for k in keys]
                lay = local_reproject(pts, cfg, labels=labels)
                coords = {
                    str(k): [float(x), float(y)]
                    for k, (x, y) in zip(keys, lay.coords)
                }
                service.finish(job, result={"coords": coords})
            except Exception as err:
                service.finish(job, error=repr(err))

        threading.Thread(target=run, daemon=True).start()
        return remember(payload.get("request_id"), {"job": job.id})

    @app.get("/api/jobs/{job_id}")
    def job_state(job_id: str):
        if job_id not in service.jobs:
            raise HTTPException(status_code=404, detail="unknown job")
        job = service.jobs[job_id]
        out = job.snapshot()
        if job.result is not None:
            out["result"] = job.result
        return out

    @app.get("/api/metrics")
    def metrics(gt_dir: str):
        gt_root = Path(gt_dir)
        if not gt_root.is_dir():
            raise HTTPException(status_code=400, detail="gt_dir is not a directory")
        masks = session.export_masks()
        per_mode: dict[str, list[float]] = {
            "binary-iou": [], "instance-iou": [], "agreement": []
        }
        counted = 0
        for image_id, pred in masks.items():
            gt_path = gt_root / f"{image_id}.png"
            if not gt_path.exists():
                continue
            gt = np.asarray(Image.open(gt_path), dtype=np.int64)
            if gt.shape != pred.shape:
                raise HTTPException(
                    status_code=400, detail=f"{image_id}: gt shape mismatch"
                )
            counted += 1
            for mode in per_mode:
                per_mode[mode].append(evaluate(pred, gt, mode))
        if counted == 0:
            raise HTTPException(status_code=404, detail="no matching gt masks")
        return {
            "images": counted,
            **{mode: aggregate(vals) for mode, vals in per_mode.items()},
        }

    @app.get("/api/events")
    async def events(request: Request, max_events: Optional[int] = None):
        # max_events bounds the stream so short-lived clients can drain
        # a fixed number of notifications and hang up cleanly
        q = service.bus.subscribe()

        async def gen():
            sent = 0
            try:
                while max_events is None or sent < max_events:
                    if await request.is_disconnected():
                        break
                    try:
                        payload = q.get_nowait()
                    except queue.Empty:
                        await asyncio.sleep(EVENT_POLL_SECONDS)
                        yield ": keepalive\n\n"
                        continue
                    yield f"data: {json.dumps(payload, sort_keys=True)}\n\n"
                    sent += 1
            finally:
                service.bus.unsubscribe(q)

        return StreamingResponse(gen(), media_type="text/event-stream")

    @app.get("/api/session")
    def save_session():
        if service.directory is None:
            raise HTTPException(status_code=400, detail="service has no session directory")
        with service.mutex:
            session.save(service.directory)
        return {"saved": str(service.directory)}

    @app.post("/api/session")
    def load_session(payload: dict):
        directory = payload.get("directory", service.directory)
        if directory is None:
            raise HTTPException(status_code=400, detail="no directory given")
        try:
            with service.mutex:
                loaded = Session.load(directory, provider=session.provider,
                                      clock=session.clock)
        except (OSError, KeyError, ValueError) as err:
            raise HTTPException(status_code=400, detail=f"corrupt session: {err}")
        service.session.__dict__.update(loaded.__dict__)
        service.bus.emit({"event": "layout-updated"})
        return {"loaded": str(directory), "images": len(loaded.image_order)}

    return app


def _spawn_layout(service: AnnotService) -> None:
    job = service.new_job("layout")
    with service.job_lock:
        service._busy = job.id

    def run():
        job.state = "running"
        try:
            with service.mutex:
                service.session.relayout()
            service.finish(job)
            service.bus.emit({"event": "layout-updated"})
        except Exception as err:
            service.finish(job, error=repr(err))
        finally:
            service.release(job)

    threading.Thread(target=run, daemon=True).start()


def _render_overlay(session: Session, image_id: str,
                    highlight: Optional[int]) -> bytes:
    pixels = session._image_pixels(image_id).copy()
    region = session.region_map(image_id)
    order = session.by_image[image_id]
    for i, key in enumerate(order):
        seg = session.segments[key]
        if seg.label is None or seg.label not in session.palette:
            continue
        color = np.array(session.palette[seg.label]["color"], dtype=np.float64) / 255.0
        sel = region == i
        pixels[sel] = (1.0 - TINT) * pixels[sel] + TINT * color

    boundary = np.zeros(region.shape, dtype=bool)
    boundary[:, :-1] |= region[:, :-1] != region[:, 1:]
    boundary[:-1, :] |= region[:-1, :] != region[1:, :]
    pixels[boundary] = 0.0
    if highlight is not None and highlight in session.segments:
        idx = order.index(highlight) if highlight in order else -1
        if idx >= 0:
            sel = region == idx
            hi_edge = boundary & (
                sel
                | np.roll(sel, 1, axis=0) | np.roll(sel, -1, axis=0)
                | np.roll(sel, 1, axis=1) | np.roll(sel, -1, axis=1)
            )
            pixels[hi_edge] = (1.0, 1.0, 0.0)

    img = Image.fromarray((np.clip(pixels, 0, 1) * 255).astype(np.uint8))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _thumbnail(session: Session, image_id: str, key: int, size: int):
    if key not in session.segments or session.segments[key].image_id != image_id:
        raise HTTPException(status_code=404, detail="unknown segment for image")
    size = max(8, min(int(size), 256))
    from . import formats
    from .features import crop_segment

    seg = session.segments[key]
    mask = formats.runs_to_mask(seg.runs, (session.images[image_id]["height"],
                                           session.images[image_id]["width"]))
    crop = crop_segment(session._image_pixels(image_id), mask)
    small = bilinear_resize(crop.pixels, size, size)
    img = Image.fromarray((np.clip(small, 0, 1) * 255).astype(np.uint8))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return Response(content=buf.getvalue(), media_type="image/png")


def serve(session: Session, port: int = 8000, directory=None,
          host: str = "127.0.0.1") -> None:
    import uvicorn

    service = AnnotService(session=session, directory=directory)
    app = build_app(service)
    uvicorn.run(app, host=host, port=port, log_level="warning")
