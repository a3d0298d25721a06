import io
import itertools
import json
import queue
import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from fsannot.formats import runs_to_mask, write_gradient
from fsannot.graph import CutConfig
from fsannot.server import AnnotService, build_app
from fsannot.session import Session

STRIP = np.array([[0.1, 0.1, 0.9, 0.1, 0.1]])
RAGGED = np.random.default_rng(0).random((1, 32))  # 8 regions at t=1e-3


def counter_clock():
    counter = itertools.count()
    return lambda: next(counter)


def write_inputs(tmp_path, arrays):
    image_paths, gradient_paths = [], []
    for i, arr in enumerate(arrays):
        arr = np.asarray(arr)
        rgb = np.repeat(arr[:, :, None], 3, axis=2)
        img = tmp_path / f"img{i}.png"
        Image.fromarray((rgb * 255).astype(np.uint8)).save(img)
        grad = tmp_path / f"grad{i}.fsgr"
        write_gradient(grad, arr)
        image_paths.append(str(img))
        gradient_paths.append(str(grad))
    return image_paths, gradient_paths


def make_service(tmp_path, arrays, threshold=1.0, directory=None):
    imgs, grds = write_inputs(tmp_path, arrays)
    session = Session.ingest(
        imgs, grds, CutConfig(criterion="volume", threshold=threshold),
        clock=counter_clock(),
    )
    return AnnotService(session=session, directory=directory)


@pytest.fixture
def strip_client(tmp_path):
    service = make_service(tmp_path, [STRIP], directory=str(tmp_path / "sess"))
    return TestClient(build_app(service)), service


@pytest.fixture
def labeled_client(tmp_path):
    """Two strip images, all four segments shown and labeled (2 per class)."""
    service = make_service(tmp_path, [STRIP, STRIP])
    session = service.session
    session.next_batch(2)
    a = session.add_label("left", (255, 0, 0))
    b = session.add_label("right", (0, 0, 255))
    for image_id in session.image_order:
        first, second = session.by_image[image_id]
        session.segments[first].label = a
        session.segments[second].label = b
    return TestClient(build_app(service)), service


def stream_events(client, n):
    """Collect n SSE payloads on a worker thread.

    The test client runs a response to completion before handing it back,
    so an unbounded stream would never return; max_events bounds it.
    """
    out = []

    def run():
        with client.stream("GET", "/api/events",
                           params={"max_events": n}) as r:
            for line in r.iter_lines():
                if line.startswith("data: "):
                    out.append(json.loads(line[len("data: "):]))

    t = threading.Thread(target=run, daemon=True)
    t.start()
    return t, out


def wait_for(condition, timeout=15.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        if condition():
            return
        time.sleep(0.01)
    raise AssertionError("condition not met in time")


def next_event(q, match, timeout=30.0):
    deadline = time.time() + timeout
    seen = []
    while time.time() < deadline:
        try:
            payload = q.get(timeout=max(0.01, deadline - time.time()))
        except queue.Empty:
            break
        seen.append(payload)
        if match(payload):
            return payload
    raise AssertionError(f"event not observed, saw {seen}")


# ----------------------------------------------------------------- reads


def test_projection_empty_until_batch(strip_client):
    client, service = strip_client
    assert client.get("/api/projection").json()["segments"] == []
    r = client.post("/api/batch/next", json={"n": 1})
    assert r.status_code == 200
    keys = r.json()["keys"]
    assert len(keys) == 2
    body = client.get("/api/projection").json()
    assert [s["key"] for s in body["segments"]] == keys
    for s in body["segments"]:
        assert isinstance(s["x"], float) and isinstance(s["y"], float)
        assert s["label"] is None


def test_images_endpoint(strip_client):
    client, _ = strip_client
    body = client.get("/api/images").json()
    assert len(body) == 1
    info = body[0]
    assert info["id"] == "img0"
    assert (info["width"], info["height"]) == (5, 1)
    assert info["cut"] == {"criterion": "volume", "threshold": 1.0}
    assert len(info["segments"]) == 2


def test_segment_endpoint_and_404(strip_client):
    client, service = strip_client
    key = next(iter(service.session.segments))
    body = client.get(f"/api/segments/{key}").json()
    assert body["key"] == str(key)
    assert body["image"] == "img0"
    assert body["pixel_count"] + 5 - body["pixel_count"] == 5
    assert client.get("/api/segments/12345").status_code == 404
    assert client.get("/api/segments/not-a-key").status_code == 404


# ----------------------------------------------------------------- labels


def test_label_box_counts_and_empty_rect(labeled_client):
    client, service = labeled_client
    session = service.session
    label = session.add_label("all", (0, 255, 0))
    xs = [s.coords[0] for s in session.segments.values()]
    ys = [s.coords[1] for s in session.segments.values()]
    rect = [min(xs) - 1, min(ys) - 1, max(xs) + 1, max(ys) + 1]
    r = client.post("/api/labels/box", json={"rect": rect, "label": label})
    assert r.json() == {"count": 4}
    # empty rect selects nothing
    x = min(xs) - 5
    r = client.post("/api/labels/box", json={"rect": [x, 0, x, 0], "label": label})
    assert r.json() == {"count": 0}


def test_label_box_validation(labeled_client):
    client, _ = labeled_client
    assert client.post("/api/labels/box", json={"rect": [0, 1], "label": 1}).status_code == 400
    r = client.post("/api/labels/box", json={"rect": [0, 0, 1, 1], "label": 99})
    assert r.status_code == 400


def test_label_box_idempotent_replay(labeled_client):
    client, service = labeled_client
    session = service.session
    label = session.add_label("all", (0, 255, 0))
    body = {"rect": [-100, -100, 100, 100], "label": label, "request_id": "r1"}
    first = client.post("/api/labels/box", json=body).json()
    logged = len(session.events)
    again = client.post("/api/labels/box", json=body).json()
    assert again == first
    assert len(session.events) == logged  # replay did not re-execute


def test_batch_next_idempotent_replay(tmp_path):
    service = make_service(tmp_path, [STRIP, STRIP])
    client = TestClient(build_app(service))
    body = {"n": 1, "request_id": "batch-1"}
    first = client.post("/api/batch/next", json=body).json()
    again = client.post("/api/batch/next", json=body).json()
    assert again == first
    shown = [i for i in service.session.image_order
             if service.session.images[i]["shown"]]
    assert len(shown) == 1  # replay did not advance to the second image
    fresh = client.post("/api/batch/next", json={"n": 1}).json()
    assert fresh["keys"] and set(fresh["keys"]).isdisjoint(first["keys"])


# -------------------------------------------------------------- mutations


def test_recut_endpoint(strip_client):
    client, service = strip_client
    client.post("/api/batch/next", json={"n": 1})
    r = client.post("/api/images/img0/recut",
                    json={"criterion": "volume", "threshold": 50.0})
    assert r.status_code == 200
    body = r.json()
    assert len(body["removed"]) == 2 and len(body["added"]) == 1
    assert client.get("/api/projection").json()["segments"][0]["key"] == body["added"][0]
    assert client.post("/api/images/nope/recut", json={"threshold": 1.0}).status_code == 404
    assert client.post("/api/images/img0/recut",
                       json={"criterion": "bogus", "threshold": 1.0}).status_code == 400


def test_split_endpoint(tmp_path):
    service = make_service(tmp_path, [STRIP], threshold=50.0)
    client = TestClient(build_app(service))
    session = service.session
    (key,) = session.by_image["img0"]
    r = client.post(
        f"/api/segments/{key}/split",
        json={"pos": [[0, 0]], "neg": [[4, 0]]},  # clicks are [x, y]
    )
    assert r.status_code == 200
    children = [int(k) for k in r.json()["children"]]
    assert client.get(f"/api/segments/{key}").status_code == 404
    shape = (1, 5)
    pos_mask = runs_to_mask(session.segments[children[0]].runs, shape)
    neg_mask = runs_to_mask(session.segments[children[1]].runs, shape)
    # the 0.9 barrier column ties; FIFO order resolves it to the positive side
    assert pos_mask.tolist() == [[True, True, True, False, False]]
    assert neg_mask.tolist() == [[False, False, False, True, True]]


def test_split_validation(strip_client):
    client, service = strip_client
    key = next(iter(service.session.segments))
    r = client.post(f"/api/segments/{key}/split", json={"pos": [[0, 0]], "neg": []})
    assert r.status_code == 400
    r = client.post("/api/segments/777/split", json={"pos": [[0, 0]], "neg": [[1, 0]]})
    assert r.status_code == 404


# ----------------------------------------------------------------- overlay


def decode_png(response):
    assert response.status_code == 200
    assert response.headers["content-type"] == "image/png"
    return np.asarray(Image.open(io.BytesIO(response.content)))


def test_overlay_png(labeled_client):
    client, service = labeled_client
    base = decode_png(client.get("/api/images/img0/overlay"))
    assert base.shape[:2] == (1, 5)
    # region boundary between the two strip segments is painted black
    assert (base.reshape(-1, 3) == 0).all(axis=1).any()
    key = service.session.by_image["img0"][0]
    lit = decode_png(client.get(f"/api/images/img0/overlay?highlight={key}"))
    assert lit.shape == base.shape
    assert (lit != base).any()
    assert client.get("/api/images/none/overlay").status_code == 404


def test_overlay_thumbnail_size(labeled_client):
    client, service = labeled_client
    key = service.session.by_image["img0"][0]
    thumb = decode_png(client.get(f"/api/images/img0/overlay?thumb={key}&size=16"))
    assert thumb.shape == (16, 16, 3)
    # never larger than requested, clamped to a sane ceiling
    big = decode_png(client.get(f"/api/images/img0/overlay?thumb={key}&size=100000"))
    assert max(big.shape) <= 256


# -------------------------------------------------------------- jobs + SSE


def test_train_event_sequence(labeled_client):
    client, service = labeled_client
    # four events cover one full train job: epoch 1..3 progress then done
    collector, seen = stream_events(client, 4)
    wait_for(lambda: service.bus._subscribers)
    r = client.post("/api/train",
                    json={"epochs": 3, "triplets_per_epoch": 8, "seed": 1})
    assert r.status_code == 200
    job = r.json()["job"]
    collector.join(timeout=60)
    assert not collector.is_alive()
    assert [p["event"] for p in seen] == ["job-progress"] * 3 + ["job-done"]
    assert all(p["job"] == job for p in seen)
    assert [p["epoch"] for p in seen[:3]] == [1, 2, 3]
    assert seen[3]["state"] == "done"
    assert service.session.head is not None


def test_train_then_layout_updated(labeled_client):
    client, service = labeled_client
    q = service.bus.subscribe()
    client.post("/api/train", json={"epochs": 1, "triplets_per_epoch": 8})
    next_event(q, lambda p: p.get("event") == "layout-updated")
    # the follow-up layout job left fresh coordinates behind
    layout_jobs = [j for j in service.jobs.values() if j.kind == "layout"]
    assert layout_jobs and layout_jobs[0].state == "done"
    assert all(s.coords is not None
               for s in service.session.segments.values())


def test_train_busy_returns_409(labeled_client):
    client, service = labeled_client
    with service.job_lock:
        service._busy = "job-held"
    try:
        r = client.post("/api/train", json={"epochs": 1})
        assert r.status_code == 409
    finally:
        with service.job_lock:
            service._busy = None


def test_train_without_labels_fails_job(strip_client):
    client, service = strip_client
    client.post("/api/batch/next", json={"n": 1})
    q = service.bus.subscribe()
    job = client.post("/api/train", json={"epochs": 1}).json()["job"]
    done = next_event(
        q, lambda p: p.get("event") == "job-done" and p.get("job") == job
    )
    assert done["state"] == "failed" and done["error"]
    body = client.get(f"/api/jobs/{job}").json()
    assert body["state"] == "failed"
    assert client.get("/api/jobs/ghost").status_code == 404


def test_train_rejects_bad_config(labeled_client):
    client, _ = labeled_client
    r = client.post("/api/train", json={"margin": 2.0})
    assert r.status_code == 400


def test_segments_changed_event_on_recut(strip_client):
    client, service = strip_client
    collector, seen = stream_events(client, 1)
    wait_for(lambda: service.bus._subscribers)
    client.post("/api/images/img0/recut",
                json={"criterion": "volume", "threshold": 50.0})
    collector.join(timeout=30)
    assert not collector.is_alive()
    assert seen == [{"event": "segments-changed", "image": "img0"}]


def test_reproject_local_job(tmp_path):
    service = make_service(tmp_path, [RAGGED], threshold=1e-3)
    client = TestClient(build_app(service))
    session = service.session
    client.post("/api/batch/next", json={"n": 1})
    keys = session.by_image["img0"]
    assert len(keys) == 8
    subset = [str(k) for k in keys]
    q = service.bus.subscribe()
    r = client.post("/api/reproject/local", json={"keys": subset})
    assert r.status_code == 200
    job = r.json()["job"]
    done = next_event(
        q, lambda p: p.get("event") == "job-done" and p.get("job") == job
    )
    coords = done["result"]["coords"]
    assert sorted(coords) == sorted(subset)
    for x, y in coords.values():
        assert np.isfinite([x, y]).all()
    # global canvas coordinates must be untouched by a local layout
    assert client.get("/api/jobs/" + job).json()["state"] == "done"


def test_reproject_local_needs_enough_keys(tmp_path):
    service = make_service(tmp_path, [STRIP])
    client = TestClient(build_app(service))
    keys = [str(k) for k in service.session.segments]
    r = client.post("/api/reproject/local", json={"keys": keys})
    assert r.status_code == 400
    r = client.post("/api/reproject/local", json={"keys": ["42"]})
    assert r.status_code == 404


# ---------------------------------------------------------------- metrics


def test_metrics_endpoint(labeled_client, tmp_path):
    client, service = labeled_client
    session = service.session
    gt_dir = tmp_path / "gt"
    gt_dir.mkdir()
    for image_id, mask in session.export_masks().items():
        Image.fromarray(mask.astype(np.uint8)).save(gt_dir / f"{image_id}.png")
    body = client.get("/api/metrics", params={"gt_dir": str(gt_dir)}).json()
    assert body["images"] == 2
    for mode in ("binary-iou", "instance-iou", "agreement"):
        assert body[mode]["mean"] == pytest.approx(1.0)
        assert body[mode]["median"] == pytest.approx(1.0)
    assert client.get("/api/metrics", params={"gt_dir": str(tmp_path / "no")}).status_code == 400
    empty = tmp_path / "empty"
    empty.mkdir()
    assert client.get("/api/metrics", params={"gt_dir": str(empty)}).status_code == 404


# ---------------------------------------------------------------- session


def test_session_save_and_load_roundtrip(strip_client, tmp_path):
    client, service = strip_client
    session = service.session
    client.post("/api/batch/next", json={"n": 1})
    r = client.get("/api/session")
    assert r.status_code == 200
    saved_dir = r.json()["saved"]
    label = session.add_label("tmp", (1, 2, 3))
    key = session.by_image["img0"][0]
    session.segments[key].label = label
    r = client.post("/api/session", json={"directory": saved_dir})
    assert r.status_code == 200
    assert r.json()["images"] == 1
    assert service.session.segments[key].label is None  # reload dropped it
    assert client.post("/api/session", json={"directory": str(tmp_path / "void")}).status_code == 400


def test_shutdown_persists_session(tmp_path):
    service = make_service(tmp_path, [STRIP], directory=str(tmp_path / "out"))
    with TestClient(build_app(service)) as client:
        client.post("/api/batch/next", json={"n": 1})
    assert (tmp_path / "out" / "session.json").exists()
