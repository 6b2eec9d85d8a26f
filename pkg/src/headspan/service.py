"""HTTP render service over a loaded checkpoint.

Read-only snapshot semantics: concurrent requests render against an
immutable model reference; POST /model/reload swaps the snapshot
atomically. JSON in, PNG out; permissive CORS for the browser explorer.
"""

import io
import json
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .cameras import Camera, orbit_camera
from .errors import InvalidParameterError
from .imgio import save_png_u8
from .model import PersonalizedModel

MAX_IMAGE_SIZE_DEFAULT = 512


@dataclass(frozen=True)
class Snapshot:
    model: PersonalizedModel
    iteration: int
    checkpoint_path: str


class FieldError(Exception):
    def __init__(self, field, message):
        super().__init__(message)
        self.field = field


def load_snapshot(checkpoint_path) -> Snapshot:
    from .training import load_checkpoint

    ck = load_checkpoint(checkpoint_path)
    return Snapshot(model=ck.model, iteration=ck.iteration,
                    checkpoint_path=str(checkpoint_path))


def model_info(snap: Snapshot, max_image_size: int) -> dict:
    m = snap.model
    return {
        "lifestages": [{"id": i, "name": n}
                       for i, n in enumerate(m.lifestage_names)],
        "active_basis_count": int(m.bank.active_count),
        "num_bases": int(m.bank.size),
        "shape_coefficients": int(m.template.num_shape),
        "expression_coefficients": int(m.template.num_expression),
        "checkpoint_iteration": int(snap.iteration),
        "sh_degree": int(m.sh_degree),
        "max_image_size": int(max_image_size),
    }


def parse_render_request(model: PersonalizedModel, req: dict,
                         max_image_size: int):
    """Validate a render request; raises FieldError with the offending
    field name."""
    if not isinstance(req, dict):
        raise FieldError("body", "request body must be a JSON object")
    spec = None
    if "lifestage_weights" in req and req["lifestage_weights"] is not None:
        raw = req["lifestage_weights"]
        if not isinstance(raw, dict) or not raw:
            raise FieldError("lifestage_weights",
                             "must be a non-empty {id: weight} object")
        spec = {}
        for k, v in raw.items():
            try:
                i = int(k)
            except (TypeError, ValueError):
                raise FieldError("lifestage_weights",
                                 f"lifestage id {k!r} is not an integer")
            if not 0 <= i < model.num_lifestages:
                raise FieldError("lifestage_weights",
                                 f"unknown lifestage id {i}")
            try:
                w = float(v)
            except (TypeError, ValueError):
                raise FieldError("lifestage_weights",
                                 f"weight for lifestage {i} is not a number")
            if w < 0:
                raise FieldError("lifestage_weights",
                                 "weights must be non-negative")
            spec[i] = w
        if sum(spec.values()) <= 0:
            raise FieldError("lifestage_weights", "weights sum to zero")
    elif "lifestage" in req and req["lifestage"] is not None:
        try:
            spec = int(req["lifestage"])
        except (TypeError, ValueError):
            raise FieldError("lifestage", "must be an integer id")
        if not 0 <= spec < model.num_lifestages:
            raise FieldError("lifestage", f"unknown lifestage id {spec}")
    else:
        raise FieldError("lifestage",
                         "provide 'lifestage' or 'lifestage_weights'")

    def coeffs(name, count):
        raw = req.get(name)
        if raw is None:
            return np.zeros(count)
        arr = np.asarray(raw, dtype=np.float64)
        if arr.shape != (count,):
            raise FieldError(name, f"expected {count} coefficients, "
                                   f"got {list(arr.shape)}")
        if not np.all(np.isfinite(arr)):
            raise FieldError(name, "coefficients must be finite")
        return arr

    shape = coeffs("shape_coeffs", model.template.num_shape)
    expr = coeffs("expression_coeffs", model.template.num_expression)
    pose = None
    if req.get("head_pose") is not None:
        pose = np.asarray(req["head_pose"], dtype=np.float64)
        if pose.shape != (4, 4):
            raise FieldError("head_pose", "must be a 4x4 matrix")
        from .geometry import is_rigid

        if not is_rigid(pose):
            raise FieldError("head_pose", "must be a rigid transform")

    cam_req = req.get("camera") or {}
    if not isinstance(cam_req, dict):
        raise FieldError("camera", "must be an object")
    width = int(cam_req.get("width", 256))
    height = int(cam_req.get("height", 256))
    if width < 1 or height < 1:
        raise FieldError("camera", "image size must be positive")
    if width > max_image_size or height > max_image_size:
        raise FieldError("camera",
                         f"image size exceeds the {max_image_size} limit")
    if "world_to_camera" in cam_req:
        # explicit pinhole camera (reproduces recorded frames exactly)
        try:
            camera = Camera.from_dict(cam_req)
        except (KeyError, InvalidParameterError) as e:
            raise FieldError("camera", f"invalid explicit camera: {e}")
        return spec, shape, expr, pose, camera
    center = model.surfels.centers.mean(axis=0)
    radius = float(np.linalg.norm(model.surfels.centers - center,
                                  axis=1).max())
    if "target" in cam_req:
        target = np.asarray(cam_req["target"], dtype=np.float64)
        if target.shape != (3,):
            raise FieldError("camera", "target must be a 3-vector")
        center = target
    azimuth = float(cam_req.get("azimuth", 0.0))
    elevation = float(cam_req.get("elevation", 0.0))
    distance = float(cam_req.get("distance", 2.6 * max(radius, 1e-6)))
    if distance <= 0:
        raise FieldError("camera", "distance must be positive")
    camera = orbit_camera(center, azimuth, elevation, distance, width, height)
    return spec, shape, expr, pose, camera


def render_png(model: PersonalizedModel, spec, shape, expr, camera,
               head_pose=None, background=(0.0, 0.0, 0.0)) -> bytes:
    """Render one request to PNG bytes via the same render/encode calls
    the CLI render command makes, so identical controls yield identical
    payloads."""
    out, _ = model.render_view(camera, spec, shape_coeffs=shape,
                               expression_coeffs=expr, head_pose=head_pose,
                               background=background, with_grad=False)
    buf = io.BytesIO()
    save_png_u8(buf, out.color)
    return buf.getvalue()


class RenderService:
    def __init__(self, checkpoint_path, host="127.0.0.1", port=8080,
                 max_image_size=MAX_IMAGE_SIZE_DEFAULT):
        self.snapshot = load_snapshot(checkpoint_path)
        self.max_image_size = max_image_size
        self.host = host
        self.port = port
        self._reload_lock = threading.Lock()
        service = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                pass

            def _send(self, code, payload: bytes, ctype: str,
                      extra_headers=None):
                self.send_response(code)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(payload)))
                self.send_header("Access-Control-Allow-Origin", "*")
                for k, v in (extra_headers or {}).items():
                    self.send_header(k, v)
                self.end_headers()
                self.wfile.write(payload)

            def _json(self, code, doc, extra_headers=None):
                self._send(code, json.dumps(doc).encode(), "application/json",
                           extra_headers)

            def do_OPTIONS(self):
                self.send_response(204)
                self.send_header("Access-Control-Allow-Origin", "*")
                self.send_header("Access-Control-Allow-Methods",
                                 "GET, POST, OPTIONS")
                self.send_header("Access-Control-Allow-Headers",
                                 "Content-Type")
                self.send_header("Content-Length", "0")
                self.end_headers()

            def do_GET(self):
                if self.path == "/model/info":
                    snap = service.snapshot
                    self._json(200, model_info(snap, service.max_image_size))
                else:
                    self._json(404, {"error": f"unknown route {self.path}"})

            def _read_body(self):
                n = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(n) if n else b""
                try:
                    return json.loads(raw.decode() or "{}")
                except json.JSONDecodeError as e:
                    raise FieldError("body", f"invalid JSON: {e}")

            def do_POST(self):
                try:
                    if self.path == "/render":
                        req = self._read_body()
                        snap = service.snapshot
                        try:
                            spec, shape, expr, pose, cam = parse_render_request(
                                snap.model, req, service.max_image_size)
                        except FieldError as e:
                            code = 400
                            if e.field == "camera" and "limit" in str(e):
                                code = 413
                            self._json(code, {"error": str(e),
                                              "field": e.field})
                            return
                        t0 = time.perf_counter()
                        png = render_png(snap.model, spec, shape, expr, cam,
                                         head_pose=pose)
                        ms = (time.perf_counter() - t0) * 1000.0
                        self._send(200, png, "image/png",
                                   {"X-Render-Millis": f"{ms:.2f}"})
                    elif self.path == "/model/reload":
                        req = self._read_body()
                        path = req.get("checkpoint")
                        if not path:
                            self._json(400, {"error": "checkpoint required",
                                             "field": "checkpoint"})
                            return
                        with service._reload_lock:
                            snap = load_snapshot(path)
                            service.snapshot = snap  # single atomic swap
                        self._json(200, model_info(snap,
                                                   service.max_image_size))
                    else:
                        self._json(404, {"error": f"unknown route {self.path}"})
                except FieldError as e:
                    self._json(400, {"error": str(e), "field": e.field})
                except Exception as e:  # internal fault
                    self._json(500, {"error": f"internal error: {e}"})

        self._server = ThreadingHTTPServer((host, port), Handler)
        self.port = self._server.server_port

    def serve_forever(self):
        print(f"render service on http://{self.host}:{self.port}")
        self._server.serve_forever()

    def start_background(self):
        t = threading.Thread(target=self._server.serve_forever, daemon=True)
        t.start()
        return t

    def shutdown(self):
        self._server.shutdown()
        self._server.server_close()
