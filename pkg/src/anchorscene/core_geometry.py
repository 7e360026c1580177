"""Camera models, viewpoint trajectories, procedural room layouts, and
depth rendering from layout geometry by ray casting.

World frame: +Z up, +Y toward the selected wall, right-handed. Camera frame:
+z forward (optical axis), +x right, +y down; `CameraPose` stores the
world-to-camera map p_cam = R @ p_world + t. Depth is camera-frame z
("z-depth"), not ray length.

Yaw 0 faces the selected wall; yaw is measured so that a counterclockwise
sweep (viewed from above) is a *decreasing* yaw sequence mod 360.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import GeometryError, InputError, ParseError, PlacementError
from .rasters import DepthMap, PointMap

_ORTHO_TOL = 1e-9
_RAY_EPS = 1e-9
_BARY_EPS = 1e-10


class SurfaceLabel(Enum):
    WALL = "wall"
    FLOOR = "floor"
    CEILING = "ceiling"
    FURNITURE = "furniture"


class Stage(Enum):
    INPAINT = "inpaint"
    REFINE = "refine"
    POST_OPT = "post_opt"


class Direction(Enum):
    CCW = "ccw"
    CW = "cw"


class Proximity(Enum):
    CLOSE = "close"
    DISTANT = "distant"


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InputError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InputError("principal point must lie inside the image")
        if self.width < 16 or self.height < 16:
            raise InputError("image size must be at least 16x16")

    @staticmethod
    def default(size: int = 512) -> "CameraIntrinsics":
        # 90-degree horizontal FOV: fx = width / 2.
        return CameraIntrinsics(fx=size / 2.0, fy=size / 2.0, cx=size / 2.0,
                                cy=size / 2.0, width=size, height=size)

    def crop_sides(self, margin_px: int) -> "CameraIntrinsics":
        """Intrinsics of the image with `margin_px` columns removed per side."""
        if margin_px == 0:
            return self
        return CameraIntrinsics(fx=self.fx, fy=self.fy, cx=self.cx - margin_px,
                                cy=self.cy, width=self.width - 2 * margin_px,
                                height=self.height)


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform: p_cam = rotation @ p_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise InputError("pose needs a 3x3 rotation and a 3-vector translation")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise InputError(f"rotation is not orthonormal (max deviation {err:.3e})")
        if np.linalg.det(self.rotation) < 0:
            raise InputError("rotation must be proper (det +1)")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def cam_to_world(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation


@dataclass(frozen=True)
class Viewpoint:
    index: int
    yaw_deg: float
    pose: CameraPose
    proximity: Proximity


@dataclass(frozen=True)
class TrajectoryConfig:
    stage: Stage
    n_views: int
    direction: Direction

    _DEFAULTS = {
        Stage.INPAINT: (20, Direction.CCW),
        Stage.REFINE: (8, Direction.CW),
        Stage.POST_OPT: (15, Direction.CW),
    }

    @classmethod
    def for_stage(cls, stage: Stage, n_views: int | None = None) -> "TrajectoryConfig":
        default_n, direction = cls._DEFAULTS[stage]
        return cls(stage=stage, n_views=n_views if n_views is not None else default_n,
                   direction=direction)


@dataclass
class LayoutScene:
    """Triangle-soup room geometry with per-triangle labels and quad grouping.

    Triangles come in consecutive pairs forming quads; `quad_ids[i]` maps
    triangle i to its quad. `selected_wall` is the quad id of the inward
    face of the +Y wall.
    """

    triangles: np.ndarray        # (T, 3, 3) vertices, meters
    labels: np.ndarray           # (T,) SurfaceLabel values as objects
    quad_ids: np.ndarray         # (T,) int
    room_aabb: np.ndarray        # (2, 3) min/max corners
    selected_wall: int
    center: np.ndarray           # (3,)

    def __post_init__(self):
        self.triangles = np.asarray(self.triangles, dtype=np.float64)
        self.quad_ids = np.asarray(self.quad_ids, dtype=np.int64)
        self.room_aabb = np.asarray(self.room_aabb, dtype=np.float64)
        self.center = np.asarray(self.center, dtype=np.float64)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def quad_vertices(self, quad_id: int) -> np.ndarray:
        """The 4 distinct corners of a quad (its two triangles)."""
        tris = self.triangles[self.quad_ids == quad_id].reshape(-1, 3)
        return np.unique(np.round(tris, 12), axis=0)


@dataclass(frozen=True)
class RoomSpec:
    """Procedural room parameters: extents in meters, furniture box count."""

    width: float = 4.0       # x extent
    depth: float = 5.0       # y extent
    height: float = 2.8      # z extent
    furniture_count: int = 0
    # (w, d, h) sampling ranges for furniture boxes, meters
    furniture_size_range: tuple[tuple[float, float], ...] = (
        (0.4, 1.2), (0.4, 1.2), (0.4, 1.5))

    def __post_init__(self):
        if min(self.width, self.depth, self.height) <= 0:
            raise InputError("room dimensions must be positive")
        if self.furniture_count < 0:
            raise InputError("furniture count must be >= 0")


# ---------------------------------------------------------------------------
# Procedural layout


def _quad_triangles(corners: np.ndarray) -> np.ndarray:
    """Split a planar quad (4 corners, consistent winding) into 2 triangles."""
    a, b, c, d = corners
    return np.array([[a, b, c], [a, c, d]])


def _box_faces(lo: np.ndarray, hi: np.ndarray) -> list[np.ndarray]:
    """Six quad faces of an axis-aligned box, as corner arrays."""
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    return [
        np.array([[x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0]]),  # bottom
        np.array([[x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]]),  # top
        np.array([[x0, y0, z0], [x1, y0, z0], [x1, y0, z1], [x0, y0, z1]]),  # -y
        np.array([[x0, y1, z0], [x1, y1, z0], [x1, y1, z1], [x0, y1, z1]]),  # +y
        np.array([[x0, y0, z0], [x0, y1, z0], [x0, y1, z1], [x0, y0, z1]]),  # -x
        np.array([[x1, y0, z0], [x1, y1, z0], [x1, y1, z1], [x1, y0, z1]]),  # +x
    ]


def procedural_layout(seed: int, spec: RoomSpec = RoomSpec()) -> LayoutScene:
    """Deterministic rectangular room with non-overlapping furniture boxes.

    The room shell (4 walls, floor, ceiling) is emitted double-sided —
    one inward and one outward quad per face — so ray casting is robust
    regardless of winding: 12 quads / 24 triangles for an empty room.
    The selected wall is the inward face of the +Y wall.
    """
    rng = np.random.default_rng(seed)
    hw, hd = spec.width / 2.0, spec.depth / 2.0
    lo = np.array([-hw, -hd, 0.0])
    hi = np.array([hw, hd, spec.height])
    center = (lo + hi) / 2.0

    tris: list[np.ndarray] = []
    labels: list[SurfaceLabel] = []
    quad_ids: list[int] = []
    selected_wall = -1

    def add_quad(corners: np.ndarray, label: SurfaceLabel) -> int:
        qid = (quad_ids[-1] + 1) if quad_ids else 0
        for tri in _quad_triangles(corners):
            tris.append(tri)
            labels.append(label)
            quad_ids.append(qid)
        return qid

    shell = _box_faces(lo, hi)
    face_labels = [SurfaceLabel.FLOOR, SurfaceLabel.CEILING,
                   SurfaceLabel.WALL, SurfaceLabel.WALL,
                   SurfaceLabel.WALL, SurfaceLabel.WALL]
    for face, label in zip(shell, face_labels):
        qid = add_quad(face, label)                    # inward-facing
        add_quad(face[::-1].copy(), label)             # outward-facing duplicate
        is_pos_y_wall = label is SurfaceLabel.WALL and np.allclose(face[:, 1], hd)
        if is_pos_y_wall:
            selected_wall = qid

    boxes: list[tuple[np.ndarray, np.ndarray]] = []
    margin = 0.1
    max_attempts = 100 * max(spec.furniture_count, 1)
    attempts = 0
    while len(boxes) < spec.furniture_count:
        if attempts >= max_attempts:
            raise PlacementError(
                f"could not place {spec.furniture_count} furniture boxes "
                f"without overlap after {max_attempts} attempts")
        attempts += 1
        size = np.array([rng.uniform(a, b) for a, b in spec.furniture_size_range])
        if (size >= np.array([spec.width, spec.depth, spec.height]) - 2 * margin).any():
            continue
        pos_lo = np.array([
            rng.uniform(-hw + margin, hw - margin - size[0]),
            rng.uniform(-hd + margin, hd - margin - size[1]),
            0.0,
        ])
        pos_hi = pos_lo + size
        overlaps = any((pos_lo < bhi).all() and (blo < pos_hi).all() for blo, bhi in boxes)
        if overlaps:
            continue
        boxes.append((pos_lo, pos_hi))
        for face in _box_faces(pos_lo, pos_hi):
            add_quad(face, SurfaceLabel.FURNITURE)

    return LayoutScene(
        triangles=np.array(tris).reshape(-1, 3, 3),
        labels=np.array(labels, dtype=object),
        quad_ids=np.array(quad_ids),
        room_aabb=np.stack([lo, hi]),
        selected_wall=selected_wall,
        center=center,
    )


# ---------------------------------------------------------------------------
# Trajectories


def pose_from_yaw(yaw_deg: float, position: np.ndarray) -> CameraPose:
    """World-to-camera pose of a camera at `position` looking at bearing
    `yaw_deg` (0 = +Y, decreasing yaw = counterclockwise from above)."""
    rad = np.deg2rad(yaw_deg)
    forward = np.array([np.sin(rad), np.cos(rad), 0.0])   # camera +z
    down = np.array([0.0, 0.0, -1.0])                     # camera +y
    right = np.cross(down, forward)                       # camera +x
    rotation = np.stack([right, down, forward])
    translation = -rotation @ np.asarray(position, dtype=np.float64)
    return CameraPose(rotation=rotation, translation=translation)


def classify_view(yaw_deg: float, stage: Stage, index: int, n_views: int) -> Proximity:
    """Close/distant classification of a viewpoint.

    Inpaint stage: close iff yaw in (0°, 90°) ∪ (270°, 360°); yaw 0 is the
    input view itself and is exempt (distant). Refine stage: close iff the
    viewpoint is the first or last of the trajectory. Post-opt views are
    never close (no per-view generation happens there).
    """
    if not (0.0 <= yaw_deg < 360.0):
        raise InputError(f"yaw must lie in [0, 360), got {yaw_deg}")
    if stage is Stage.INPAINT:
        if yaw_deg == 0.0:
            return Proximity.DISTANT
        if 0.0 < yaw_deg < 90.0 or 270.0 < yaw_deg < 360.0:
            return Proximity.CLOSE
        return Proximity.DISTANT
    if stage is Stage.REFINE:
        return Proximity.CLOSE if index in (0, n_views - 1) else Proximity.DISTANT
    return Proximity.DISTANT


def build_trajectory(layout: LayoutScene, config: TrajectoryConfig) -> list[Viewpoint]:
    """Uniform 360° yaw sweep at the room center, starting at the selected wall."""
    if config.n_views < 2:
        raise InputError("a trajectory needs at least 2 views")
    step = 360.0 / config.n_views
    sign = -1.0 if config.direction is Direction.CCW else 1.0
    views = []
    for k in range(config.n_views):
        yaw = (sign * k * step) % 360.0
        pose = pose_from_yaw(yaw, layout.center)
        prox = classify_view(yaw, config.stage, k, config.n_views)
        views.append(Viewpoint(index=k, yaw_deg=yaw, pose=pose, proximity=prox))
    return views


# ---------------------------------------------------------------------------
# Ray casting


def _pixel_rays(intrinsics: CameraIntrinsics, pose: CameraPose):
    """World-frame ray origins/directions; directions scaled so the ray
    parameter t equals camera z-depth."""
    u = np.arange(intrinsics.width, dtype=np.float64)
    v = np.arange(intrinsics.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([(uu - intrinsics.cx) / intrinsics.fx,
                      (vv - intrinsics.cy) / intrinsics.fy,
                      np.ones_like(uu)], axis=-1)
    d_world = d_cam @ pose.rotation  # R^T applied row-wise
    origin = pose.center
    return origin, d_world.reshape(-1, 3)


def render_depth(layout: LayoutScene, intrinsics: CameraIntrinsics,
                 pose: CameraPose) -> DepthMap:
    """Z-depth of the nearest ray–triangle hit per pixel (Möller–Trumbore).

    The layout must be watertight as seen from the camera; a miss raises
    GeometryError identifying the offending pixel.
    """
    origin, dirs = _pixel_rays(intrinsics, pose)
    n_px = dirs.shape[0]
    best = np.full(n_px, np.inf)

    v0 = layout.triangles[:, 0]
    e1 = layout.triangles[:, 1] - v0
    e2 = layout.triangles[:, 2] - v0
    for i in range(layout.n_triangles):
        pvec = np.cross(dirs, e2[i])
        det = pvec @ e1[i]
        ok = np.abs(det) > 1e-14
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = origin - v0[i]
        u = (pvec @ tvec) * inv_det
        qvec = np.cross(tvec, e1[i])
        v = (dirs @ qvec) * inv_det
        t = (qvec @ e2[i]) * inv_det
        hit = (ok & (u >= -_BARY_EPS) & (v >= -_BARY_EPS)
               & (u + v <= 1.0 + _BARY_EPS) & (t > _RAY_EPS))
        best = np.where(hit & (t < best), t, best)

    misses = ~np.isfinite(best)
    if misses.any():
        flat = int(np.argmax(misses))
        raise GeometryError("ray escaped the layout; geometry is not watertight",
                            pixel=(flat // intrinsics.width, flat % intrinsics.width))
    return DepthMap(best.reshape(intrinsics.height, intrinsics.width))


def unproject(depth: DepthMap, intrinsics: CameraIntrinsics,
              pose: CameraPose) -> PointMap:
    """Lift a depth map to per-pixel world points; invalid depth stays invalid."""
    h, w = depth.shape
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    z = np.where(depth.validity, depth.values, 1.0)
    p_cam = np.stack([z * (uu - intrinsics.cx) / intrinsics.fx,
                      z * (vv - intrinsics.cy) / intrinsics.fy,
                      z], axis=-1)
    points = pose.cam_to_world(p_cam.reshape(-1, 3)).reshape(h, w, 3)
    points = np.where(depth.validity[..., None], points, 0.0)
    return PointMap(points=points, validity=depth.validity.copy())


def project(points: np.ndarray, validity: np.ndarray,
            intrinsics: CameraIntrinsics, pose: CameraPose):
    """Project world points to (pixel u, pixel v, z-depth, validity).

    Points behind the camera (z <= 1e-6) are flagged invalid. Accepts any
    leading shape; returns arrays of that shape.
    """
    pts = np.asarray(points, dtype=np.float64)
    lead = pts.shape[:-1]
    p_cam = pose.world_to_cam(pts.reshape(-1, 3))
    z = p_cam[:, 2]
    ok = np.asarray(validity, dtype=bool).reshape(-1) & (z > 1e-6)
    safe_z = np.where(ok, z, 1.0)
    u = intrinsics.fx * p_cam[:, 0] / safe_z + intrinsics.cx
    v = intrinsics.fy * p_cam[:, 1] / safe_z + intrinsics.cy
    return (u.reshape(lead), v.reshape(lead), z.reshape(lead), ok.reshape(lead))


# ---------------------------------------------------------------------------
# Layout import/export: PLY triangle mesh + JSON sidecar


def save_layout(layout: LayoutScene, ply_path, sidecar_path) -> None:
    """Binary little-endian PLY (vertex + face) plus a JSON sidecar holding
    {selected_wall, center, labels, quad_ids}."""
    tris = layout.triangles.reshape(-1, 3).astype("<f4")
    n_vert = len(tris)
    n_face = layout.n_triangles
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n_vert}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {n_face}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    with open(ply_path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(tris.tobytes())
        for i in range(n_face):
            fh.write(struct.pack("<Biii", 3, 3 * i, 3 * i + 1, 3 * i + 2))
    sidecar = {
        "selected_wall": int(layout.selected_wall),
        "center": [float(x) for x in layout.center],
        "room_aabb": [[float(x) for x in row] for row in layout.room_aabb],
        "labels": [lab.value for lab in layout.labels],
        "quad_ids": [int(q) for q in layout.quad_ids],
    }
    Path(sidecar_path).write_text(json.dumps(sidecar, indent=2))


def load_layout(ply_path, sidecar_path) -> LayoutScene:
    raw = Path(ply_path).read_bytes()
    end = raw.find(b"end_header\n")
    if end < 0:
        raise ParseError("missing PLY end_header", byte_offset=0)
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]
    n_vert = n_face = None
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
    if n_vert is None or n_face is None:
        raise ParseError("PLY header lacks vertex/face elements", byte_offset=0)
    vert_bytes = n_vert * 12
    verts = np.frombuffer(body[:vert_bytes], dtype="<f4").reshape(n_vert, 3)
    faces = np.zeros((n_face, 3), dtype=np.int64)
    off = vert_bytes
    for i in range(n_face):
        cnt = body[off]
        if cnt != 3:
            raise ParseError(f"non-triangle face ({cnt} vertices)",
                             byte_offset=end + 11 + off)
        faces[i] = struct.unpack_from("<iii", body, off + 1)
        off += 13
    meta = json.loads(Path(sidecar_path).read_text())
    tris = verts[faces.reshape(-1)].reshape(-1, 3, 3).astype(np.float64)
    return LayoutScene(
        triangles=tris,
        labels=np.array([SurfaceLabel(v) for v in meta["labels"]], dtype=object),
        quad_ids=np.array(meta["quad_ids"], dtype=np.int64),
        room_aabb=np.array(meta["room_aabb"], dtype=np.float64),
        selected_wall=int(meta["selected_wall"]),
        center=np.array(meta["center"], dtype=np.float64),
    )
