"""Synthetic calibrated scenes: parametric surface patches, ray-cast
rendering, exact visibility, chart geodesics and procedural texture.

Surfaces are thin two-sided shells. Each patch owns one part index and a
chart mapping [0, 1]^2 onto the patch. The renderer casts one ray per
integer pixel coordinate, so a rendered field's uv at pixel (x, y) is the
exact chart coordinate of the surface point under the image point (x, y).
"""

import json
import logging
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .exceptions import ValidationError
from .field import DenseField
from .geometry import Camera, project_points
from .rng import named_stream
from .validation import check_camera

logger = logging.getLogger(__name__)

DEPTH_TOLERANCE = 1e-4  # meters; depth agreement required by the visibility test
_RAY_EPS = 1e-9

DEFAULT_FREQUENCIES = ((3.0, 1.0), (0.0, 2.0), (5.0, 7.0), (11.0, 4.0))


@dataclass(frozen=True)
class Pose:
    """Rigid transform from patch-local to world coordinates."""

    R: np.ndarray = dc_field(default_factory=lambda: np.eye(3))
    t: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))
        if np.max(np.abs(self.R @ self.R.T - np.eye(3))) > 1e-9:
            raise ValidationError("pose rotation is not orthonormal")

    def apply(self, pts):
        return np.asarray(pts, dtype=float) @ self.R.T + self.t

    def invert_points(self, pts):
        return (np.asarray(pts, dtype=float) - self.t) @ self.R

    def invert_dirs(self, dirs):
        return np.asarray(dirs, dtype=float) @ self.R

    def to_dict(self):
        return {"R": [float(v) for v in self.R.reshape(-1)],
                "t": [float(v) for v in self.t]}

    @classmethod
    def from_dict(cls, d):
        if d is None:
            return cls()
        return cls(R=np.array(d["R"], dtype=float).reshape(3, 3),
                   t=np.array(d["t"], dtype=float).reshape(3))


@dataclass(frozen=True)
class SurfacePatch:
    """One chart-parameterized surface piece.

    kind "cylinder": radius, height, angular extent_deg about the local y
    axis, centered on local +z. Chart u follows the arc, v the height.

    kind "sphere": radius, azimuthal extent_deg centered on local +z, and a
    polar band [polar_lo_deg, polar_hi_deg] measured from the local +y pole.
    Chart u follows azimuth, v the polar angle.
    """

    kind: str = "cylinder"
    radius: float = 0.3
    height: float = 1.2
    extent_deg: float = 300.0
    polar_lo_deg: float = 45.0
    polar_hi_deg: float = 135.0
    pose: Pose = dc_field(default_factory=Pose)

    def __post_init__(self):
        if self.kind not in ("cylinder", "sphere"):
            raise ValidationError(f"unknown surface kind {self.kind!r}")
        if self.radius <= 0:
            raise ValidationError("radius must be positive")
        if not 0.0 < self.extent_deg <= 360.0:
            raise ValidationError("extent_deg must lie in (0, 360]")
        if self.kind == "cylinder" and self.height <= 0:
            raise ValidationError("cylinder height must be positive")
        if self.kind == "sphere":
            if not 0.0 <= self.polar_lo_deg < self.polar_hi_deg <= 180.0:
                raise ValidationError("sphere polar band must satisfy 0 <= lo < hi <= 180")

    @property
    def extent_rad(self):
        return math.radians(self.extent_deg)

    def chart_to_local(self, uv):
        uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        if self.kind == "cylinder":
            theta = (uv[:, 0] - 0.5) * self.extent_rad
            y = (uv[:, 1] - 0.5) * self.height
            return np.column_stack(
                [self.radius * np.sin(theta), y, self.radius * np.cos(theta)]
            )
        theta = (uv[:, 0] - 0.5) * self.extent_rad
        lo, hi = math.radians(self.polar_lo_deg), math.radians(self.polar_hi_deg)
        phi = lo + uv[:, 1] * (hi - lo)
        sp = np.sin(phi)
        return self.radius * np.column_stack(
            [sp * np.sin(theta), np.cos(phi), sp * np.cos(theta)]
        )

    def to_dict(self):
        d = {"kind": self.kind, "radius": self.radius, "extent_deg": self.extent_deg,
             "pose": self.pose.to_dict()}
        if self.kind == "cylinder":
            d["height"] = self.height
        else:
            d["polar_lo_deg"] = self.polar_lo_deg
            d["polar_hi_deg"] = self.polar_hi_deg
        return d

    @classmethod
    def from_dict(cls, d):
        kwargs = dict(d)
        kwargs["pose"] = Pose.from_dict(kwargs.get("pose"))
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ValidationError(f"malformed surface record: {exc}") from exc


@dataclass(frozen=True)
class TextureConfig:
    seed: int = 7
    frequencies: tuple = DEFAULT_FREQUENCIES

    def to_dict(self):
        return {"seed": int(self.seed),
                "frequencies": [[float(a), float(b)] for a, b in self.frequencies]}

    @classmethod
    def from_dict(cls, d):
        if d is None:
            return cls()
        freqs = tuple(tuple(float(x) for x in f) for f in d.get("frequencies", DEFAULT_FREQUENCIES))
        return cls(seed=int(d.get("seed", 7)), frequencies=freqs)


@dataclass(eq=False)
class SyntheticScene:
    """Patches (one part each), calibrated cameras and a texture."""

    patches: list
    cameras: list
    resolution: tuple = (64, 64)
    texture: TextureConfig = dc_field(default_factory=TextureConfig)

    def __post_init__(self):
        if not self.patches:
            raise ValidationError("scene needs at least one surface patch")
        if len(self.patches) > 255:
            raise ValidationError("at most 255 parts supported")
        for cam in self.cameras:
            check_camera(cam)
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        self._texture_coeffs = {}

    @property
    def num_parts(self):
        return len(self.patches)

    def to_config(self):
        return {
            "surfaces": [p.to_dict() for p in self.patches],
            "cameras": [c.to_dict() for c in self.cameras],
            "resolution": {"width": self.resolution[0], "height": self.resolution[1]},
            "texture": self.texture.to_dict(),
        }

    @classmethod
    def from_config(cls, cfg):
        if "surfaces" in cfg:
            patches = [SurfacePatch.from_dict(d) for d in cfg["surfaces"]]
        elif "surface" in cfg:
            patches = [SurfacePatch.from_dict(cfg["surface"])]
        else:
            raise ValidationError("scene config needs 'surface' or 'surfaces'")
        res = cfg.get("resolution", {})
        width = int(res.get("width", 64))
        height = int(res.get("height", 64))
        cams_cfg = cfg.get("cameras")
        if cams_cfg is None:
            raise ValidationError("scene config needs 'cameras'")
        if isinstance(cams_cfg, dict) and "ring" in cams_cfg:
            ring = cams_cfg["ring"]
            cameras = camera_ring(
                count=int(ring.get("count", 2)),
                distance=float(ring.get("distance", 1.6)),
                width=width,
                height=height,
                focal=ring.get("focal"),
            )
        elif isinstance(cams_cfg, list):
            cameras = [Camera.from_dict(d) for d in cams_cfg]
        else:
            raise ValidationError("cameras must be a list or a ring spec")
        return cls(
            patches=patches,
            cameras=cameras,
            resolution=(width, height),
            texture=TextureConfig.from_dict(cfg.get("texture")),
        )


@dataclass(eq=False)
class RenderedView:
    """One camera's render: dense field, camera-z depth buffer and RGB."""

    field: DenseField
    depth: np.ndarray
    rgb: np.ndarray
    camera_index: int


def look_at(center, target, up=(0.0, 1.0, 0.0)):
    """Extrinsics (R, t) for a camera at `center` looking at `target`."""
    center = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - center
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ValidationError("camera center coincides with its target")
    z = z / nz
    x = np.cross(z, np.asarray(up, dtype=float))
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise ValidationError("viewing direction parallel to the up vector")
    x = x / nx
    y = np.cross(z, x)
    R = np.vstack([x, y, z])
    return R, -R @ center


def camera_ring(count, distance=1.6, width=64, height=64, focal=None, target=(0, 0, 0)):
    """Cameras on a horizontal ring segment looking at the target.

    Two cameras sit at +-30 degrees (a stereo pair with generous overlap);
    larger rigs fan uniformly across a 120 degree arc so every pair keeps
    mutual visibility on the default surface. A full circle would place
    opposing cameras whose views share nothing.
    """
    if count < 1:
        raise ValidationError("camera ring needs at least one camera")
    if count == 1:
        angles = [0.0]
    elif count == 2:
        angles = [-math.pi / 6.0, math.pi / 6.0]
    else:
        third = math.pi / 3.0
        angles = list(np.linspace(-third, third, count))
    f = float(focal) if focal is not None else 0.94 * height
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    K = np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])
    cams = []
    for ang in angles:
        c = np.array([distance * math.sin(ang), 0.0, distance * math.cos(ang)])
        R, t = look_at(c, target)
        cams.append(Camera(K=K.copy(), R=R, t=t, width=width, height=height))
    return cams


def default_scene(n_cameras=2, resolution=(64, 64), extent_deg=300.0, texture_seed=7):
    """The stock cylinder-patch scene used by tests and the CLI."""
    width, height = resolution
    patch = SurfacePatch(kind="cylinder", radius=0.3, height=1.2, extent_deg=extent_deg)
    cams = camera_ring(n_cameras, distance=1.6, width=width, height=height)
    return SyntheticScene(
        patches=[patch],
        cameras=cams,
        resolution=(width, height),
        texture=TextureConfig(seed=texture_seed),
    )


def surface_point(scene, uv, part=0):
    """World point of chart coordinate uv on the given part.

    uv must lie in [0, 1]^2 (within 1e-9); the chart is not extrapolated.
    """
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    if uv.min(initial=0.0) < -1e-9 or uv.max(initial=0.0) > 1.0 + 1e-9:
        raise ValidationError("uv outside the chart [0, 1]^2")
    patch = _patch(scene, part)
    pts = patch.pose.apply(patch.chart_to_local(np.clip(uv, 0.0, 1.0)))
    return pts[0] if pts.shape[0] == 1 else pts


def surface_points(scene, uv, parts):
    """Vectorized surface_point for per-row part indices."""
    uv = np.clip(np.asarray(uv, dtype=float).reshape(-1, 2), 0.0, 1.0)
    parts = np.asarray(parts, dtype=int).reshape(-1)
    out = np.zeros((len(uv), 3))
    for p in np.unique(parts):
        patch = _patch(scene, int(p))
        sel = parts == p
        out[sel] = patch.pose.apply(patch.chart_to_local(uv[sel]))
    return out


def _patch(scene, part):
    try:
        return scene.patches[int(part)]
    except IndexError:
        raise ValidationError(f"part {part} out of range") from None


def geodesic(scene, uv_a, uv_b, part_a=0, part_b=None, clamp=False):
    """On-surface distance between two chart points, in meters.

    Cylinder charts unroll to the plane, so the distance is the Euclidean
    norm of (R * extent * du, H * dv). Sphere charts use the great circle.
    Points on different parts are infinitely far apart.

    With clamp=True out-of-chart coordinates are clamped to [0, 1] first
    (used when scoring unclamped predictions); otherwise they raise.
    """
    if part_b is None:
        part_b = part_a
    a = np.asarray(uv_a, dtype=float).reshape(-1, 2)
    b = np.asarray(uv_b, dtype=float).reshape(-1, 2)
    scalar = a.shape[0] == 1 and np.asarray(uv_a).ndim == 1
    pa = np.broadcast_to(np.asarray(part_a, dtype=int), (a.shape[0],))
    pb = np.broadcast_to(np.asarray(part_b, dtype=int), (b.shape[0],))
    if clamp:
        a, b = np.clip(a, 0.0, 1.0), np.clip(b, 0.0, 1.0)
    else:
        for arr in (a, b):
            if arr.min(initial=0.0) < -1e-9 or arr.max(initial=0.0) > 1.0 + 1e-9:
                raise ValidationError("uv outside the chart [0, 1]^2")
    out = np.full(a.shape[0], np.inf)
    same = pa == pb
    for p in np.unique(pa[same]):
        patch = _patch(scene, int(p))
        sel = same & (pa == p)
        if patch.kind == "cylinder":
            du = patch.radius * patch.extent_rad * (a[sel, 0] - b[sel, 0])
            dv = patch.height * (a[sel, 1] - b[sel, 1])
            out[sel] = np.hypot(du, dv)
        else:
            la = patch.chart_to_local(a[sel]) / patch.radius
            lb = patch.chart_to_local(b[sel]) / patch.radius
            cosang = np.clip(np.sum(la * lb, axis=1), -1.0, 1.0)
            out[sel] = patch.radius * np.arccos(cosang)
    return float(out[0]) if scalar else out


def texture_rgb(scene, uv, part):
    """Procedural multi-frequency texture, float RGB in [0, 1].

    Deterministic in (texture.seed, part). Amplitudes are normalized so the
    channel range stays inside [0.05, 0.95]; with several incommensurate
    frequencies nearby chart points get distinct colors.
    """
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    part = int(part)
    coeffs = scene._texture_coeffs.get(part)
    if coeffs is None:
        rng = named_stream(scene.texture.seed, f"texture-part{part}")
        k = len(scene.texture.frequencies)
        raw = rng.uniform(0.4, 1.0, size=(3, k))
        amps = raw / raw.sum(axis=1, keepdims=True) * 0.45
        phases = rng.uniform(0.0, 2.0 * np.pi, size=(3, k))
        freqs = np.asarray(scene.texture.frequencies, dtype=float)
        coeffs = (amps, phases, freqs)
        scene._texture_coeffs[part] = coeffs
    amps, phases, freqs = coeffs
    arg = 2.0 * np.pi * (uv @ freqs.T)  # (N, k)
    out = np.empty((len(uv), 3))
    for c in range(3):
        out[:, c] = 0.5 + np.sum(amps[c] * np.sin(arg + phases[c]), axis=1)
    return np.clip(out, 0.0, 1.0)


def _intersect_patch(patch, origins, dirs):
    """Ray-patch intersections in world space.

    Returns (t, uv, valid) with two candidate roots per ray, shapes
    (N, 2), (N, 2, 2), (N, 2). t is the ray parameter for unnormalized
    dirs. The shell is two-sided: both roots are real hits when they land
    inside the chart window.
    """
    o = patch.pose.invert_points(origins)
    d = patch.pose.invert_dirs(dirs)
    n = o.shape[0]
    t = np.full((n, 2), np.inf)
    uv = np.zeros((n, 2, 2))
    valid = np.zeros((n, 2), dtype=bool)

    if patch.kind == "cylinder":
        a = d[:, 0] ** 2 + d[:, 2] ** 2
        b = 2.0 * (o[:, 0] * d[:, 0] + o[:, 2] * d[:, 2])
        c = o[:, 0] ** 2 + o[:, 2] ** 2 - patch.radius**2
    else:
        a = np.sum(d * d, axis=1)
        b = 2.0 * np.sum(o * d, axis=1)
        c = np.sum(o * o, axis=1) - patch.radius**2

    disc = b * b - 4.0 * a * c
    solvable = (disc >= 0.0) & (a > 1e-16)
    sq = np.sqrt(np.where(solvable, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        roots = np.stack(
            [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)], axis=1
        )
    roots[~solvable] = np.inf

    half_extent = patch.extent_rad / 2.0
    for r in range(2):
        tr = roots[:, r]
        ok = solvable & np.isfinite(tr) & (tr > _RAY_EPS)
        if not ok.any():
            continue
        p = o[ok] + tr[ok, None] * d[ok]
        if patch.kind == "cylinder":
            theta = np.arctan2(p[:, 0], p[:, 2])
            inside = (np.abs(theta) <= half_extent) & (
                np.abs(p[:, 1]) <= patch.height / 2.0
            )
            u = theta / patch.extent_rad + 0.5
            v = p[:, 1] / patch.height + 0.5
        else:
            theta = np.arctan2(p[:, 0], p[:, 2])
            phi = np.arccos(np.clip(p[:, 1] / patch.radius, -1.0, 1.0))
            lo = math.radians(patch.polar_lo_deg)
            hi = math.radians(patch.polar_hi_deg)
            inside = (np.abs(theta) <= half_extent) & (phi >= lo) & (phi <= hi)
            u = theta / patch.extent_rad + 0.5
            v = (phi - lo) / (hi - lo)
        idx = np.nonzero(ok)[0]
        sel = idx[inside]
        t[sel, r] = tr[sel]
        uv[sel, r, 0] = np.clip(u[inside], 0.0, 1.0)
        uv[sel, r, 1] = np.clip(v[inside], 0.0, 1.0)
        valid[sel, r] = True
    return t, uv, valid


def cast_rays(scene, origins, dirs):
    """First-hit query over all patches.

    Returns (t, part, uv, hit): ray parameters of the nearest valid hit
    (inf where the scene is missed), the part index, its chart coordinate
    and a hit mask.
    """
    origins = np.asarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best_part = np.zeros(n, dtype=np.int64)
    best_uv = np.zeros((n, 2))
    for pi, patch in enumerate(scene.patches):
        t, uv, valid = _intersect_patch(patch, origins, dirs)
        t = np.where(valid, t, np.inf)
        for r in range(2):
            closer = t[:, r] < best_t
            best_t[closer] = t[closer, r]
            best_part[closer] = pi
            best_uv[closer] = uv[closer, r]
    hit = np.isfinite(best_t)
    return best_t, best_part, best_uv, hit


def _pixel_rays(camera):
    """Unnormalized world rays through every integer pixel; the ray
    parameter equals camera-frame depth (unit z in the camera frame)."""
    w, h = camera.width, camera.height
    xs, ys = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    ones = np.ones_like(xs)
    hpix = np.stack([xs, ys, ones], axis=-1).reshape(-1, 3)
    dirs_cam = np.linalg.solve(camera.K, hpix.T).T
    dirs_world = dirs_cam @ camera.R
    return dirs_world


def render(scene, camera_index):
    """Ray-cast one camera into a RenderedView.

    Depth is camera-frame z in meters (inf on background); the field's uv
    is the exact chart coordinate under each pixel; RGB samples the
    procedural texture and quantizes to uint8.
    """
    cam = scene.cameras[camera_index]
    w, h = cam.width, cam.height
    dirs = _pixel_rays(cam)
    origins = np.broadcast_to(cam.center, dirs.shape)
    t, part, uv, hit = cast_rays(scene, origins, dirs)

    depth = np.where(hit, t, np.inf).reshape(h, w)
    fg = hit.reshape(h, w)
    part_map = np.where(hit, part, 0).reshape(h, w).astype(np.uint8)
    uv_map = np.where(hit[:, None], uv, 0.0).reshape(h, w, 2)

    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    if hit.any():
        flat = np.zeros((hit.sum(), 3))
        hp = part[hit]
        huv = uv[hit]
        for p in np.unique(hp):
            sel = hp == p
            flat[sel] = texture_rgb(scene, huv[sel], int(p))
        rgb[fg] = np.round(flat * 255.0).astype(np.uint8)

    field = DenseField(fg, part_map, uv_map, num_parts=scene.num_parts)
    return RenderedView(field=field, depth=depth, rgb=rgb, camera_index=camera_index)


def view_world_points(scene, view):
    """World points under a view's foreground pixels, in row-major
    foreground order. Reconstructed exactly from the depth buffer."""
    cam = scene.cameras[view.camera_index]
    fg = view.field.foreground
    dirs = _pixel_rays(cam).reshape(cam.height, cam.width, 3)[fg]
    t = view.depth[fg]
    return cam.center + t[:, None] * dirs


def point_visibility(scene, points, camera_index, tau_z=DEPTH_TOLERANCE):
    """Boolean per 3D point: positive camera depth, projection inside the
    pixel grid, and unoccluded along the exact camera ray.

    Occlusion compares the point's camera depth against the scene's first
    analytic ray hit, within tau_z meters. The exact two-sided ray test
    is used rather than a depth-buffer lookup: at slanted regions a
    nearest-pixel buffer quantizes depth by centimeters and masks out
    genuinely visible surface.
    """
    cam = scene.cameras[camera_index]
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    px, depth = project_points(cam, pts)
    ok = (
        (depth > 0)
        & np.isfinite(px).all(axis=1)
        & (px[:, 0] >= 0.0)
        & (px[:, 0] <= cam.width - 1.0)
        & (px[:, 1] >= 0.0)
        & (px[:, 1] <= cam.height - 1.0)
    )
    vis = np.zeros(len(pts), dtype=bool)
    if ok.any():
        dirs = pts[ok] - cam.center
        t_hit, _, _, hit = cast_rays(
            scene, np.broadcast_to(cam.center, dirs.shape), dirs
        )
        # ray parameter 1 lands exactly on the point, and dirs carry the
        # point's camera depth as their z scale
        z_hit = np.where(hit, t_hit, np.inf) * depth[ok]
        vis[ok] = hit & (np.abs(z_hit - depth[ok]) <= tau_z)
    return vis


def visibility(scene, view_a, view_b, tau_z=DEPTH_TOLERANCE):
    """Boolean map over A's grid: foreground pixels of A whose surface
    point is visible in view B."""
    fg = view_a.field.foreground
    out = np.zeros_like(fg)
    if not fg.any():
        return out
    pts = view_world_points(scene, view_a)
    out[fg] = point_visibility(scene, pts, view_b.camera_index, tau_z)
    return out


def save_scene_config(path, scene):
    with open(path, "w") as fh:
        json.dump(scene.to_config(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scene_config(path):
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
    return SyntheticScene.from_config(cfg)
