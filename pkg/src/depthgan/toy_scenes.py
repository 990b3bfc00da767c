"""Procedural cuboid rooms rendered to exact RGBD, plus dataset files on disk.

A scene lives in its own canonical frame, which is the camera frame at
``theta = 0``. Rendering at ``theta`` rotates the whole scene about the
vertical axis through ``(0, 0, camera_distance)`` while the camera stays put,
which is the same motion the rotation-consistency warp undoes.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from . import io
from .camera import CameraIntrinsics, intrinsics_from_focal

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1

DEFAULT_NEAR = 0.5
DEFAULT_FAR = 10.0
DEFAULT_PIVOT_DEPTH = 4.0
# strength of the depth cue baked into albedo: c / (1 + alpha * z)
DEFAULT_SHADING = 0.12


@dataclass
class Cuboid:
    center: tuple
    half_extents: tuple
    albedo: tuple


@dataclass
class SceneSpec:
    half_extents: tuple = (3.2, 2.0, 4.5)
    objects: List[Cuboid] = field(default_factory=list)
    wall_albedo: tuple = (0.8, 0.75, 0.7)
    floor_albedo: tuple = (0.45, 0.3, 0.2)
    ceiling_albedo: tuple = (0.9, 0.9, 0.9)
    camera_distance: float = DEFAULT_PIVOT_DEPTH

    def __post_init__(self):
        hx, hy, hz = self.half_extents
        if min(hx, hy, hz) <= 0:
            raise ValueError(f"room half extents must be positive: {self.half_extents}")
        if self.camera_distance >= hz:
            raise ValueError("camera must sit inside the room (camera_distance < half depth)")
        for alb in (self.wall_albedo, self.floor_albedo, self.ceiling_albedo):
            _check_albedo(alb)
        room_lo = np.array([-hx, -hy, self.camera_distance - hz])
        room_hi = np.array([hx, hy, self.camera_distance + hz])
        for obj in self.objects:
            _check_albedo(obj.albedo)
            c, h = np.asarray(obj.center), np.asarray(obj.half_extents)
            if np.any(h <= 0) or np.any(c - h < room_lo - 1e-9) or np.any(c + h > room_hi + 1e-9):
                raise ValueError(f"object {obj} does not lie inside the room")

    @property
    def pivot(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.camera_distance])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["objects"] = [Cuboid(**o) for o in d.get("objects", [])]
        return cls(**d)


def _check_albedo(alb):
    if len(alb) != 3 or min(alb) < 0 or max(alb) > 1:
        raise ValueError(f"albedo must be three values in [0, 1], got {alb}")


@dataclass
class RgbdImage:
    """``rgb`` is ``H x W x 3`` in [-1, 1]; ``depth`` is ``H x W`` camera units."""

    rgb: np.ndarray
    depth: np.ndarray


def _rot_y(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _slab(origin, dirs, lo, hi):
    """Entry/exit ray parameters against an axis-aligned box, plus exit/entry axes."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # rays parallel to a slab: inside -> unbounded, outside -> empty
    par = dirs == 0
    inside = (origin >= lo) & (origin <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    return tmin.max(axis=1), tmax.min(axis=1), tmin.argmax(axis=1), tmax.argmin(axis=1)


def render_scene(
    spec: SceneSpec,
    theta: float,
    k: CameraIntrinsics,
    near: float = DEFAULT_NEAR,
    far: float = DEFAULT_FAR,
    shading: float = DEFAULT_SHADING,
) -> RgbdImage:
    """Ray-cast ``spec`` rotated by ``theta`` radians about its pivot."""
    v, u = np.meshgrid(np.arange(k.height, dtype=np.float64), np.arange(k.width, dtype=np.float64), indexing="ij")
    rays = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)

    # move the camera into the canonical scene frame instead of moving the scene
    pivot = spec.pivot
    inv = _rot_y(-theta)
    origin = inv @ (-pivot) + pivot
    dirs = rays @ inv.T

    hx, hy, hz = spec.half_extents
    lo = np.array([-hx, -hy, spec.camera_distance - hz])
    hi = np.array([hx, hy, spec.camera_distance + hz])
    _, t_exit, _, exit_axis = _slab(origin, dirs, lo, hi)
    hit_t = t_exit.copy()
    n = len(rays)
    albedo = np.empty((n, 3))
    exit_pt_y = origin[1] + t_exit * dirs[:, 1]
    wall = np.asarray(spec.wall_albedo, dtype=np.float64)
    albedo[:] = wall
    is_y = exit_axis == 1
    albedo[is_y & (exit_pt_y > 0)] = spec.floor_albedo  # y points down
    albedo[is_y & (exit_pt_y <= 0)] = spec.ceiling_albedo

    for obj in spec.objects:
        c = np.asarray(obj.center, dtype=np.float64)
        h = np.asarray(obj.half_extents, dtype=np.float64)
        t_in, t_out, _, _ = _slab(origin, dirs, c - h, c + h)
        hit = (t_in <= t_out) & (t_in > 0) & (t_in < hit_t)
        hit_t = np.where(hit, t_in, hit_t)
        albedo[hit] = obj.albedo

    if not np.all(np.isfinite(hit_t)) or np.any(hit_t <= 0):
        raise AssertionError("a camera ray escaped the room")
    # rays have unit z in the camera frame, so the ray parameter is the depth
    depth = hit_t
    canonical_z = origin[2] + hit_t * dirs[:, 2]
    color = albedo / (1.0 + shading * canonical_z[:, None])
    rgb = 2.0 * color - 1.0
    depth = np.clip(depth, near, far)
    return RgbdImage(rgb=rgb.reshape(k.height, k.width, 3), depth=depth.reshape(k.height, k.width))


def random_scene(rng: np.random.Generator, camera_distance: float = DEFAULT_PIVOT_DEPTH, max_objects: int = 3) -> SceneSpec:
    """Sample a room whose every point stays within [0.5, 10] depth over +-15 degrees."""
    hx = rng.uniform(2.8, 3.5)
    hy = rng.uniform(1.7, 2.2)
    hz = rng.uniform(camera_distance + 0.3, camera_distance + 0.6)
    objects = []
    for _ in range(int(rng.integers(1, max_objects + 1))):
        half = (rng.uniform(0.3, 0.9), rng.uniform(0.3, 1.0), rng.uniform(0.3, 0.9))
        cx = rng.uniform(-hx + half[0] + 0.1, hx - half[0] - 0.1)
        cy = hy - half[1]
        cz = camera_distance + rng.uniform(-1.0, hz - half[2] - 0.1)
        objects.append(Cuboid(center=(cx, cy, cz), half_extents=half, albedo=tuple(rng.uniform(0.1, 0.95, 3))))
    return SceneSpec(
        half_extents=(hx, hy, hz),
        objects=objects,
        wall_albedo=tuple(rng.uniform(0.5, 0.95, 3)),
        floor_albedo=tuple(rng.uniform(0.1, 0.6, 3)),
        ceiling_albedo=tuple(rng.uniform(0.7, 1.0, 3)),
        camera_distance=camera_distance,
    )


def depth_edge_mask(depth: np.ndarray, tol: float = 1e-3, dilate: int = 1) -> np.ndarray:
    """Boolean map of silhouettes and creases, dilated by ``dilate`` pixels.

    Inverse depth is affine in pixel coordinates on any plane, so a nonzero
    second difference marks a discontinuity or a fold between surfaces.
    """
    inv = 1.0 / np.asarray(depth, dtype=np.float64)
    edge = np.zeros(inv.shape, dtype=bool)
    for axis in (0, 1):
        d2 = np.abs(np.diff(inv, n=2, axis=axis))
        scale = np.abs(inv)
        sl = [slice(None), slice(None)]
        sl[axis] = slice(1, -1)
        flag = d2 > tol * scale[tuple(sl)]
        edge[tuple(sl)] |= flag
    for _ in range(dilate):
        grown = edge.copy()
        grown[1:, :] |= edge[:-1, :]
        grown[:-1, :] |= edge[1:, :]
        grown[:, 1:] |= edge[:, :-1]
        grown[:, :-1] |= edge[:, 1:]
        edge = grown
    return edge


class ToySceneSource:
    """Adapter that lets the renderer stand in for a generator in metrics.

    Codes are scene seeds; ``render(codes, theta)`` returns tensors shaped like
    the generator's output.
    """

    def __init__(self, k: CameraIntrinsics, near=DEFAULT_NEAR, far=DEFAULT_FAR, camera_distance=DEFAULT_PIVOT_DEPTH):
        self.k = k
        self.near = near
        self.far = far
        self.camera_distance = camera_distance

    def sample_codes(self, n: int, generator: torch.Generator):
        seeds = torch.randint(0, 2**31 - 1, (n,), generator=generator)
        return [random_scene(np.random.default_rng(int(s)), self.camera_distance) for s in seeds]

    def render(self, codes, theta: torch.Tensor):
        theta = torch.as_tensor(theta, dtype=torch.float64).expand(len(codes))
        imgs = [render_scene(s, float(t), self.k, self.near, self.far) for s, t in zip(codes, theta)]
        rgb = torch.from_numpy(np.stack([im.rgb for im in imgs])).permute(0, 3, 1, 2).float()
        depth = torch.from_numpy(np.stack([im.depth for im in imgs]))[:, None].float()
        return rgb, depth


# --------------------------------------------------------------------------- #
# datasets on disk


@dataclass
class DatasetRecord:
    rgb: str
    depth: str
    angle: Optional[float] = None


def generate_dataset(
    n_scenes: int,
    angles_per_scene: int,
    seed: int,
    out_dir,
    resolution: int = 64,
    theta_range=(-math.radians(15), math.radians(15)),
    focal_mm: float = 26.0,
    sensor_width_mm: float = 36.0,
    near: float = DEFAULT_NEAR,
    far: float = DEFAULT_FAR,
    camera_distance: float = DEFAULT_PIVOT_DEPTH,
) -> dict:
    """Render random scenes at uniform angles and write PNGs plus ``manifest.json``."""
    out = Path(out_dir)
    try:
        io.ensure_dir(out / "rgb")
        io.ensure_dir(out / "depth")
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    k = intrinsics_from_focal(focal_mm, sensor_width_mm, resolution, resolution)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_scenes):
        scene_seed = int(rng.integers(0, 2**31 - 1))
        scene = random_scene(np.random.default_rng(scene_seed), camera_distance)
        angles = rng.uniform(theta_range[0], theta_range[1], size=angles_per_scene)
        for j, theta in enumerate(angles):
            img = render_scene(scene, float(theta), k, near, far)
            rgb_rel = f"rgb/{i:06d}_{j:02d}.png"
            depth_rel = f"depth/{i:06d}_{j:02d}.png"
            try:
                io.write_rgb_png(out / rgb_rel, img.rgb)
                io.write_depth_png(out / depth_rel, img.depth, near, far)
            except OSError as exc:
                raise OSError(f"failed writing record {rgb_rel}: {exc}") from exc
            records.append({"rgb": rgb_rel, "depth": depth_rel, "angle": float(theta), "scene_seed": scene_seed})
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "near": near,
        "far": far,
        "resolution": resolution,
        "camera": {
            "focal_mm": focal_mm,
            "sensor_width_mm": sensor_width_mm,
            "fx": k.fx,
            "fy": k.fy,
            "cx": k.cx,
            "cy": k.cy,
            "pivot_depth": camera_distance,
        },
        "records": records,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read dataset manifest {path}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {manifest.get('version')!r}")
    return manifest


def records_from_manifest(manifest: dict) -> List[DatasetRecord]:
    return [DatasetRecord(r["rgb"], r["depth"], r.get("angle")) for r in manifest["records"]]


def center_crop(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape[:2]
    s = min(h, w)
    top = (h - s) // 2
    left = (w - s) // 2
    return arr[top : top + s, left : left + s]


def _resize(arr: np.ndarray, size: int) -> np.ndarray:
    if arr.shape[0] == size and arr.shape[1] == size:
        return arr
    if arr.ndim == 2:
        im = Image.fromarray(arr.astype(np.float32))
        return np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.float64)
    chans = [_resize(arr[..., c], size) for c in range(arr.shape[-1])]
    return np.stack(chans, axis=-1)


def load_batch(
    records: Sequence[DatasetRecord],
    resolution: int,
    root=".",
    near: float = DEFAULT_NEAR,
    far: float = DEFAULT_FAR,
):
    """Load records as ``(rgb (N,3,R,R) in [-1,1], depth (N,1,R,R))`` float32 tensors.

    Images are center-cropped to a square and resized to ``resolution``.
    """
    root = Path(root)
    rgbs, depths = [], []
    for rec in records:
        rgb_path, depth_path = root / rec.rgb, root / rec.depth
        try:
            rgb = io.read_rgb_png(rgb_path)
            depth = io.read_depth(depth_path, near, far)
        except (OSError, ValueError) as exc:
            raise ValueError(f"bad record {rgb_path} / {depth_path}: {exc}") from exc
        if rgb.shape[:2] != depth.shape[:2]:
            raise ValueError(
                f"record {rgb_path}: rgb is {rgb.shape[:2]} but depth is {depth.shape[:2]}"
            )
        rgb = np.clip(_resize(center_crop(rgb), resolution), -1.0, 1.0)
        depth = np.clip(_resize(center_crop(depth), resolution), near, far)
        rgbs.append(rgb)
        depths.append(depth)
    rgb_t = torch.from_numpy(np.stack(rgbs).astype(np.float32)).permute(0, 3, 1, 2).contiguous()
    depth_t = torch.from_numpy(np.stack(depths).astype(np.float32))[:, None].contiguous()
    return rgb_t, depth_t


def render_arrays(n_scenes: int, angles_per_scene: int, seed: int, k: CameraIntrinsics, theta_range, near=DEFAULT_NEAR, far=DEFAULT_FAR, camera_distance=DEFAULT_PIVOT_DEPTH):
    """In-memory counterpart of :func:`generate_dataset` (no PNG quantization)."""
    rng = np.random.default_rng(seed)
    rgbs, depths = [], []
    for _ in range(n_scenes):
        scene = random_scene(np.random.default_rng(int(rng.integers(0, 2**31 - 1))), camera_distance)
        for theta in rng.uniform(theta_range[0], theta_range[1], size=angles_per_scene):
            img = render_scene(scene, float(theta), k, near, far)
            rgbs.append(img.rgb)
            depths.append(img.depth)
    rgb_t = torch.from_numpy(np.stack(rgbs).astype(np.float32)).permute(0, 3, 1, 2).contiguous()
    depth_t = torch.from_numpy(np.stack(depths).astype(np.float32))[:, None].contiguous()
    return rgb_t, depth_t
