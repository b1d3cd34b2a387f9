"""Scene loading, procedural scene generation, and the few-shot split protocol.

Scenes use the NeRF-synthetic on-disk layout: transforms_{train,val,test}.json
with a global camera_angle_x and per-frame camera-to-world matrices, plus PNG
images. Cameras look along -Z with +Y up. Procedural scenes are rendered by
exact ray-primitive intersection so they serve as noise-free ground truth, and
are exported in the same layout so one loader covers both paths.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import make_rng

WHITE = np.array([1.0, 1.0, 1.0], dtype=np.float32)

DEFAULT_NEAR = 2.0
DEFAULT_FAR = 6.0


class DatasetError(ValueError):
    pass


@dataclass
class Camera:
    width: int
    height: int
    focal: float
    cx: float
    cy: float
    camera_to_world: np.ndarray  # 4x4 float32, row-major

    def __post_init__(self):
        self.camera_to_world = np.asarray(self.camera_to_world, dtype=np.float32)
        if self.camera_to_world.shape != (4, 4):
            raise DatasetError(f"pose must be 4x4, got {self.camera_to_world.shape}")
        if self.focal <= 0:
            raise DatasetError(f"focal must be positive, got {self.focal}")
        r = self.camera_to_world[:3, :3].astype(np.float64)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-4):
            raise DatasetError("rotation block is not orthonormal (tol 1e-4)")
        if abs(np.linalg.det(r) - 1.0) > 1e-4:
            raise DatasetError(f"rotation determinant {np.linalg.det(r):.6f} != +1")

    @property
    def position(self) -> np.ndarray:
        return self.camera_to_world[:3, 3]

    @property
    def optical_axis(self) -> np.ndarray:
        """World-space viewing direction (camera looks along -Z)."""
        return -self.camera_to_world[:3, 2]

    def scaled(self, factor: float) -> "Camera":
        """Camera for an image down/up-scaled by `factor` (same pose)."""
        return Camera(
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
            focal=self.focal * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            camera_to_world=self.camera_to_world.copy(),
        )


@dataclass
class View:
    image: np.ndarray  # HxWx3 float32 in [0,1]
    camera: Camera
    split: str
    id: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        h, w = self.image.shape[:2]
        if (h, w) != (self.camera.height, self.camera.width):
            raise DatasetError(
                f"view {self.id}: image {h}x{w} does not match camera "
                f"{self.camera.height}x{self.camera.width}")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise DatasetError(f"view {self.id}: pixel values outside [0,1]")
        if self.split not in ("train", "val", "test"):
            raise DatasetError(f"view {self.id}: unknown split {self.split!r}")


@dataclass
class Scene:
    views: list[View]
    near: float
    far: float
    background: np.ndarray = field(default_factory=lambda: WHITE.copy())

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float32)
        if not 0 < self.near < self.far:
            raise DatasetError(f"need 0 < near < far, got {self.near}, {self.far}")
        ids = [v.id for v in self.views]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate view ids")
        if not self.split("train"):
            raise DatasetError("scene has no train views")

    def split(self, name: str) -> list[View]:
        return [v for v in self.views if v.split == name]


# ----------------------------------------------------------------------
# NeRF-synthetic layout

def focal_from_angle(camera_angle_x: float, width: int) -> float:
    return 0.5 * width / math.tan(0.5 * camera_angle_x)


def load_nerf_synthetic(root, background: np.ndarray = WHITE,
                        splits: tuple[str, ...] = ("train", "val", "test")) -> Scene:
    root = Path(root)
    background = np.asarray(background, dtype=np.float32)
    views: list[View] = []
    near, far = DEFAULT_NEAR, DEFAULT_FAR
    found_any = False
    for split in splits:
        tf = root / f"transforms_{split}.json"
        if not tf.exists():
            continue
        found_any = True
        try:
            meta = json.loads(tf.read_text())
        except json.JSONDecodeError as e:
            raise DatasetError(f"malformed JSON in {tf}: {e}") from e
        if "camera_angle_x" not in meta or "frames" not in meta:
            raise DatasetError(f"{tf}: missing camera_angle_x or frames")
        near = float(meta.get("near", near))
        far = float(meta.get("far", far))
        for frame in meta["frames"]:
            img_path = root / (frame["file_path"].lstrip("./") + ".png")
            if not img_path.exists():
                raise DatasetError(f"missing image {img_path}")
            rgba = np.asarray(Image.open(img_path), dtype=np.float32) / 255.0
            if rgba.ndim == 2:
                rgba = np.repeat(rgba[..., None], 3, axis=2)
            if rgba.shape[2] == 4:
                alpha = rgba[..., 3:4]
                rgb = rgba[..., :3] * alpha + background * (1.0 - alpha)
            else:
                rgb = rgba[..., :3]
            h, w = rgb.shape[:2]
            focal = focal_from_angle(float(meta["camera_angle_x"]), w)
            pose = np.asarray(frame["transform_matrix"], dtype=np.float32)
            cam = Camera(width=w, height=h, focal=focal, cx=w / 2.0, cy=h / 2.0,
                         camera_to_world=pose)
            views.append(View(image=rgb.astype(np.float32), camera=cam, split=split,
                              id=Path(frame["file_path"]).name))
    if not found_any:
        raise DatasetError(f"no transforms_*.json found under {root}")
    return Scene(views=views, near=near, far=far, background=background)


def write_nerf_synthetic(scene: Scene, out_dir) -> None:
    """Export a scene in NeRF-synthetic layout (8-bit PNG, round-half-to-even)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "val", "test"):
        views = scene.split(split)
        if not views:
            continue
        (out / split).mkdir(exist_ok=True)
        frames = []
        cam0 = views[0].camera
        angle_x = 2.0 * math.atan(0.5 * cam0.width / cam0.focal)
        for v in views:
            rel = f"./{split}/{v.id}"
            arr = np.round(np.clip(v.image, 0.0, 1.0) * 255.0).astype(np.uint8)
            Image.fromarray(arr).save(out / f"{rel.lstrip('./')}.png")
            frames.append({
                "file_path": rel,
                "transform_matrix": [[float(x) for x in row]
                                     for row in v.camera.camera_to_world],
            })
        meta = {
            "camera_angle_x": angle_x,
            "near": scene.near,
            "far": scene.far,
            "frames": frames,
        }
        (out / f"transforms_{split}.json").write_text(json.dumps(meta, indent=2))


# ----------------------------------------------------------------------
# few-shot selection

def select_few_shot(scene: Scene, k: int, seed: int = 0) -> Scene:
    """Keep k train views chosen by greedy farthest-point spread of optical axes.

    The seed view is the one whose axis is closest to the mean axis; each
    following pick maximizes the minimum angular distance to the already
    selected axes. Deterministic and invariant to input view ordering.
    """
    train = sorted(scene.split("train"), key=lambda v: v.id)
    if k == 0:
        raise DatasetError("select_few_shot: k must be >= 1")
    if k > len(train):
        raise DatasetError(f"select_few_shot: k={k} > {len(train)} train views")
    del seed  # protocol is deterministic; kept for interface stability
    axes = np.stack([v.camera.optical_axis for v in train]).astype(np.float64)
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    mean = axes.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm > 1e-9:
        mean /= norm
        seed_idx = int(np.argmax(axes @ mean))
    else:
        seed_idx = 0
    selected = [seed_idx]
    while len(selected) < k:
        dots = axes @ axes[selected].T  # cos(angle) to each selected axis
        min_dist = np.arccos(np.clip(dots, -1.0, 1.0)).min(axis=1)
        min_dist[selected] = -np.inf
        selected.append(int(np.argmax(min_dist)))
    keep = {train[i].id for i in selected}
    views = [v for v in scene.views if v.split != "train" or v.id in keep]
    return Scene(views=views, near=scene.near, far=scene.far,
                 background=scene.background.copy())


# ----------------------------------------------------------------------
# procedural scenes

@dataclass
class ProceduralSpec:
    resolution: int = 64
    n_train: int = 5
    n_val: int = 2
    n_test: int = 8
    seed: int = 0
    camera_distance: float = 2.5

    def __post_init__(self):
        if self.resolution < 16:
            raise DatasetError(f"resolution must be >= 16, got {self.resolution}")


# geometry: axis-aligned checkered cube + matte sphere on a ground disk,
# all within a unit-ish sphere around the origin, z up.
_SPHERE_CENTER = np.array([0.45, -0.1, 0.35], dtype=np.float64)
_SPHERE_RADIUS = 0.35
_SPHERE_ALBEDO = np.array([0.85, 0.25, 0.2], dtype=np.float64)
_CUBE_CENTER = np.array([-0.4, 0.15, 0.3], dtype=np.float64)
_CUBE_HALF = 0.3
_CUBE_ALBEDO_A = np.array([0.2, 0.35, 0.8], dtype=np.float64)
_CUBE_ALBEDO_B = np.array([0.9, 0.85, 0.3], dtype=np.float64)
_DISK_RADIUS = 1.3
_DISK_ALBEDO_A = np.array([0.55, 0.55, 0.55], dtype=np.float64)
_DISK_ALBEDO_B = np.array([0.35, 0.35, 0.35], dtype=np.float64)

_GEOMETRY_RADIUS = float(max(
    np.linalg.norm(_SPHERE_CENTER) + _SPHERE_RADIUS,
    np.linalg.norm(_CUBE_CENTER) + _CUBE_HALF * math.sqrt(3.0),
    _DISK_RADIUS,
))


def look_at_camera(position: np.ndarray, target: np.ndarray, width: int, height: int,
                   focal: float, up=(0.0, 0.0, 1.0)) -> Camera:
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    z_c = -forward
    x_c = np.cross(np.asarray(up, dtype=np.float64), z_c)
    x_c /= np.linalg.norm(x_c)
    y_c = np.cross(z_c, x_c)
    pose = np.eye(4, dtype=np.float64)
    pose[:3, 0] = x_c
    pose[:3, 1] = y_c
    pose[:3, 2] = z_c
    pose[:3, 3] = position
    return Camera(width=width, height=height, focal=focal,
                  cx=width / 2.0, cy=height / 2.0, camera_to_world=pose)


def _intersect_sphere(o, d):
    oc = o - _SPHERE_CENTER
    b = np.sum(oc * d, axis=1)
    c = np.sum(oc * oc, axis=1) - _SPHERE_RADIUS ** 2
    disc = b * b - c
    hit = disc > 0
    t = np.full(o.shape[0], np.inf)
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    tt = np.where(t0 > 1e-6, t0, t1)
    valid = hit & (tt > 1e-6)
    t[valid] = tt[valid]
    return t


def _intersect_cube(o, d):
    lo = _CUBE_CENTER - _CUBE_HALF
    hi = _CUBE_CENTER + _CUBE_HALF
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t_lo = (lo - o) * inv
        t_hi = (hi - o) * inv
    t_near = np.nanmax(np.minimum(t_lo, t_hi), axis=1)
    t_far = np.nanmin(np.maximum(t_lo, t_hi), axis=1)
    valid = (t_near <= t_far) & (t_far > 1e-6)
    t = np.where(t_near > 1e-6, t_near, t_far)
    return np.where(valid, t, np.inf)


def _intersect_disk(o, d):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[:, 2] / d[:, 2]
    p = o + t[:, None] * d
    valid = (t > 1e-6) & np.isfinite(t) & (p[:, 0] ** 2 + p[:, 1] ** 2 <= _DISK_RADIUS ** 2)
    return np.where(valid, t, np.inf)


def _checker(u: np.ndarray, v: np.ndarray, period: float) -> np.ndarray:
    return ((np.floor(u / period) + np.floor(v / period)) % 2).astype(bool)


def shade_rays(origins: np.ndarray, dirs: np.ndarray,
               background: np.ndarray = WHITE) -> np.ndarray:
    """Exact nearest-intersection shading of the procedural geometry."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    n = o.shape[0]
    t_sph = _intersect_sphere(o, d)
    t_cube = _intersect_cube(o, d)
    t_disk = _intersect_disk(o, d)
    all_t = np.stack([t_sph, t_cube, t_disk], axis=1)
    which = np.argmin(all_t, axis=1)
    t_min = all_t[np.arange(n), which]
    color = np.broadcast_to(np.asarray(background, dtype=np.float64), (n, 3)).copy()

    hit = np.isfinite(t_min)
    p = o + t_min[:, None] * d

    m = hit & (which == 0)
    color[m] = _SPHERE_ALBEDO

    m = hit & (which == 1)
    if m.any():
        local = p[m] - _CUBE_CENTER
        face = np.argmax(np.abs(local), axis=1)
        uv = np.stack([
            np.where(face == 0, local[:, 1], local[:, 0]),
            np.where(face == 2, local[:, 1], local[:, 2]),
        ], axis=1)
        check = _checker(uv[:, 0] + _CUBE_HALF, uv[:, 1] + _CUBE_HALF, 0.15)
        color[m] = np.where(check[:, None], _CUBE_ALBEDO_A, _CUBE_ALBEDO_B)

    m = hit & (which == 2)
    if m.any():
        check = _checker(p[m, 0] + _DISK_RADIUS, p[m, 1] + _DISK_RADIUS, 0.4)
        color[m] = np.where(check[:, None], _DISK_ALBEDO_A, _DISK_ALBEDO_B)

    return color.astype(np.float32)


def _render_view(camera: Camera, background: np.ndarray) -> np.ndarray:
    from .render import generate_rays  # local import to avoid a cycle

    rows, cols = np.mgrid[0:camera.height, 0:camera.width]
    pixels = np.stack([rows.ravel(), cols.ravel()], axis=1)
    origins, dirs = generate_rays(camera, pixels)
    rgb = shade_rays(origins, dirs, background)
    img = rgb.reshape(camera.height, camera.width, 3)
    # quantize to 8-bit levels at creation so PNG export round-trips exactly
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def procedural_scene(spec: ProceduralSpec, background: np.ndarray = WHITE) -> Scene:
    """Analytic desk-scale scene with cameras on a sphere looking at the origin."""
    rng = make_rng(spec.seed)
    background = np.asarray(background, dtype=np.float32)
    res = spec.resolution
    focal = 1.2 * res  # ~45 degree field of view
    dist = spec.camera_distance
    near = (dist - _GEOMETRY_RADIUS) * 0.9
    far = (dist + _GEOMETRY_RADIUS) * 1.1

    views: list[View] = []
    for split, count in (("train", spec.n_train), ("val", spec.n_val),
                         ("test", spec.n_test)):
        for i in range(count):
            azim = rng.uniform(0.0, 2.0 * math.pi)
            elev = rng.uniform(math.radians(20.0), math.radians(55.0))
            pos = dist * np.array([
                math.cos(elev) * math.cos(azim),
                math.cos(elev) * math.sin(azim),
                math.sin(elev),
            ])
            cam = look_at_camera(pos, np.zeros(3), res, res, focal)
            img = _render_view(cam, background)
            views.append(View(image=img, camera=cam, split=split,
                              id=f"r_{split}_{i:03d}"))
    return Scene(views=views, near=near, far=far, background=background)
