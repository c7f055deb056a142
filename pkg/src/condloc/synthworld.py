"""Synthetic scene, pinhole renderer, capture conditions and dataset splits.

The world is a field of coloured spherical landmarks around a circular road.
Cameras drive the road looking forward; each landmark is drawn as a shaded
disc with a per-pixel depth ordering, so the set of visible landmark ids of a
frame is known exactly.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError, DomainError
from .geometry import CameraPose, heading_pose

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SPLITS = ("reference", "mixed", "query")
LUMA = np.array([0.299, 0.587, 0.114])


# world -----------------------------------------------------------------------


@dataclass(frozen=True)
class SceneWorld:
    ids: np.ndarray
    positions: np.ndarray
    colors: np.ndarray
    radii: np.ndarray
    extent: tuple[tuple[float, float, float], tuple[float, float, float]]
    seed: int

    def __len__(self) -> int:
        return len(self.ids)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def generate_world(
    seed: int,
    num_landmarks: int,
    extent=((-90.0, -90.0, 0.0), (90.0, 90.0, 6.0)),
    radius_range=(0.8, 2.0),
    keepout=None,
) -> SceneWorld:
    """Uniform landmarks in ``extent``.

    ``keepout=(r_in, r_out)`` leaves the horizontal annulus r_in < |xy| < r_out
    empty (the road corridor); rejected draws are redrawn.
    """
    if num_landmarks < 1:
        raise DomainError("num_landmarks must be >= 1")
    lo, hi = np.asarray(extent[0], dtype=np.float64), np.asarray(extent[1], dtype=np.float64)
    if np.any(hi <= lo):
        raise DomainError(f"degenerate extent {extent}")
    rng = np.random.default_rng(seed)
    positions = lo + rng.random((num_landmarks, 3)) * (hi - lo)
    if keepout is not None:
        r_in, r_out = keepout
        for _ in range(1000):
            r = np.hypot(positions[:, 0], positions[:, 1])
            bad = (r > r_in) & (r < r_out)
            if not bad.any():
                break
            positions[bad] = lo + rng.random((int(bad.sum()), 3)) * (hi - lo)
        else:
            raise DomainError(f"keepout {keepout} leaves no room in {extent}")
    colors = rng.random((num_landmarks, 3))
    radii = rng.uniform(radius_range[0], radius_range[1], num_landmarks)
    return SceneWorld(
        ids=_frozen(np.arange(num_landmarks)),
        positions=_frozen(positions),
        colors=_frozen(colors),
        radii=_frozen(radii),
        extent=(tuple(map(float, lo)), tuple(map(float, hi))),
        seed=seed,
    )


# rendering -------------------------------------------------------------------


@dataclass(frozen=True)
class Intrinsics:
    focal: float
    cx: float
    cy: float
    near: float = 2.0
    far: float = 45.0

    @classmethod
    def centered(cls, width: int, height: int, focal: float, near: float = 2.0, far: float = 45.0):
        return cls(focal, width / 2.0, height / 2.0, near, far)


@dataclass
class CapturedImage:
    pixels: np.ndarray
    condition: str
    pose: CameraPose
    visible_ids: frozenset
    image_id: str = ""
    split: str = ""


def project(points_world: np.ndarray, pose: CameraPose, intr: Intrinsics):
    """Pinhole projection. Returns (u, v, depth) with u to the right, v down."""
    pc = (np.asarray(points_world, dtype=np.float64) - pose.center) @ pose.matrix
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.focal * pc[:, 0] / z + intr.cx
        v = intr.focal * pc[:, 1] / z + intr.cy
    return u, v, z


def background(pose: CameraPose, intr: Intrinsics, resolution) -> np.ndarray:
    h, w = resolution
    vv, uu = np.mgrid[0:h, 0:w] + 0.5
    rays = np.stack([(uu - intr.cx) / intr.focal, (vv - intr.cy) / intr.focal, np.ones_like(uu)], axis=-1)
    rays = rays @ pose.matrix.T
    elev = rays[..., 2] / np.linalg.norm(rays, axis=-1)
    sky_lo, sky_hi = np.array([0.78, 0.84, 0.92]), np.array([0.42, 0.58, 0.86])
    ground = np.array([0.40, 0.37, 0.33])
    e = np.clip(elev, 0.0, 1.0)[..., None]
    sky = sky_lo + (sky_hi - sky_lo) * np.sqrt(e)
    ground_img = ground * (1.0 - 0.4 * np.clip(-elev, 0.0, 1.0))[..., None]
    return np.where((elev > 0)[..., None], sky, ground_img)


def _disc_mask(u: float, v: float, rho: float, h: int, w: int):
    """Pixels (rows, cols) covered by a disc, clipped to the frame.

    A pixel is covered when its centre lies within ``rho`` of (u, v); the pixel
    containing (u, v) is always covered so sub-pixel discs still show up.
    """
    r0, r1 = max(int(math.floor(v - rho)), 0), min(int(math.ceil(v + rho)), h - 1)
    c0, c1 = max(int(math.floor(u - rho)), 0), min(int(math.ceil(u + rho)), w - 1)
    if r0 > r1 or c0 > c1:
        return None
    rr, cc = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    d2 = (cc + 0.5 - u) ** 2 + (rr + 0.5 - v) ** 2
    inside = d2 <= rho * rho
    iu, iv = int(math.floor(u)), int(math.floor(v))
    if 0 <= iu < w and 0 <= iv < h:
        inside |= (rr == iv) & (cc == iu)
    if not inside.any():
        return None
    return rr[inside], cc[inside], d2[inside]


def render_view(
    world: SceneWorld,
    pose: CameraPose,
    intrinsics: Intrinsics,
    resolution=(48, 48),
    image_id: str = "",
    condition: str = "reference-day",
) -> CapturedImage:
    """Render the reference-condition view and its exact visible landmark set.

    Landmarks with ``near < depth < far`` are painted far-to-near. A landmark
    is visible when its centre projects inside the frame and at least half of
    its in-frame disc pixels are not covered by nearer discs.
    """
    h, w = resolution
    if h < 16 or w < 16:
        raise DomainError(f"resolution must be at least 16x16, got {resolution}")
    if not intrinsics.focal > 0:
        raise DomainError("focal length must be positive")

    img = background(pose, intrinsics, resolution)
    owner = np.full((h, w), -1, dtype=np.int64)
    u, v, z = project(world.positions, pose, intrinsics)
    in_range = (z > intrinsics.near) & (z < intrinsics.far)
    rho = np.where(in_range, intrinsics.focal * world.radii / np.where(in_range, z, 1.0), 0.0)
    cand = np.flatnonzero(in_range & (u + rho >= 0) & (u - rho < w) & (v + rho >= 0) & (v - rho < h))
    # far first; equal depths resolved by id so the output is order-independent
    order = cand[np.lexsort((world.ids[cand], -z[cand]))]

    footprints = {}
    for i in order:
        m = _disc_mask(u[i], v[i], rho[i], h, w)
        if m is None:
            continue
        rr, cc, d2 = m
        shade = 1.0 - 0.35 * np.minimum(d2 / max(rho[i] ** 2, 0.25), 1.0)
        img[rr, cc] = world.colors[i] * shade[:, None]
        owner[rr, cc] = world.ids[i]
        footprints[int(world.ids[i])] = (rr.size, u[i], v[i])

    visible = set()
    if footprints:
        counts = np.bincount(owner[owner >= 0], minlength=len(world))
        for lid, (n_pix, ui, vi) in footprints.items():
            if 0 <= ui < w and 0 <= vi < h and counts[lid] * 2 >= n_pix:
                visible.add(lid)
    return CapturedImage(
        pixels=np.clip(img, 0.0, 1.0),
        condition=condition,
        pose=pose,
        visible_ids=frozenset(visible),
        image_id=image_id,
    )


# capture conditions ----------------------------------------------------------


@dataclass(frozen=True)
class ConditionProfile:
    """Photometric model ``clip(blur(desat(gain * x**gamma) + offset) + noise)``."""

    name: str
    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    gamma: float = 1.0
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    desaturate: float = 0.0
    noise_sigma: float = 0.0
    vertical_blur: int = 1
    night: bool = False

    @property
    def is_identity(self) -> bool:
        return (
            self.gain == (1.0, 1.0, 1.0) and self.gamma == 1.0 and self.offset == (0.0, 0.0, 0.0)
            and self.desaturate == 0.0 and self.noise_sigma == 0.0 and self.vertical_blur == 1
        )


REFERENCE_CONDITION = "reference-day"

DEFAULT_CONDITIONS = (
    ConditionProfile(REFERENCE_CONDITION),
    ConditionProfile("dawn", gain=(1.0, 0.85, 0.68), gamma=1.1, offset=(0.05, 0.02, 0.0), noise_sigma=0.01),
    ConditionProfile("dusk", gain=(0.62, 0.5, 0.45), gamma=1.2, offset=(0.03, 0.0, 0.02), noise_sigma=0.01),
    ConditionProfile("snow", gain=(0.85, 0.85, 0.85), offset=(0.15, 0.15, 0.17), desaturate=0.5, noise_sigma=0.01),
    ConditionProfile("night", gain=(0.3, 0.3, 0.3), gamma=1.4, offset=(0.0, 0.0, 0.05), noise_sigma=0.02, night=True),
    ConditionProfile(
        "night-rain", gain=(0.3, 0.3, 0.3), gamma=1.4, offset=(0.0, 0.0, 0.05), noise_sigma=0.035,
        vertical_blur=3, night=True,
    ),
)


def condition_table(profiles=DEFAULT_CONDITIONS) -> dict[str, ConditionProfile]:
    return {p.name: p for p in profiles}


def transform_pixels(pixels: np.ndarray, profile: ConditionProfile, seed: int) -> np.ndarray:
    """Apply a condition profile. Noise is ``default_rng(seed).normal(0, sigma, shape)``."""
    x = np.asarray(pixels, dtype=np.float64)
    if profile.is_identity:
        return x.copy()
    y = np.asarray(profile.gain) * x ** profile.gamma
    if profile.desaturate:
        lum = (y @ LUMA)[..., None]
        y = (1.0 - profile.desaturate) * y + profile.desaturate * lum
    y = y + np.asarray(profile.offset)
    if profile.vertical_blur > 1:
        k = profile.vertical_blur
        padded = np.pad(y, ((k // 2, k // 2), (0, 0), (0, 0)), mode="edge")
        y = sum(padded[i : i + y.shape[0]] for i in range(k)) / k
    if profile.noise_sigma > 0:
        y = y + np.random.default_rng(seed).normal(0.0, profile.noise_sigma, y.shape)
    return np.clip(y, 0.0, 1.0)


def apply_condition(image: CapturedImage, condition: str, seed: int, conditions=DEFAULT_CONDITIONS) -> CapturedImage:
    table = condition_table(conditions)
    if condition not in table:
        raise DomainError(f"unknown condition {condition!r}")
    reference = conditions[0].name
    if image.condition != reference:
        raise DomainError(f"image already carries condition {image.condition!r}")
    return replace(image, pixels=transform_pixels(image.pixels, table[condition], seed), condition=condition)


def luminance(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels) @ LUMA


# dataset ---------------------------------------------------------------------


@dataclass
class WorldConfig:
    num_landmarks: int = 1200
    extent: list = field(default_factory=lambda: [[-90.0, -90.0, 0.0], [90.0, 90.0, 6.0]])
    radius_range: list = field(default_factory=lambda: [0.8, 2.0])
    road_clearance: float = 0.0  # landmark-free half-width around the loop road


@dataclass
class DatasetConfig:
    resolution: int = 48
    focal: float = 40.0
    near: float = 2.0
    far: float = 45.0
    camera_height: float = 1.5
    loop_radius: float = 60.0
    reference_count: int = 400
    mixed_per_condition: int = 40
    query_count: int = 120
    query_conditions: list = field(default_factory=lambda: ["night", "night-rain"])
    # eight alternating training / test sectors, degrees along the loop
    mixed_arcs: list = field(default_factory=lambda: [[45.0 * k, 45.0 * k + 10.5] for k in range(8)])
    query_arcs: list = field(default_factory=lambda: [[45.0 * k + 22.5, 45.0 * k + 33.0] for k in range(8)])
    lateral_jitter: float = 1.5
    yaw_jitter: float = 3.0


@dataclass
class Dataset:
    images: list[CapturedImage]
    conditions: tuple[ConditionProfile, ...] = DEFAULT_CONDITIONS
    intrinsics: Intrinsics | None = None
    config_hash: str = ""

    def __post_init__(self):
        self.by_id = {im.image_id: im for im in self.images}
        if len(self.by_id) != len(self.images):
            raise DatasetError("duplicate image ids")

    def split(self, name: str) -> list[CapturedImage]:
        return [im for im in self.images if im.split == name]

    def counts(self) -> dict:
        out = {s: len(self.split(s)) for s in SPLITS}
        out["per_condition"] = {
            s: {c.name: sum(1 for im in self.split(s) if im.condition == c.name) for c in self.conditions}
            for s in SPLITS
        }
        return out

    @property
    def reference_condition(self) -> str:
        return self.conditions[0].name


def _seed_for(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def loop_pose(cfg: DatasetConfig, angle_deg: float, lateral: float = 0.0, yaw_offset: float = 0.0) -> CameraPose:
    """Pose on the circular road, driving counter-clockwise."""
    a = math.radians(angle_deg)
    r = cfg.loop_radius + lateral
    pos = (r * math.cos(a), r * math.sin(a), cfg.camera_height)
    return heading_pose(pos, angle_deg + 90.0 + yaw_offset)


def _arc_angles(arcs, count: int, phase: float) -> np.ndarray:
    """``count`` evenly spaced angles over the union of arcs; ``phase`` in [0, 1)."""
    arcs = np.asarray(arcs, dtype=np.float64).reshape(-1, 2)
    lengths = arcs[:, 1] - arcs[:, 0]
    if np.any(lengths <= 0):
        raise DatasetError(f"arcs must have positive length, got {arcs.tolist()}")
    s = (np.arange(count) + phase) * lengths.sum() / count
    bounds = np.concatenate([[0.0], np.cumsum(lengths)])
    k = np.clip(np.searchsorted(bounds, s, side="right") - 1, 0, len(arcs) - 1)
    return arcs[k, 0] + s - bounds[k]


def plan_poses(cfg: DatasetConfig, conditions, seed: int):
    """Trajectory plan: list of (image_id, split, condition, pose)."""
    rng = np.random.default_rng(_seed_for(seed, 1))
    ref = conditions[0].name
    plan = []
    for i, a in enumerate(np.arange(cfg.reference_count) * 360.0 / cfg.reference_count):
        plan.append((f"ref_{i:05d}", "reference", ref, loop_pose(cfg, a)))
    n_cond = len(conditions)
    for k, c in enumerate(conditions):
        for i, a in enumerate(_arc_angles(cfg.mixed_arcs, cfg.mixed_per_condition, (k + 0.5) / n_cond)):
            lat = rng.uniform(-cfg.lateral_jitter, cfg.lateral_jitter)
            yaw = rng.uniform(-cfg.yaw_jitter, cfg.yaw_jitter)
            plan.append((f"mix_{c.name}_{i:04d}", "mixed", c.name, loop_pose(cfg, a, lat, yaw)))
    qc = list(cfg.query_conditions)
    base, extra = divmod(cfg.query_count, len(qc))
    for k, name in enumerate(qc):
        n = base + (1 if k < extra else 0)
        for i, a in enumerate(_arc_angles(cfg.query_arcs, n, (k + 0.5) / len(qc))):
            lat = rng.uniform(-cfg.lateral_jitter, cfg.lateral_jitter)
            yaw = rng.uniform(-cfg.yaw_jitter, cfg.yaw_jitter)
            plan.append((f"qry_{name}_{i:04d}", "query", name, loop_pose(cfg, a, lat, yaw)))
    return plan


def check_disjoint(plan, min_separation: float) -> float:
    """Smallest query-to-mixed camera distance; raises if below ``min_separation``."""
    q = np.array([p.translation for _, s, _, p in plan if s == "query"])
    m = np.array([p.translation for _, s, _, p in plan if s == "mixed"])
    if len(q) == 0 or len(m) == 0:
        return math.inf
    d = np.sqrt(((q[:, None, :] - m[None, :, :]) ** 2).sum(-1)).min()
    if d < min_separation:
        raise DatasetError(f"query and mixed trajectories come within {d:.2f} < {min_separation} units")
    return float(d)


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Round-trip through 8-bit storage so in-memory and on-disk data agree."""
    return (np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)).astype(np.float32) / 255.0


def generate_dataset(
    world_cfg: WorldConfig,
    cfg: DatasetConfig,
    seed: int,
    conditions=DEFAULT_CONDITIONS,
    min_separation: float = 8.0,
) -> Dataset:
    names = [c.name for c in conditions]
    for name in cfg.query_conditions:
        if name not in names:
            raise DatasetError(f"query condition {name!r} is not declared")
    for key in ("reference_count", "mixed_per_condition", "query_count"):
        if getattr(cfg, key) < 1:
            raise DatasetError(f"{key} must be >= 1")
    keepout = None
    if world_cfg.road_clearance > 0:
        keepout = (cfg.loop_radius - world_cfg.road_clearance, cfg.loop_radius + world_cfg.road_clearance)
    world = generate_world(seed, world_cfg.num_landmarks, world_cfg.extent, world_cfg.radius_range, keepout)
    intr = Intrinsics.centered(cfg.resolution, cfg.resolution, cfg.focal, cfg.near, cfg.far)
    plan = plan_poses(cfg, conditions, seed)
    check_disjoint(plan, min_separation)
    table = condition_table(conditions)
    images = []
    for idx, (image_id, split, cond, pose) in enumerate(plan):
        im = render_view(world, pose, intr, (cfg.resolution, cfg.resolution), image_id, conditions[0].name)
        if cond != conditions[0].name:
            im = apply_condition(im, cond, _seed_for(seed, 2, idx), conditions)
        im.pixels = quantize(im.pixels)
        im.split = split
        images.append(im)
    log.info("generated %d images", len(images))
    return Dataset(images, tuple(conditions), intr)


def save_dataset(ds: Dataset, out_dir, config_hash: str = "") -> Path:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for im in ds.images:
        rel = f"images/{im.image_id}.png"
        Image.fromarray(np.round(im.pixels * 255.0).astype(np.uint8), mode="RGB").save(out_dir / rel)
        entries.append(
            {
                "image_id": im.image_id,
                "path": rel,
                "split": im.split,
                "condition": im.condition,
                "quaternion_wxyz": list(im.pose.rotation),
                "translation_xyz": list(im.pose.translation),
                "visible_ids": sorted(int(i) for i in im.visible_ids),
            }
        )
    manifest = {
        "version": MANIFEST_VERSION,
        "config_hash": config_hash or ds.config_hash,
        "conditions": [asdict(c) for c in ds.conditions],
        "intrinsics": asdict(ds.intrinsics) if ds.intrinsics else None,
        "counts": ds.counts(),
        "images": entries,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DatasetError(f"missing dataset manifest {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {path}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {manifest.get('version')!r}")
    conditions = tuple(
        ConditionProfile(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in c.items()})
        for c in manifest["conditions"]
    )
    images = []
    for e in manifest["images"]:
        pixels = np.asarray(Image.open(root / e["path"]).convert("RGB"), dtype=np.float32) / 255.0
        pose = CameraPose(tuple(e["quaternion_wxyz"]), tuple(e["translation_xyz"]))
        images.append(
            CapturedImage(pixels, e["condition"], pose, frozenset(e["visible_ids"]), e["image_id"], e["split"])
        )
    intr = Intrinsics(**manifest["intrinsics"]) if manifest.get("intrinsics") else None
    return Dataset(images, conditions, intr, manifest.get("config_hash", ""))
