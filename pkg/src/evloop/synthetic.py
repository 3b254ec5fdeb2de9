"""Fundus-like phantoms with planted lesions and exact ground-truth masks.

Grades follow a deterministic rule on the planted content:

* 0 - no lesions
* 1 - one or two micro dots
* 2 - at least three micro dots and at least one dark blob
* 3 - grade-2 content plus bright blobs and diffuse patches

Grades 0-1 are non-referable, 2-3 referable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .errors import GenerationError

LESION_TYPES = ("micro_dot", "dark_blob", "bright_blob", "diffuse_patch")
REFERABLE_GRADE = 2

# per-grade (min, max) counts for each lesion type
DEFAULT_COUNTS = {
    0: {},
    1: {"micro_dot": (1, 2)},
    2: {"micro_dot": (3, 6), "dark_blob": (1, 3)},
    3: {"micro_dot": (3, 6), "dark_blob": (1, 3), "bright_blob": (1, 3), "diffuse_patch": (1, 2)},
}


@dataclass(frozen=True)
class GeneratorConfig:
    size: int = 128
    fov_fraction: float = 0.46
    texture_amplitude: float = 0.015
    vessel_count: int = 6
    vessel_contrast: float = 0.07
    counts: dict = field(default_factory=lambda: {g: dict(v) for g, v in DEFAULT_COUNTS.items()})
    sizes: dict = field(default_factory=lambda: {
        "micro_dot": (1.0, 2.0),
        "dark_blob": (3.0, 8.0),
        "bright_blob": (3.0, 8.0),
        "diffuse_patch": (8.0, 16.0),
    })
    # RGB offset at full coverage; masked pixels keep at least half of it
    colors: dict = field(default_factory=lambda: {
        "micro_dot": (-0.26, -0.20, -0.08),
        "dark_blob": (-0.24, -0.18, -0.08),
        "bright_blob": (0.22, 0.26, 0.08),
        "diffuse_patch": (0.14, 0.16, 0.14),
    })
    contrast_offset: float = 0.05
    max_attempts: int = 1000

    def __post_init__(self):
        radius = self.fov_fraction * self.size
        for kind, (lo, hi) in self.sizes.items():
            if not 0 < lo <= hi < radius:
                raise ValueError(f"{kind}: size range must satisfy 0 < lo <= hi < FOV radius")
        for grade, spec in self.counts.items():
            for kind, (lo, hi) in spec.items():
                if kind not in LESION_TYPES or not 0 <= lo <= hi:
                    raise ValueError(f"grade {grade}: bad count range for {kind}")

    def to_dict(self):
        d = asdict(self)
        d["counts"] = {str(g): {k: list(v) for k, v in c.items()} for g, c in self.counts.items()}
        d["sizes"] = {k: list(v) for k, v in self.sizes.items()}
        d["colors"] = {k: list(v) for k, v in self.colors.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "counts" in d:
            d["counts"] = {int(g): {k: tuple(v) for k, v in c.items()} for g, c in d["counts"].items()}
        for key in ("sizes", "colors"):
            if key in d:
                d[key] = {k: tuple(v) for k, v in d[key].items()}
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Lesion:
    kind: str
    cy: float
    cx: float
    radius: float


@dataclass
class SyntheticScene:
    image: np.ndarray
    lesion_masks: dict
    grade: int
    seed: int
    lesions: list
    clean_image: np.ndarray

    @property
    def referable(self):
        return self.grade >= REFERABLE_GRADE


def _coverage(h, w, cy, cx, radius, sub=4):
    """Fraction of each pixel inside the disc, by sub x sub supersampling."""
    offs = (np.arange(sub) + 0.5) / sub - 0.5
    yy = np.arange(h)[:, None, None, None] + offs[None, None, :, None]
    xx = np.arange(w)[None, :, None, None] + offs[None, None, None, :]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2).mean(axis=(2, 3))


def _background(cfg: GeneratorConfig, rng):
    n = cfg.size
    c = (n - 1) / 2.0
    fov_r = cfg.fov_fraction * n
    yy, xx = np.mgrid[:n, :n].astype(float)
    # illumination falls off radially, brighter spot near one side
    oy, ox = rng.uniform(-0.25, 0.25, 2) * fov_r + c
    base = np.array([0.60, 0.30, 0.14]) * rng.uniform(0.9, 1.1)
    radial = 1.0 - 0.25 * (np.hypot(yy - c, xx - c) / fov_r) ** 2
    spot = 0.12 * np.exp(-((yy - oy) ** 2 + (xx - ox) ** 2) / (2 * (0.12 * n) ** 2))
    img = base[None, None, :] * radial[..., None] + spot[..., None] * np.array([1.0, 0.9, 0.6])
    noise = ndimage.gaussian_filter(rng.normal(0, 1, (n, n, 3)), (1.2, 1.2, 0))
    img += cfg.texture_amplitude * noise / (noise.std() + 1e-12)
    # dark curvilinear structures (quadratic Bezier curves)
    vessels = np.zeros((n, n))
    for _ in range(cfg.vessel_count):
        pts = rng.uniform(-1, 1, (3, 2)) * fov_r + c
        t = np.linspace(0, 1, 4 * n)[:, None]
        curve = (1 - t) ** 2 * pts[0] + 2 * (1 - t) * t * pts[1] + t ** 2 * pts[2]
        width = rng.uniform(0.6, 1.4)
        stamp = np.zeros((n, n))
        iy = np.clip(np.round(curve[:, 0]).astype(int), 0, n - 1)
        ix = np.clip(np.round(curve[:, 1]).astype(int), 0, n - 1)
        stamp[iy, ix] = 1.0
        vessels = np.maximum(vessels, np.clip(ndimage.gaussian_filter(stamp, width) * 2.5 * width, 0, 1))
    img -= cfg.vessel_contrast * vessels[..., None] * np.array([1.0, 1.2, 0.6])
    fov = np.hypot(yy - c, xx - c) <= fov_r
    img = np.clip(img, 0.02, 0.95) * fov[..., None]
    return img, fov


def _place(cfg, rng, kind, placed):
    n = cfg.size
    c = (n - 1) / 2.0
    fov_r = cfg.fov_fraction * n
    lo, hi = cfg.sizes[kind]
    for _ in range(cfg.max_attempts):
        radius = rng.uniform(lo, hi)
        rad = (fov_r - radius - 2) * np.sqrt(rng.uniform())
        ang = rng.uniform(0, 2 * np.pi)
        cy, cx = c + rad * np.sin(ang), c + rad * np.cos(ang)
        if all(np.hypot(cy - o.cy, cx - o.cx) > radius + o.radius + 2 for o in placed):
            return Lesion(kind, float(cy), float(cx), float(radius))
    raise GenerationError(f"could not place {kind} after {cfg.max_attempts} attempts")


def generate_scene(cfg: GeneratorConfig = GeneratorConfig(), grade=0, seed=0) -> SyntheticScene:
    """Render one phantom of the given grade.  Pure in (cfg, grade, seed)."""
    if grade not in (0, 1, 2, 3):
        raise ValueError(f"grade must be 0..3, got {grade}")
    rng = np.random.default_rng([int(seed), int(grade)])
    clean, fov = _background(cfg, rng)
    n = cfg.size
    placed = []
    for kind in LESION_TYPES:
        lo, hi = cfg.counts.get(grade, {}).get(kind, (0, 0))
        for _ in range(int(rng.integers(lo, hi + 1))):
            placed.append(_place(cfg, rng, kind, placed))

    img = clean.copy()
    masks = {k: np.zeros((n, n), bool) for k in LESION_TYPES}
    for les in placed:
        cov = _coverage(n, n, les.cy, les.cx, les.radius)
        strength = cov
        if les.kind == "diffuse_patch":
            d = np.hypot(*np.mgrid[:n, :n] - np.array([les.cy, les.cx])[:, None, None])
            strength = cov * (0.7 + 0.3 * np.clip(1 - (d / les.radius) ** 2, 0, 1))
        img += strength[..., None] * np.asarray(cfg.colors[les.kind])
        masks[les.kind] |= (cov >= 0.5) & fov
    img = np.clip(img, 0.0, 1.0) * fov[..., None]
    return SyntheticScene(img, masks, grade, int(seed), placed, clean)


# ---------------------------------------------------------------------------
# On-disk datasets
# ---------------------------------------------------------------------------

MANIFEST_VERSION = 1


def to_uint8(image):
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def save_png(path, image):
    arr = np.asarray(image)
    if arr.dtype == bool:
        PILImage.fromarray(arr).convert("1").save(path, optimize=False)
    else:
        PILImage.fromarray(to_uint8(arr)).save(path, optimize=False)


def load_png(path):
    with PILImage.open(path) as im:
        if im.mode == "1":
            return np.asarray(im, dtype=bool)
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def scene_seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_dataset(out_dir, counts: dict, cfg: GeneratorConfig = GeneratorConfig(), seed=0):
    """Write images, masks and ``manifest.json`` under ``out_dir``.

    ``counts`` maps grade to number of scenes.  Returns the manifest.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    plan = [int(g) for g in sorted(counts, key=int) for _ in range(int(counts[g]))]
    if any(c < 0 for c in map(int, counts.values())):
        raise ValueError("counts must be non-negative")
    seeds = scene_seeds(seed, len(plan))
    entries = []
    for i, (grade, s) in enumerate(zip(plan, seeds)):
        scene = generate_scene(cfg, grade, s)
        sid = f"{i:04d}"
        save_png(out / "images" / f"{sid}.png", scene.image)
        for kind, mask in scene.lesion_masks.items():
            save_png(out / "masks" / f"{sid}.{kind}.png", mask)
        entries.append({"id": sid, "grade": grade, "seed": s})
    manifest = {
        "version": MANIFEST_VERSION,
        "generator_cfg_hash": cfg.digest(),
        "generator_cfg": cfg.to_dict(),
        "dataset_seed": int(seed),
        "entries": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_manifest(data_dir):
    path = Path(data_dir) / "manifest.json"
    manifest = json.loads(path.read_text())
    if not isinstance(manifest, dict) or "entries" not in manifest:
        raise ValueError(f"{path}: manifest has no entries")
    for e in manifest["entries"]:
        if not {"id", "grade"} <= set(e):
            raise ValueError(f"{path}: malformed entry {e!r}")
    return manifest


def load_dataset(data_dir, with_masks=False):
    """Return ``(images, grades, ids[, masks])`` for a generated dataset."""
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    images, grades, ids, masks = [], [], [], []
    for e in manifest["entries"]:
        images.append(load_png(data_dir / "images" / f"{e['id']}.png"))
        grades.append(int(e["grade"]))
        ids.append(e["id"])
        if with_masks:
            masks.append({k: load_png(data_dir / "masks" / f"{e['id']}.{k}.png") for k in LESION_TYPES})
    out = (np.stack(images) if images else np.zeros((0, 0, 0, 3)), np.array(grades, int), ids)
    return out + (masks,) if with_masks else out
