"""Procedural shape-detection scenes with a parametric domain shift.

Scenes are 96x96 float images of anti-aliased discs, squares and triangles
(classes 0/1/2) over a textured background, annotated with exact bounding
boxes. The domain shift is one of: fog (depth-dependent haze + blur,
strongest at the top of the image), a color cast, or a global scale change.

On disk a dataset is a directory of binary PPM (P6) images plus an
``annotations.jsonl`` file (one JSON object per scene) and a
``manifest.json`` echoing counts, the generating spec and the seed.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, zoom as ndi_zoom

from .boxes import iou_matrix

CLASS_NAMES = ("disc", "square", "triangle")
NUM_CLASSES = 3


class DataError(Exception):
    """Structured dataset I/O failure naming the offending entry."""


@dataclass
class Scene:
    """One image with its ground-truth (or pseudo-label) annotations."""

    image: np.ndarray                  # (H, W, 3) float32 in [0, 1]
    boxes: np.ndarray                  # (K, 4) float32, (x1, y1, x2, y2)
    labels: np.ndarray                 # (K,) int64, < NUM_CLASSES
    id: str = ""


@dataclass(frozen=True)
class DomainSpec:
    """Background texture, object population and shift parameters."""

    image_size: int = 96
    base_color_range: tuple = (0.35, 0.65)
    noise_amplitude: float = 0.08
    noise_cells: int = 12              # coarse texture grid resolution
    min_objects: int = 2
    max_objects: int = 8
    min_size: float = 20.0
    max_size: float = 44.0
    min_contrast: float = 0.35         # L2 distance of fill color from base
    max_overlap: float = 0.4           # resample a shape overlapping more than this
    shift: str = "none"                # none | fog | color | scale
    fog_strength: float = 0.0
    haze_color: tuple = (0.92, 0.92, 0.95)
    color_cast: tuple = (1.0, 1.0, 1.0)
    scale_factor: float = 1.0

    def __post_init__(self):
        if self.shift not in ("none", "fog", "color", "scale"):
            raise ValueError(f"unknown shift {self.shift!r}")
        if not 0 <= self.fog_strength <= 1:
            raise ValueError("fog strength must be in [0, 1]")
        if self.scale_factor <= 0:
            raise ValueError("scale factor must be > 0")
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects > max_objects")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("base_color_range", "haze_color", "color_cast"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        for key in ("base_color_range", "haze_color", "color_cast"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

_SS = 4  # supersampling factor for anti-aliased masks


def _shape_mask(class_id: int, x1, y1, x2, y2, region_x, region_y, rw, rh):
    """Coverage alpha of one shape inside an integer pixel region,
    rendered at _SS x supersampling and box-averaged down."""
    ys = (np.arange(rh * _SS) + 0.5) / _SS + region_y
    xs = (np.arange(rw * _SS) + 0.5) / _SS + region_x
    gx, gy = np.meshgrid(xs, ys)
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    w, h = x2 - x1, y2 - y1
    if class_id == 0:        # disc
        r = w / 2
        inside = (gx - cx) ** 2 + (gy - cy) ** 2 <= r * r
    elif class_id == 1:      # axis-aligned square
        inside = (gx >= x1) & (gx <= x2) & (gy >= y1) & (gy <= y2)
    else:                    # upward triangle: apex top-center, base bottom
        t = np.clip((gy - y1) / max(h, 1e-6), 0, 1)
        half = t * (w / 2)
        inside = (np.abs(gx - cx) <= half) & (gy >= y1) & (gy <= y2)
    inside = inside.astype(np.float32)
    return inside.reshape(rh, _SS, rw, _SS).mean(axis=(1, 3))


def _background(spec: DomainSpec, rng: np.random.Generator):
    s = spec.image_size
    lo, hi = spec.base_color_range
    base = rng.uniform(lo, hi, size=3).astype(np.float32)
    coarse = rng.uniform(-1, 1, size=(spec.noise_cells, spec.noise_cells, 3))
    noise = ndi_zoom(coarse, (s / spec.noise_cells, s / spec.noise_cells, 1), order=1)
    img = base[None, None, :] + spec.noise_amplitude * noise.astype(np.float32)
    return np.clip(img, 0, 1).astype(np.float32), base


def generate_scene(spec: DomainSpec, rng: np.random.Generator,
                   scene_id: str = "") -> Scene:
    """Render one scene; boxes are exact shape bounds clipped to the image.

    Shapes whose visible part would be degenerate (under 2 px a side) are
    rejection-resampled. The domain shift is applied last.
    """
    s = spec.image_size
    img, base = _background(spec, rng)
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes, labels = [], []
    for _ in range(count):
        for _attempt in range(100):
            class_id = int(rng.integers(0, NUM_CLASSES))
            size = rng.uniform(spec.min_size, spec.max_size)
            cx = rng.uniform(0, s)
            cy = rng.uniform(0, s)
            x1, x2 = cx - size / 2, cx + size / 2
            y1, y2 = cy - size / 2, cy + size / 2
            vx1, vy1 = max(x1, 0.0), max(y1, 0.0)
            vx2, vy2 = min(x2, float(s)), min(y2, float(s))
            if vx2 - vx1 < 2 or vy2 - vy1 < 2:
                continue
            if boxes and iou_matrix(np.array([[vx1, vy1, vx2, vy2]]),
                                    np.asarray(boxes)).max() > spec.max_overlap:
                continue
            color = rng.uniform(0, 1, size=3).astype(np.float32)
            while np.linalg.norm(color - base) < spec.min_contrast:
                color = rng.uniform(0, 1, size=3).astype(np.float32)
            rx0, ry0 = int(np.floor(vx1)), int(np.floor(vy1))
            rx1, ry1 = int(np.ceil(vx2)), int(np.ceil(vy2))
            alpha = _shape_mask(class_id, x1, y1, x2, y2, rx0, ry0, rx1 - rx0, ry1 - ry0)
            region = img[ry0:ry1, rx0:rx1]
            img[ry0:ry1, rx0:rx1] = (alpha[..., None] * color[None, None, :]
                                     + (1 - alpha[..., None]) * region)
            boxes.append((vx1, vy1, vx2, vy2))
            labels.append(class_id)
            break
    scene = Scene(
        image=np.clip(img, 0, 1).astype(np.float32),
        boxes=np.asarray(boxes, np.float32).reshape(-1, 4),
        labels=np.asarray(labels, np.int64),
        id=scene_id,
    )
    return _apply_shift(scene, spec)


def _apply_shift(scene: Scene, spec: DomainSpec) -> Scene:
    if spec.shift == "fog" and spec.fog_strength > 0:
        return replace(scene, image=apply_fog(scene.image, spec.fog_strength,
                                              spec.haze_color))
    if spec.shift == "color":
        img = np.clip(scene.image * np.asarray(spec.color_cast, np.float32), 0, 1)
        return replace(scene, image=img.astype(np.float32))
    if spec.shift == "scale" and spec.scale_factor != 1.0:
        return apply_scale(scene, spec.scale_factor)
    return scene


FOG_DEPTH_FLOOR = 0.5


def apply_fog(image: np.ndarray, strength: float, haze_color) -> np.ndarray:
    """Depth-proxy fog: transmittance t = 1 - strength*depth with depth
    rising from the bottom row to the top row; the transmitted component is
    blurred. Identity at strength 0.

    The bottom-row depth is floored at 0.5 so the whole image hazes over:
    with a zero floor the vertical haze gradient itself adds cross-row
    variance and per-image contrast stops decreasing monotonically.
    """
    if not 0 <= strength <= 1:
        raise ValueError("fog strength must be in [0, 1]")
    if strength == 0:
        return image
    h = image.shape[0]
    depth = np.linspace(1.0, FOG_DEPTH_FLOOR, h, dtype=np.float32)
    t = (1.0 - strength * depth)[:, None, None]
    blurred = gaussian_filter(image, sigma=(2.0 * strength, 2.0 * strength, 0))
    haze = np.asarray(haze_color, np.float32)[None, None, :]
    return np.clip((1 - t) * haze + t * blurred, 0, 1).astype(np.float32)


def apply_scale(scene: Scene, factor: float) -> Scene:
    """Zoom about the image center; boxes scale with the content and boxes
    shrunk below 2 px a side are dropped."""
    h, w = scene.image.shape[:2]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    ys = np.clip(np.round(cy + (np.arange(h) - cy) / factor).astype(int), 0, h - 1)
    xs = np.clip(np.round(cx + (np.arange(w) - cx) / factor).astype(int), 0, w - 1)
    img = np.ascontiguousarray(scene.image[ys][:, xs])
    boxes = scene.boxes.copy()
    labels = scene.labels.copy()
    if len(boxes):
        ctr = np.array([cx + 0.5, cy + 0.5, cx + 0.5, cy + 0.5], np.float32)
        boxes = (boxes - ctr) * factor + ctr
        boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0, w)
        boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0, h)
        ok = (boxes[:, 2] - boxes[:, 0] >= 2) & (boxes[:, 3] - boxes[:, 1] >= 2)
        boxes, labels = boxes[ok], labels[ok]
    return replace(scene, image=img, boxes=boxes.astype(np.float32), labels=labels)


def generate_split(spec: DomainSpec, count: int, seed: int, prefix: str):
    """Deterministic scene list; each scene has its own derived RNG stream."""
    scenes = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        scenes.append(generate_scene(spec, rng, scene_id=f"{prefix}_{i:05d}"))
    return scenes


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def _write_ppm(path: Path, image: np.ndarray):
    q = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    h, w = q.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def _read_ppm(path: Path) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise DataError(f"{path} is not a binary PPM (P6) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    data = raw[m.end():]
    if len(data) < w * h * 3:
        raise DataError(f"{path}: truncated pixel data")
    q = np.frombuffer(data[: w * h * 3], np.uint8).reshape(h, w, 3)
    return (q.astype(np.float32) / 255.0)


def write_dataset(scenes, out_dir, spec: DomainSpec | None = None,
                  seed: int | None = None):
    """Write scenes to out_dir: images/*.ppm + annotations.jsonl + manifest.json."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / "annotations.jsonl", "w", encoding="utf-8") as f:
        for sc in scenes:
            fname = f"images/{sc.id}.ppm"
            _write_ppm(out / fname, sc.image)
            f.write(json.dumps({
                "file": fname,
                "id": sc.id,
                "boxes": [[float(v) for v in b] for b in sc.boxes],
                "labels": [int(v) for v in sc.labels],
            }) + "\n")
    manifest = {
        "format": "sfodlab-dataset-v1",
        "count": len(scenes),
        "classes": list(CLASS_NAMES),
        "spec": spec.to_dict() if spec is not None else None,
        "seed": seed,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)


def read_dataset(in_dir):
    """Load a dataset directory; raises DataError naming any broken entry."""
    root = Path(in_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DataError(f"missing manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"corrupt manifest {mpath}: {e}") from e
    apath = root / "annotations.jsonl"
    if not apath.exists():
        raise DataError(f"missing annotations: {apath}")
    scenes = []
    with open(apath, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{apath}:{lineno}: corrupt record: {e}") from e
            img = _read_ppm(root / rec["file"])
            scenes.append(Scene(
                image=img,
                boxes=np.asarray(rec["boxes"], np.float32).reshape(-1, 4),
                labels=np.asarray(rec["labels"], np.int64),
                id=rec.get("id", Path(rec["file"]).stem),
            ))
    if len(scenes) != manifest.get("count", len(scenes)):
        raise DataError(
            f"{in_dir}: manifest count {manifest.get('count')} != {len(scenes)} records")
    return scenes
