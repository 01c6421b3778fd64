"""Deterministic synthetic nuclei scenes and their on-disk dataset format.

A scene is an RGB image with elliptical "nuclei" drawn on a stained-looking
background, together with an exact instance label map, one centroid point per
instance and a class id per instance. Classes differ in size, elongation and
stain intensity so that point classification is learnable.

Coordinates follow one convention throughout the package: pixel ``(row, col)``
covers the continuous square ``[col, col + 1) x [row, row + 1)``, so its center
sits at ``(col + 0.5, row + 0.5)`` in ``(x, y)`` order.

Dataset layout::

    root/manifest.json
    root/images/{id}.png   8-bit RGB
    root/masks/{id}.png    16-bit instance labels
    root/ann/{id}.json     {"points": [[x, y], ...], "classes": [c, ...], "n": N}
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ConsistencyError, DatasetError, GenerationError

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ClassAppearance:
    """Sampling ranges that make one nucleus class look distinct."""

    radius: tuple[float, float]
    aspect: tuple[float, float]  # minor/major axis ratio
    stain: tuple[float, float]  # opacity of the nuclear stain, 0..1
    tint: tuple[float, float, float]


def default_appearance(n_classes: int, size_range=(3.0, 8.0)) -> tuple[ClassAppearance, ...]:
    lo, hi = size_range
    step = (hi - lo) / n_classes
    tints = [
        (0.25, 0.12, 0.45),
        (0.35, 0.20, 0.55),
        (0.18, 0.10, 0.35),
        (0.45, 0.25, 0.60),
    ]
    out = []
    for k in range(n_classes):
        aspect = (0.80, 1.0) if k % 2 == 0 else (0.45, 0.65)
        stain = 0.55 + 0.35 * ((k * 7) % n_classes) / max(n_classes - 1, 1)
        out.append(
            ClassAppearance(
                radius=(lo + k * step, lo + (k + 1) * step),
                aspect=aspect,
                stain=(stain - 0.08, min(stain + 0.08, 1.0)),
                tint=tints[k % len(tints)],
            )
        )
    return tuple(out)


@dataclass(frozen=True)
class SceneConfig:
    height: int = 128
    width: int = 128
    n_classes: int = 4
    count_range: tuple[int, int] = (10, 20)
    size_range: tuple[float, float] = (3.0, 8.0)
    appearance: tuple[ClassAppearance, ...] | None = None
    class_probs: tuple[float, ...] | None = None
    # fractional (x0, y0, x1, y1) region that nucleus centers are drawn from
    placement_box: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    min_gap: float = 1.0
    noise: float = 0.03
    max_attempts: int = 5000

    def __post_init__(self):
        if self.height < 64 or self.width < 64:
            raise ConfigError(f"scene must be at least 64x64, got {self.height}x{self.width}")
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")
        lo, hi = self.count_range
        if not (1 <= lo <= hi <= 200):
            raise ConfigError(f"count_range must lie within [1, 200], got {self.count_range}")
        if self.appearance is not None and len(self.appearance) != self.n_classes:
            raise ConfigError("appearance must list one entry per class")
        if self.class_probs is not None and len(self.class_probs) != self.n_classes:
            raise ConfigError("class_probs must list one entry per class")

    def appearances(self) -> tuple[ClassAppearance, ...]:
        if self.appearance is not None:
            return self.appearance
        return default_appearance(self.n_classes, self.size_range)


@dataclass(frozen=True)
class NucleusSpec:
    center: tuple[float, float]
    axes: tuple[float, float]
    angle: float
    class_id: int
    intensity: float


@dataclass
class Scene:
    image: np.ndarray  # H x W x 3, float64 in [0, 1]
    instance_map: np.ndarray  # H x W, int32, 0 = background
    points: np.ndarray  # N x 2, (x, y)
    classes: np.ndarray  # N, int64

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> tuple[int, int]:
        return self.instance_map.shape

    def check(self) -> None:
        """Raise ``ConsistencyError`` if any scene invariant is violated."""
        labels = np.unique(self.instance_map)
        labels = labels[labels > 0]
        if len(self.points) != len(self.classes):
            raise ConsistencyError("points and classes differ in length")
        if not np.array_equal(labels, np.arange(1, self.n + 1)):
            raise ConsistencyError("instance labels are not exactly 1..N")
        h, w = self.shape
        for i, (x, y) in enumerate(self.points):
            r, c = int(np.floor(y)), int(np.floor(x))
            if not (0 <= r < h and 0 <= c < w) or self.instance_map[r, c] != i + 1:
                raise ConsistencyError(f"point {i} is outside instance {i + 1}")

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and np.array_equal(self.instance_map, other.instance_map)
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.classes, other.classes)
        )


def empty_scene(height: int, width: int, background: float = 0.9) -> Scene:
    return Scene(
        image=np.full((height, width, 3), np.round(background * 255) / 255),
        instance_map=np.zeros((height, width), np.int32),
        points=np.zeros((0, 2)),
        classes=np.zeros(0, np.int64),
    )


def ellipse_mask(height, width, nucleus: NucleusSpec) -> np.ndarray:
    """Exact inside test of pixel centers against the ellipse, no anti-aliasing."""
    cx, cy = nucleus.center
    a, b = nucleus.axes
    yy, xx = np.mgrid[0:height, 0:width]
    dx = xx + 0.5 - cx
    dy = yy + 0.5 - cy
    cos, sin = np.cos(nucleus.angle), np.sin(nucleus.angle)
    u = (dx * cos + dy * sin) / a
    v = (-dx * sin + dy * cos) / b
    return u * u + v * v <= 1.0


def _sample_nucleus(rng, config, app, class_id, bounds):
    radius = rng.uniform(*app.radius)
    aspect = rng.uniform(*app.aspect)
    # equal-area axes keep the class radius meaningful for every aspect
    a = radius / np.sqrt(aspect)
    b = radius * np.sqrt(aspect)
    x0, y0, x1, y1 = bounds
    margin = a + 1.0
    lo_x, hi_x = max(x0, margin), min(x1, config.width - margin)
    lo_y, hi_y = max(y0, margin), min(y1, config.height - margin)
    if lo_x >= hi_x or lo_y >= hi_y:
        return None
    center = (rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y))
    return NucleusSpec(
        center=center,
        axes=(a, b),
        angle=rng.uniform(0.0, np.pi),
        class_id=class_id,
        intensity=rng.uniform(*app.stain),
    )


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Draw a scene; identical ``(config, seed)`` gives a bit-identical result."""
    rng = np.random.default_rng(seed)
    apps = config.appearances()
    h, w = config.height, config.width
    bx0, by0, bx1, by1 = config.placement_box
    bounds = (bx0 * w, by0 * h, bx1 * w, by1 * h)

    n_target = int(rng.integers(config.count_range[0], config.count_range[1] + 1))
    probs = None
    if config.class_probs is not None:
        probs = np.asarray(config.class_probs, float)
        probs = probs / probs.sum()
    class_ids = rng.choice(config.n_classes, size=n_target, p=probs)

    instance_map = np.zeros((h, w), np.int32)
    placed: list[NucleusSpec] = []
    points = []
    attempts = 0
    for class_id in class_ids:
        while True:
            attempts += 1
            if attempts > config.max_attempts:
                raise GenerationError(
                    f"seed {seed}: placed {len(placed)} of {n_target} nuclei "
                    f"within {config.max_attempts} attempts"
                )
            nuc = _sample_nucleus(rng, config, apps[class_id], int(class_id), bounds)
            if nuc is None:
                continue
            if any(
                np.hypot(nuc.center[0] - o.center[0], nuc.center[1] - o.center[1])
                < nuc.axes[0] + o.axes[0] + config.min_gap
                for o in placed
            ):
                continue
            mask = ellipse_mask(h, w, nuc)
            if not mask.any():
                continue
            rows, cols = np.nonzero(mask)
            cx, cy = cols.mean() + 0.5, rows.mean() + 0.5
            if not mask[int(np.floor(cy)), int(np.floor(cx))]:
                continue
            placed.append(nuc)
            points.append((cx, cy))
            instance_map[mask] = len(placed)
            break

    image = _render(rng, config, apps, placed, instance_map)
    return Scene(
        image=image,
        instance_map=instance_map,
        points=np.asarray(points, float).reshape(-1, 2),
        classes=np.asarray([n.class_id for n in placed], np.int64),
    )


def _render(rng, config, apps, nuclei, instance_map):
    h, w = config.height, config.width
    background = np.array([0.93, 0.80, 0.87])
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    shade = 0.04 * np.sin(2 * np.pi * xx + phase[0]) * np.cos(2 * np.pi * yy + phase[1])
    image = np.broadcast_to(background, (h, w, 3)) + shade[..., None]

    for i, nuc in enumerate(nuclei, start=1):
        mask = instance_map == i
        tint = np.asarray(apps[nuc.class_id].tint)
        texture = 1.0 + 0.08 * rng.standard_normal(int(mask.sum()))
        alpha = np.clip(nuc.intensity * texture, 0.0, 1.0)[:, None]
        image[mask] = image[mask] * (1 - alpha) + tint * alpha

    image = image + config.noise * rng.standard_normal(image.shape)
    return np.round(np.clip(image, 0.0, 1.0) * 255) / 255


def equivalent_radii(scene: Scene) -> np.ndarray:
    areas = np.bincount(scene.instance_map.ravel(), minlength=scene.n + 1)[1:]
    return np.sqrt(areas / np.pi)


# ---------------------------------------------------------------------------
# on-disk format


@dataclass
class DatasetManifest:
    root: Path
    n_classes: int
    class_names: list[str]
    seed: int | None
    entries: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "n_classes": self.n_classes,
            "class_names": self.class_names,
            "seed": self.seed,
            "scenes": self.entries,
        }


def write_dataset(scenes, root, n_classes=None, class_names=None, seed=None) -> DatasetManifest:
    root = Path(root)
    if n_classes is None:
        n_classes = len(class_names) if class_names else 1 + max(
            (int(s.classes.max()) for s in scenes if s.n), default=1
        )
    if class_names is None:
        class_names = [f"class_{k}" for k in range(n_classes)]
    if len(class_names) != n_classes:
        raise ConsistencyError("class_names length differs from n_classes")
    for sub in ("images", "masks", "ann"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    entries = []
    for i, scene in enumerate(scenes):
        if scene.n and scene.classes.max() >= n_classes:
            raise ConsistencyError(f"scene {i} has class ids >= {n_classes}")
        sid = f"{i:04d}"
        entry = {
            "id": sid,
            "image": f"images/{sid}.png",
            "mask": f"masks/{sid}.png",
            "ann": f"ann/{sid}.json",
        }
        rgb = np.round(np.clip(scene.image, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(root / entry["image"])
        if scene.instance_map.max(initial=0) > 65535:
            raise ConsistencyError("too many instances for a 16-bit mask")
        Image.fromarray(scene.instance_map.astype(np.uint16)).save(root / entry["mask"])
        ann = {
            "points": [[float(x), float(y)] for x, y in scene.points],
            "classes": [int(c) for c in scene.classes],
            "n": scene.n,
        }
        (root / entry["ann"]).write_text(json.dumps(ann), encoding="utf-8")
        entries.append(entry)

    manifest = DatasetManifest(root, n_classes, list(class_names), seed, entries)
    (root / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2), encoding="utf-8")
    return manifest


def read_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"missing manifest: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        return DatasetManifest(
            root=root,
            n_classes=int(data["n_classes"]),
            class_names=list(data["class_names"]),
            seed=data.get("seed"),
            entries=list(data["scenes"]),
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"corrupt manifest {path}: {exc}") from exc


def _load_png(path) -> np.ndarray:
    if not os.path.isfile(path):
        raise DatasetError(f"missing file: {path}")
    try:
        with Image.open(path) as img:
            return np.array(img)
    except OSError as exc:
        raise DatasetError(f"unreadable image {path}: {exc}") from exc


def read_scene(root, entry, n_classes) -> Scene:
    root = Path(root)
    rgb = _load_png(root / entry["image"])
    if rgb.ndim != 3 or rgb.shape[2] < 3:
        raise DatasetError(f"{root / entry['image']} is not an RGB image")
    labels = _load_png(root / entry["mask"]).astype(np.int32)
    ann_path = root / entry["ann"]
    try:
        ann = json.loads(ann_path.read_text(encoding="utf-8"))
        points = np.asarray(ann["points"], float).reshape(-1, 2)
        classes = np.asarray(ann["classes"], np.int64)
        n = int(ann["n"])
    except FileNotFoundError as exc:
        raise DatasetError(f"missing file: {ann_path}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"corrupt annotation {ann_path}: {exc}") from exc
    if n != len(points) or n != len(classes):
        raise ConsistencyError(f"{ann_path}: n={n} disagrees with points/classes")
    if n and (classes.min() < 0 or classes.max() >= n_classes):
        raise ConsistencyError(f"{ann_path}: class ids outside [0, {n_classes})")
    if labels.shape != rgb.shape[:2]:
        raise ConsistencyError(f"{entry['mask']}: mask shape differs from image")
    if int(labels.max(initial=0)) != n:
        raise ConsistencyError(f"{entry['mask']}: {labels.max()} labels but n={n}")
    return Scene(rgb[..., :3].astype(np.float64) / 255.0, labels, points, classes)


def read_dataset(root) -> list[Scene]:
    manifest = read_manifest(root)
    return [read_scene(manifest.root, e, manifest.n_classes) for e in manifest.entries]
