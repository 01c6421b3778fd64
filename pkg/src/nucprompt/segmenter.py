"""Point-to-instance segmentation.

The baseline turns each prompt into a lattice disk of radius ``r`` around the
prompt's pixel, clipped to the prompt's Voronoi cell (nearest prompt wins,
ties go to the lower prompt index) and optionally to a thresholded foreground.

Heavier segmenters plug in through a command-line adapter::

    <command> IMAGE_PNG PROMPTS_JSON OUT_MASK_PNG OUT_CLASSES_JSON

which must write a 16-bit instance-label PNG and ``{"class_of": {"id": class}}``.
This module is itself such an adapter (``python -m nucprompt.segmenter``).
"""

from __future__ import annotations

import argparse
import json
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DatasetError


@dataclass
class PromptSet:
    points: np.ndarray  # M x 2, (x, y)
    classes: np.ndarray  # M
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)

    def __len__(self):
        return len(self.points)

    def to_json(self) -> dict:
        scores = self.scores if self.scores is not None else np.ones(len(self))
        return {
            "prompts": [
                {"x": float(x), "y": float(y), "class": int(c), "score": float(s)}
                for (x, y), c, s in zip(self.points, self.classes, scores)
            ]
        }

    @classmethod
    def from_json(cls, data: dict) -> "PromptSet":
        items = data["prompts"]
        return cls(
            points=[[p["x"], p["y"]] for p in items],
            classes=[p["class"] for p in items],
            scores=[p.get("score", 1.0) for p in items],
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PromptSet":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class InstanceMap:
    labels: np.ndarray  # H x W ints, 0 = background
    class_of: dict[int, int] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.labels.max(initial=0))

    @classmethod
    def from_scene(cls, scene) -> "InstanceMap":
        return cls(scene.instance_map.copy(), {i + 1: int(c) for i, c in enumerate(scene.classes)})

    def save(self, mask_path, classes_path):
        Image.fromarray(self.labels.astype(np.uint16)).save(mask_path)
        Path(classes_path).write_text(
            json.dumps({"class_of": {str(k): int(v) for k, v in self.class_of.items()}})
        )

    @classmethod
    def load(cls, mask_path, classes_path) -> "InstanceMap":
        try:
            with Image.open(mask_path) as img:
                labels = np.array(img).astype(np.int64)
            data = json.loads(Path(classes_path).read_text())
        except (OSError, ValueError) as exc:
            raise DatasetError(f"cannot read segmenter output: {exc}") from exc
        return cls(labels, {int(k): int(v) for k, v in data["class_of"].items()})


def disk_offsets(radius: float) -> np.ndarray:
    """Integer ``(dy, dx)`` offsets with ``dy^2 + dx^2 <= radius^2``."""
    r = int(np.floor(radius))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dy * dy + dx * dx <= radius * radius
    return np.stack([dy[keep], dx[keep]], axis=1)


def segment(image, prompts: PromptSet, radius: float = 5.0, fg_threshold: float | None = None) -> InstanceMap:
    """Baseline disk-within-Voronoi segmentation of prompts into an InstanceMap."""
    h, w = image.shape[:2]
    pts = prompts.points
    if len(pts) and (
        (pts[:, 0] < 0).any() or (pts[:, 0] >= w).any() or (pts[:, 1] < 0).any() or (pts[:, 1] >= h).any()
    ):
        raise ConfigError(f"prompt outside the {w}x{h} image")
    anchors = np.floor(pts).astype(np.int64)  # (col, row)

    best_d = np.full((h, w), np.iinfo(np.int64).max, dtype=np.int64)
    owner = np.full((h, w), -1, dtype=np.int64)
    offs = disk_offsets(radius)
    d2 = (offs ** 2).sum(1)
    for i, (c, r) in enumerate(anchors):
        rr, cc = offs[:, 0] + r, offs[:, 1] + c
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        rr, cc, dd = rr[ok], cc[ok], d2[ok]
        win = dd < best_d[rr, cc]
        best_d[rr[win], cc[win]] = dd[win]
        owner[rr[win], cc[win]] = i

    if fg_threshold is not None:
        gray = np.asarray(image, dtype=np.float64)[..., :3].mean(-1)
        owner[gray >= fg_threshold] = -1

    class_of = {}
    present = np.unique(owner[owner >= 0])
    lut = np.zeros(len(anchors) + 1, dtype=np.int64)
    for new_id, i in enumerate(present, start=1):
        lut[i + 1] = new_id
        class_of[new_id] = int(prompts.classes[i])
    labels = lut[owner + 1]
    return InstanceMap(labels, class_of)


def median_equivalent_radius(scenes) -> float:
    from .synthdata import equivalent_radii

    radii = np.concatenate([equivalent_radii(s) for s in scenes] or [np.zeros(0)])
    return float(np.median(radii)) if len(radii) else 5.0


@dataclass
class BaselineSegmenter:
    radius: float = 5.0
    fg_threshold: float | None = None

    def __call__(self, image, prompts: PromptSet) -> InstanceMap:
        return segment(image, prompts, self.radius, self.fg_threshold)


@dataclass
class ExternalSegmenter:
    """Runs an adapter command per image through temporary files."""

    command: list[str]
    timeout: float | None = 600

    def __call__(self, image, prompts: PromptSet) -> InstanceMap:
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            rgb = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
            Image.fromarray(rgb).save(tmp / "image.png")
            prompts.save(tmp / "prompts.json")
            args = [*self.command, str(tmp / "image.png"), str(tmp / "prompts.json"),
                    str(tmp / "mask.png"), str(tmp / "classes.json")]
            proc = subprocess.run(args, capture_output=True, text=True, timeout=self.timeout)
            if proc.returncode != 0:
                raise RuntimeError(f"segmenter adapter failed ({proc.returncode}): {proc.stderr.strip()}")
            return InstanceMap.load(tmp / "mask.png", tmp / "classes.json")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Baseline point-to-instance segmenter adapter.")
    parser.add_argument("image")
    parser.add_argument("prompts")
    parser.add_argument("out_mask")
    parser.add_argument("out_classes")
    parser.add_argument("--radius", type=float, default=5.0)
    parser.add_argument("--fg-threshold", type=float, default=None)
    args = parser.parse_args(argv)
    with Image.open(args.image) as img:
        image = np.array(img.convert("RGB")).astype(np.float64) / 255.0
    result = segment(image, PromptSet.load(args.prompts), args.radius, args.fg_threshold)
    result.save(args.out_mask, args.out_classes)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
