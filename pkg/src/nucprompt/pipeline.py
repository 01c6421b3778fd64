"""Model assembly, training, checkpoints, prompt export and evaluation."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import Backbone, BackboneConfig, FeaturePyramid
from .cksim import (
    ClassActivation,
    KnowledgeClassifier,
    PlainClassifier,
    class_weight_vector,
    classification_loss,
    encode_category_knowledge,
)
from .dgpom import (
    DensityLayer,
    DistributionDecoder,
    PointMLP,
    ProposalSet,
    count_loss,
    make_proposal_grid,
    sample_pyramid,
    bilinear_sample,
)
from .errors import ConfigError, DatasetError, DivergenceError, NumericError
from .matching import (
    DEFAULT_LOSS_WEIGHTS,
    LossBreakdown,
    assigned_labels,
    match_points,
    regression_loss,
    total_loss,
)
from .metrics import evaluate_scene
from .segmenter import BaselineSegmenter, InstanceMap, PromptSet
from .util import derive_seed, seeded

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 4
    channels: int = 32
    widths: tuple[int, int, int, int] = (16, 32, 48, 64)
    hidden: int = 64
    attn_dim: int = 64
    knowledge_dim: int = 64
    stride: int = 4
    tau: float = 0.5
    use_dgpom: bool = True
    use_cksim: bool = True
    share_projections: bool = False
    offset_scale: float = 4.0
    density_bias: float = -4.0
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 300
    loss_weights: tuple[float, float, float] = DEFAULT_LOSS_WEIGHTS
    background_weight: float = 0.3
    augment: bool = False
    nms_radius: float | None = None
    checkpoint_every: int = 0
    descriptions: tuple[str, ...] | None = None
    embedding_file: str | None = None
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.stride != 4:
            raise ConfigError("proposals are laid on the stride-4 shallow level; stride must be 4")
        if self.epochs < 0 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0 and lr > 0")

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("widths", "loss_weights", "descriptions"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class ForwardOutput:
    proposals: ProposalSet
    scores: torch.Tensor  # K x (C + 1)
    density: torch.Tensor | None  # 1 x 1 x H/4 x W/4
    pyramid: FeaturePyramid

    @property
    def points(self) -> torch.Tensor:
        return self.proposals.points


class PromptModel(nn.Module):
    """Backbone, proposal offsets, point regression and proposal classification.

    Every submodule draws its initial weights from its own seed stream, so
    toggling ``use_dgpom`` / ``use_cksim`` leaves the shared weights unchanged.
    """

    def __init__(self, config: ModelConfig, knowledge: np.ndarray | None = None):
        super().__init__()
        self.config = config
        c, ci, s = config.n_classes, config.channels, config.seed
        dt = config.torch_dtype
        self.backbone = seeded(s, "backbone", lambda: Backbone(BackboneConfig(ci, config.widths)), dt)
        if config.use_dgpom:
            self.decoder = seeded(s, "decoder", lambda: DistributionDecoder(ci), dt)
            self.deform = seeded(s, "deform", lambda: PointMLP(ci, ci, config.offset_scale), dt)
            self.density = seeded(s, "density", lambda: DensityLayer(ci, config.density_bias), dt)
        self.reg_head = seeded(s, "reg_head", lambda: PointMLP(3 * ci, config.hidden, config.offset_scale), dt)
        if config.use_cksim:
            if knowledge is None:
                knowledge = encode_category_knowledge(
                    c, descriptions=config.descriptions, embedding_file=config.embedding_file,
                    dim=config.knowledge_dim, seed=s,
                ).matrix
            if knowledge.shape != (c, config.knowledge_dim):
                raise ConfigError(
                    f"knowledge matrix {knowledge.shape} does not match ({c}, {config.knowledge_dim})"
                )
            self.activation = seeded(
                s, "activation",
                lambda: ClassActivation(knowledge, ci, config.attn_dim, 3, config.share_projections), dt,
            )
            self.classifier = seeded(s, "classifier", lambda: KnowledgeClassifier(c, ci, 3, config.hidden), dt)
        else:
            self.classifier = seeded(s, "plain_classifier", lambda: PlainClassifier(c, ci, 3, config.hidden), dt)
        self._grids: dict[tuple[int, int], torch.Tensor] = {}

    def grid(self, height: int, width: int) -> torch.Tensor:
        key = (height, width)
        if key not in self._grids:
            self._grids[key] = make_proposal_grid(height, width, self.config.stride, self.config.torch_dtype)
        return self._grids[key]

    def forward(self, image: torch.Tensor) -> ForwardOutput:
        h, w = image.shape[:2]
        pyramid = self.backbone((image - 0.5) / 0.25)
        initial = self.grid(h, w)
        density = None
        if self.config.use_dgpom:
            decoded = self.decoder(pyramid.shallow)
            deform_offsets = self.deform(bilinear_sample(decoded, initial, pyramid.strides[0]))
            deformed = initial + deform_offsets
            density = self.density(decoded)
        else:
            deform_offsets = torch.zeros_like(initial)
            deformed = initial
        offsets = self.reg_head(sample_pyramid(pyramid, deformed))
        points = deformed + offsets
        if self.config.use_cksim:
            activated = self.activation(pyramid)
            scores = self.classifier(activated, pyramid.strides, deformed)
        else:
            scores = self.classifier(sample_pyramid(pyramid, deformed))
        proposals = ProposalSet(initial, deform_offsets, deformed, offsets, points)
        return ForwardOutput(proposals, scores, density, pyramid)


def build_model(config: ModelConfig, knowledge=None) -> PromptModel:
    return PromptModel(config, knowledge)


def image_tensor(scene_or_image, dtype=torch.float32) -> torch.Tensor:
    image = getattr(scene_or_image, "image", scene_or_image)
    return torch.as_tensor(np.ascontiguousarray(image), dtype=dtype)


def scene_losses(model: PromptModel, out: ForwardOutput, scene) -> LossBreakdown:
    cfg = model.config
    gt = torch.as_tensor(scene.points, dtype=out.points.dtype)
    assignment = match_points(out.points, gt)
    labels = assigned_labels(assignment, scene.classes, out.points.shape[0], cfg.n_classes)
    weights = class_weight_vector(cfg.n_classes, cfg.background_weight, out.scores.dtype)
    l_cls = classification_loss(out.scores, torch.as_tensor(labels), weights)
    l_reg = regression_loss(out.points, gt, assignment)
    if out.density is not None:
        l_count = count_loss(out.density, scene.n)
    else:
        l_count = out.scores.new_zeros(())
    return total_loss(l_cls, l_reg, l_count, cfg.loss_weights)


# ---------------------------------------------------------------------------
# training


def augment_scene(scene, rng: np.random.Generator):
    """Random flip / 90-degree rotation applied consistently to image, map and points."""
    from .synthdata import Scene

    image, labels, pts = scene.image, scene.instance_map, scene.points.copy()
    h, w = labels.shape
    if rng.random() < 0.5:
        image, labels = image[:, ::-1], labels[:, ::-1]
        pts[:, 0] = w - pts[:, 0]
    if rng.random() < 0.5:
        image, labels = image[::-1], labels[::-1]
        pts[:, 1] = h - pts[:, 1]
    if h == w and rng.random() < 0.5:
        image, labels = image.transpose(1, 0, 2), labels.T
        pts = pts[:, ::-1].copy()
    return Scene(np.ascontiguousarray(image), np.ascontiguousarray(labels), pts, scene.classes)


@dataclass
class TrainResult:
    model: PromptModel
    history: list[dict] = field(default_factory=list)


def make_optimizer(model: nn.Module, config: ModelConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)


def train(scenes, config: ModelConfig, out_dir=None, model: PromptModel | None = None,
          log_every: int = 0) -> TrainResult:
    """Single-image-batch training; reproducible for a fixed ``config.seed``."""
    scenes = list(scenes)
    if not scenes:
        raise ConfigError("training needs at least one scene")
    torch.use_deterministic_algorithms(True)
    model = model or build_model(config)
    model.train()
    opt = make_optimizer(model, config)
    order_rng = np.random.default_rng(derive_seed(config.seed, "data_order"))
    aug_rng = np.random.default_rng(derive_seed(config.seed, "augment"))
    dtype = config.torch_dtype
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    history = []
    step = 0
    for _epoch in range(config.epochs):
        for idx in order_rng.permutation(len(scenes)):
            scene = scenes[idx]
            if config.augment:
                scene = augment_scene(scene, aug_rng)
            try:
                out = model(image_tensor(scene, dtype))
                losses = scene_losses(model, out, scene)
            except NumericError as exc:
                raise DivergenceError(step, str(exc)) from exc
            opt.zero_grad(set_to_none=True)
            losses.total.backward()
            opt.step()
            step += 1
            history.append({"step": step, **losses.as_floats()})
            if log_every and step % log_every == 0:
                log.info("step %d %s", step, history[-1])
            if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint_{step:06d}.ckpt", model, step)
    if out_dir is not None:
        save_checkpoint(out_dir / "model.ckpt", model, step)
        write_loss_history(history, out_dir / "loss.csv")
    model.eval()
    return TrainResult(model, history)


def write_loss_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "l_cls", "l_reg", "l_count", "total"])
        for row in history:
            writer.writerow([row["step"]] + [repr(float(row[k])) for k in ("l_cls", "l_reg", "l_count", "total")])


def read_loss_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# checkpoints: magic, u64 header length, JSON header, raw little-endian arrays

_MAGIC = b"NPCKPT01"


def save_checkpoint(path, model: PromptModel, step: int = 0) -> None:
    tensors = []
    offset = 0
    blobs = []
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = np.ascontiguousarray(arr).tobytes()
        tensors.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"config": model.config.to_json(), "step": step, "seed": model.config.seed, "tensors": tensors},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for data in blobs:
            fh.write(data)


def load_checkpoint(path) -> tuple[PromptModel, int]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != _MAGIC:
        raise DatasetError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    body = raw[16 + hlen:]
    config = ModelConfig.from_json(header["config"])
    placeholder = np.zeros((config.n_classes, config.knowledge_dim))
    model = PromptModel(replace(config, embedding_file=None), knowledge=placeholder)
    model.config = config
    state = {}
    for t in header["tensors"]:
        arr = np.frombuffer(body, dtype=np.dtype(t["dtype"]), count=int(np.prod(t["shape"], dtype=np.int64)),
                            offset=t["offset"]).reshape(t["shape"])
        state[t["name"]] = torch.as_tensor(arr.copy())
    model.load_state_dict(state)
    model.eval()
    return model, int(header["step"])


# ---------------------------------------------------------------------------
# inference


@dataclass
class Prediction:
    points: np.ndarray  # K x 2
    scores: np.ndarray  # K x (C + 1) logits
    prompts: PromptSet
    density: np.ndarray | None = None
    deformed: np.ndarray | None = None


def export_prompts(points, scores, tau: float, height: int, width: int,
                   nms_radius: float | None = None) -> PromptSet:
    """Foreground proposals with best class probability >= ``tau``, clipped to the image.

    Prompts are ordered by descending score. ``nms_radius`` enables greedy
    suppression of lower-scored prompts within that distance.
    """
    if not 0 < tau < 1:
        raise ConfigError(f"tau must lie in (0, 1), got {tau}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64)
    n_fg = scores.shape[1] - 1
    z = scores - scores.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    fg = probs[:, :n_fg]
    best = fg.max(axis=1) if n_fg else np.zeros(len(points))
    keep = (best >= tau) & (probs.argmax(axis=1) != n_fg)
    idx = np.nonzero(keep)[0]
    idx = idx[np.argsort(-best[idx], kind="stable")]
    if nms_radius is not None and len(idx):
        kept = []
        for i in idx:
            if all(np.hypot(*(points[i] - points[j])) > nms_radius for j in kept):
                kept.append(i)
        idx = np.asarray(kept, dtype=np.int64)
    pts = points[idx].copy()
    pts[:, 0] = np.clip(pts[:, 0], 0, width - 1)
    pts[:, 1] = np.clip(pts[:, 1], 0, height - 1)
    return PromptSet(pts, fg[idx].argmax(axis=1) if len(idx) else np.zeros(0), best[idx])


@torch.no_grad()
def predict(model: PromptModel, scene_or_image, tau: float | None = None) -> Prediction:
    cfg = model.config
    image = image_tensor(scene_or_image, cfg.torch_dtype)
    out = model(image)
    h, w = image.shape[:2]
    points = out.points.cpu().double().numpy()
    scores = out.scores.cpu().double().numpy()
    prompts = export_prompts(points, scores, cfg.tau if tau is None else tau, h, w, cfg.nms_radius)
    density = out.density.cpu().double().numpy() if out.density is not None else None
    return Prediction(points, scores, prompts, density, out.proposals.deformed.cpu().double().numpy())


def gt_prompts(scene) -> PromptSet:
    return PromptSet(scene.points, scene.classes, np.ones(scene.n))


def evaluate(scenes, prompt_source, segmenter=None, n_classes=None, radius: float = 12.0):
    """Run prompts -> segmenter -> metrics over ``scenes``.

    ``prompt_source`` is a trained model or a callable ``scene -> PromptSet``
    (for example :func:`gt_prompts`).
    """
    scenes = list(scenes)
    segmenter = segmenter or BaselineSegmenter()
    if isinstance(prompt_source, PromptModel):
        model = prompt_source
        n_classes = n_classes or model.config.n_classes
        prompt_source = lambda s: predict(model, s).prompts  # noqa: E731
    if n_classes is None:
        raise ConfigError("n_classes is required for callable prompt sources")
    results = []
    for scene in scenes:
        prompts = prompt_source(scene)
        pred_map = segmenter(scene.image, prompts)
        results.append(
            evaluate_scene(pred_map, InstanceMap.from_scene(scene), prompts.points, prompts.classes,
                           scene.points, scene.classes, n_classes, radius)
        )
    return results


# ---------------------------------------------------------------------------
# ablation grid

ABLATION_GRID = ((False, False), (True, False), (False, True), (True, True))
ABLATION_COLUMNS = ("use_dgpom", "use_cksim", "cls_p", "cls_r", "cls_f",
                    "det_p", "det_r", "det_f", "dice", "aji", "pq")


def run_ablation(train_scenes, test_scenes, config: ModelConfig, seeds=(0,), segmenter=None,
                 radius: float = 12.0, out_dir=None) -> list[dict]:
    """Train and evaluate every (+/-offsets, +/-knowledge) configuration with paired seeds.

    Returns one row per configuration holding the seed-averaged metrics; the
    per-seed rows are kept under ``"runs"``.
    """
    from .metrics import summarize
    from .segmenter import median_equivalent_radius

    train_scenes, test_scenes = list(train_scenes), list(test_scenes)
    if segmenter is None:
        segmenter = BaselineSegmenter(radius=median_equivalent_radius(train_scenes))
    rows = []
    for use_dgpom, use_cksim in ABLATION_GRID:
        runs = []
        for seed in seeds:
            cfg = replace(config, use_dgpom=use_dgpom, use_cksim=use_cksim, seed=seed)
            run_dir = None
            if out_dir is not None:
                run_dir = Path(out_dir) / f"dgpom{int(use_dgpom)}_cksim{int(use_cksim)}_seed{seed}"
            result = train(train_scenes, cfg, run_dir)
            summary = summarize(evaluate(test_scenes, result.model, segmenter, radius=radius))
            runs.append({"seed": seed, **summary})
            log.info("ablation dgpom=%s cksim=%s seed=%d: %s", use_dgpom, use_cksim, seed,
                     {k: round(summary[k], 4) for k in ABLATION_COLUMNS[2:]})
        row = {"use_dgpom": use_dgpom, "use_cksim": use_cksim}
        for key in ABLATION_COLUMNS[2:]:
            row[key] = float(np.mean([r[key] for r in runs]))
        row["runs"] = runs
        rows.append(row)
    return rows


def write_ablation_table(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ABLATION_COLUMNS)
        for row in rows:
            writer.writerow([int(row["use_dgpom"]), int(row["use_cksim"])]
                            + [f"{row[k]:.6f}" for k in ABLATION_COLUMNS[2:]])
