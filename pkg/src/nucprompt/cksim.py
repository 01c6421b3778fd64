"""Class-knowledge injection for proposal classification.

Each category has a text embedding of its morphological description. A
learnable per-class query, initialized from those embeddings, attends over the
spatial tokens of every pyramid level. The attention row of class ``i``
reshaped to ``h x w`` reweights the level's value map, giving one activated
map per class. Proposals read every class map at every level and a small head
turns the concatenation into ``C + 1`` logits (last column = background).

Embedding file format: an ASCII header line ``"C C_k\\n"`` followed by
``C * C_k`` little-endian float32 values in row-major order. A JSON sidecar
at ``<file>.json`` holds ``{"class_names": [...]}`` in row order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .backbone import FeaturePyramid
from .dgpom import bilinear_sample
from .errors import ConfigError, ConsistencyError, DatasetError, NumericError

DEFAULT_DESCRIPTIONS = (
    "small round nucleus with dense dark chromatin and a smooth regular outline",
    "elongated spindle shaped nucleus, thin and pale, aligned with surrounding fibres",
    "medium sized round nucleus with vesicular chromatin and a visible nucleolus",
    "large oval nucleus, irregular and crowded, with coarse dark staining",
    "tiny condensed fragmented nucleus with very dark homogeneous staining",
    "ovoid nucleus with fine granular chromatin and moderate staining",
)


@dataclass
class KnowledgeEmbedding:
    matrix: np.ndarray  # C x C_k, rows L2-normalized
    source: str  # "file" or "pseudo"
    class_names: list[str] | None = None

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NumericError("embedding row with zero norm")
    return m / norms


def pseudo_embedding(description: str, dim: int = 64, seed: int = 0) -> np.ndarray:
    """Deterministic stand-in for a text encoder: hash the bytes, expand, normalize."""
    digest = hashlib.sha256(seed.to_bytes(8, "little", signed=True) + description.encode("utf-8"))
    rng = np.random.default_rng(int.from_bytes(digest.digest()[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def write_embedding_file(path, matrix, class_names=None) -> None:
    matrix = np.asarray(matrix, dtype="<f4")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"{matrix.shape[0]} {matrix.shape[1]}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(matrix).tobytes())
    if class_names is not None:
        Path(f"{path}.json").write_text(json.dumps({"class_names": list(class_names)}))


def read_embedding_file(path) -> tuple[np.ndarray, list[str] | None]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read embedding file {path}: {exc}") from exc
    head, sep, body = raw.partition(b"\n")
    try:
        c, ck = (int(t) for t in head.decode("ascii").split())
    except (UnicodeDecodeError, ValueError) as exc:
        raise DatasetError(f"{path}: bad header {head[:40]!r}") from exc
    if not sep or len(body) != 4 * c * ck:
        raise DatasetError(f"{path}: expected {c}x{ck} float32 payload, got {len(body)} bytes")
    matrix = np.frombuffer(body, dtype="<f4").reshape(c, ck).astype(np.float64)
    names = None
    sidecar = Path(f"{path}.json")
    if sidecar.is_file():
        names = list(json.loads(sidecar.read_text())["class_names"])
        if len(names) != c:
            raise ConsistencyError(f"{sidecar} lists {len(names)} names for {c} rows")
    return matrix, names


def read_descriptions(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


def encode_category_knowledge(n_classes, descriptions=None, embedding_file=None,
                              dim: int = 64, seed: int = 0) -> KnowledgeEmbedding:
    """Load (file mode) or derive (pseudo mode) one normalized embedding per class."""
    if embedding_file is not None:
        matrix, names = read_embedding_file(embedding_file)
        if matrix.shape[0] != n_classes:
            raise ConsistencyError(f"embedding file has {matrix.shape[0]} rows for {n_classes} classes")
        if not np.all(np.isfinite(matrix)):
            raise NumericError(f"non-finite values in {embedding_file}")
        return KnowledgeEmbedding(_normalize_rows(matrix), "file", names)
    if descriptions is None:
        descriptions = [DEFAULT_DESCRIPTIONS[k % len(DEFAULT_DESCRIPTIONS)] + f" (class {k})"
                        for k in range(n_classes)]
    if len(descriptions) != n_classes:
        raise ConsistencyError(f"{len(descriptions)} descriptions for {n_classes} classes")
    matrix = np.stack([pseudo_embedding(d, dim, seed) for d in descriptions])
    return KnowledgeEmbedding(matrix, "pseudo")


class ClassActivation(nn.Module):
    """Query-key attention from class queries to the spatial tokens of each level.

    ``share`` ties the q/k/v projections across levels. The value projection
    maps ``C_I -> C_I`` (identity at init) so every activated map keeps the
    pyramid's channel count.
    """

    def __init__(self, knowledge: np.ndarray, channels: int, attn_dim: int = 64,
                 n_levels: int = 3, share: bool = False):
        super().__init__()
        c, ck = knowledge.shape
        self.query = nn.Parameter(torch.as_tensor(np.asarray(knowledge, np.float64)).clone())
        self.attn_dim = attn_dim
        self.share = share
        n_proj = 1 if share else n_levels
        self.w_q = nn.ModuleList(nn.Linear(ck, attn_dim, bias=False) for _ in range(n_proj))
        self.w_k = nn.ModuleList(nn.Linear(channels, attn_dim, bias=False) for _ in range(n_proj))
        self.w_v = nn.ModuleList(nn.Linear(channels, channels, bias=False) for _ in range(n_proj))
        for lin in self.w_v:
            nn.init.eye_(lin.weight)

    def attention(self, level: int, feature: torch.Tensor) -> torch.Tensor:
        """Row-stochastic ``C x (h*w)`` attention for one ``C_I x h x w`` level."""
        j = 0 if self.share else level
        tokens = feature.reshape(feature.shape[0], -1).T  # hw x C_I
        q = self.w_q[j](self.query)
        k = self.w_k[j](tokens)
        return torch.softmax(q @ k.T / math.sqrt(self.attn_dim), dim=1)

    def forward(self, pyramid: FeaturePyramid) -> list[torch.Tensor]:
        """Per level, a ``C x C_I x h x w`` stack of class-activated maps."""
        out = []
        for level, feat in enumerate(pyramid.levels):
            ci, h, w = feat.shape
            j = 0 if self.share else level
            attn = self.attention(level, feat).reshape(-1, 1, h, w) * (h * w)
            values = self.w_v[j](feat.reshape(ci, -1).T).T.reshape(1, ci, h, w)
            out.append(attn * values)
        return out


def class_activate_pyramid(module: ClassActivation, pyramid: FeaturePyramid) -> list[torch.Tensor]:
    return module(pyramid)


class KnowledgeClassifier(nn.Module):
    """Aggregate per-class, per-level samples into ``C + 1`` logits."""

    def __init__(self, n_classes, channels, n_levels=3, hidden=64):
        super().__init__()
        self.aggregate = nn.Linear(n_classes * n_levels * channels, hidden)
        self.head = nn.Sequential(nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(),
                                  nn.Linear(hidden, n_classes + 1))

    def forward(self, activated, strides, deformed):
        samples = []
        for maps, stride in zip(activated, strides):
            c, ci, h, w = maps.shape
            flat = bilinear_sample(maps.reshape(c * ci, h, w), deformed, stride)
            samples.append(flat.reshape(-1, c, ci))
        feats = torch.cat(samples, dim=2).reshape(deformed.shape[0], -1)
        return self.head(self.aggregate(feats))


class PlainClassifier(nn.Module):
    """Fallback head on the multi-level proposal features when knowledge is off."""

    def __init__(self, n_classes, channels, n_levels=3, hidden=64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(n_levels * channels, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, n_classes + 1),
        )

    def forward(self, proposal_features):
        return self.net(proposal_features)


def classify_proposals(classifier: KnowledgeClassifier, activated, pyramid: FeaturePyramid, deformed):
    return classifier(activated, pyramid.strides, deformed)


def class_weight_vector(n_classes, background_weight=0.3, dtype=torch.float32) -> torch.Tensor:
    w = torch.ones(n_classes + 1, dtype=dtype)
    w[-1] = background_weight
    return w


def classification_loss(scores: torch.Tensor, labels: torch.Tensor, class_weights: torch.Tensor) -> torch.Tensor:
    """Weighted cross-entropy summed (not averaged) over proposals.

    ``labels`` are in ``[0, C]`` with ``C`` meaning background.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_out = scores.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_out):
        raise ConfigError(f"labels must lie in [0, {n_out - 1}]")
    logp = F.log_softmax(scores, dim=1).gather(1, labels[:, None])[:, 0]
    return -(class_weights.to(scores.dtype)[labels] * logp).sum()
