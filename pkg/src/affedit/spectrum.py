"""Emotional spectrum: request encoder, wheel geometry, triplet mining and
the ratio-distance triplet loss used to train the encoder.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, DivergenceError, EmptyBatchError, InvalidInputError
from .text import batch_tokenize, tokenize

log = logging.getLogger(__name__)

CATEGORIES = (
    "amusement", "awe", "contentment", "excitement",
    "anger", "disgust", "fear", "sadness",
)
NUM_CATEGORIES = len(CATEGORIES)
ALPHA = 0.2
EPS = 1e-6
POSITIVE, NEGATIVE, NEUTRAL = "positive", "negative", "neutral"
REGIONS = ("positive-valence", "negative-valence")


# --------------------------------------------------------------------------- types


class EmotionDistribution:
    """Probability vector over the eight wheel categories (``CATEGORIES`` order)."""

    __slots__ = ("probs",)

    def __init__(self, probs):
        p = np.asarray(probs, dtype=np.float64).reshape(-1)
        if p.shape != (NUM_CATEGORIES,):
            raise InvalidInputError(f"distribution must have {NUM_CATEGORIES} entries, got {p.size}")
        if not np.all(np.isfinite(p)) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
            raise InvalidInputError(f"not a probability vector: {p.tolist()}")
        self.probs = p

    @classmethod
    def one_hot(cls, category: str | int) -> "EmotionDistribution":
        p = np.zeros(NUM_CATEGORIES)
        p[category_index(category)] = 1.0
        return cls(p)

    @classmethod
    def from_logits(cls, logits) -> "EmotionDistribution":
        z = np.asarray(logits, dtype=np.float64).reshape(-1)
        z = np.exp(z - z.max())
        return cls(z / z.sum())

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.probs))  # first maximum wins ties

    @property
    def category(self) -> str:
        return CATEGORIES[self.argmax]

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.probs, dtype=dtype)

    def tolist(self) -> list[float]:
        return self.probs.tolist()

    def __eq__(self, other):
        return isinstance(other, EmotionDistribution) and np.array_equal(self.probs, other.probs)

    def __repr__(self):
        return f"EmotionDistribution({self.category}, {np.round(self.probs, 4).tolist()})"


def category_index(category: str | int) -> int:
    if isinstance(category, (int, np.integer)):
        if not 0 <= category < NUM_CATEGORIES:
            raise InvalidInputError(f"category index out of range: {category}")
        return int(category)
    try:
        return CATEGORIES.index(category.lower())
    except ValueError:
        raise InvalidInputError(f"unknown emotion category: {category!r}") from None


@dataclass(frozen=True)
class WheelGeometry:
    """Category angles on Mikel's wheel and the valence region of each."""

    angles: dict = field(default_factory=lambda: {c: 45.0 * i for i, c in enumerate(CATEGORIES)})
    regions: dict = field(default_factory=lambda: {
        c: ("positive-valence" if i < 4 else "negative-valence") for i, c in enumerate(CATEGORIES)
    })

    def __post_init__(self):
        if set(self.angles) != set(CATEGORIES) or set(self.regions) != set(CATEGORIES):
            raise ConfigurationError("wheel must define every category")
        if not set(self.regions.values()) <= set(REGIONS):
            raise ConfigurationError(f"regions must be drawn from {REGIONS}")
        for c in CATEGORIES:
            if self.opposite(self.opposite(c)) != c:
                raise ConfigurationError(f"opposite() is not an involution at {c}")

    @classmethod
    def from_config(cls, cfg: dict | None) -> "WheelGeometry":
        if not cfg:
            return cls()
        base = cls()
        return cls(angles={**base.angles, **cfg.get("angles", {})},
                   regions={**base.regions, **cfg.get("regions", {})})

    def opposite(self, category: str) -> str:
        target = (self.angles[category] + 180.0) % 360.0
        best = min(CATEGORIES, key=lambda c: _angular_gap(self.angles[c], target))
        return best

    def region_of(self, category: str) -> str:
        return self.regions[category]

    def relation_matrix(self) -> np.ndarray:
        """``rel[i, j]`` in {1: positive, -1: negative, 0: neutral} between categories."""
        rel = np.zeros((NUM_CATEGORIES, NUM_CATEGORIES), dtype=np.int8)
        for i, a in enumerate(CATEGORIES):
            for j, b in enumerate(CATEGORIES):
                if self.regions[a] == self.regions[b]:
                    rel[i, j] = 1
                elif self.opposite(a) == b:
                    rel[i, j] = -1
        return rel


def _angular_gap(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


DEFAULT_WHEEL = WheelGeometry()


@dataclass
class SpectrumSample:
    request: torch.Tensor  # (C^t, N^l)
    distribution: EmotionDistribution
    sample_id: str = ""


@dataclass
class SpectrumSource:
    """A manifest entry before encoding: text plus its image's distribution."""

    sample_id: str
    text: str
    distribution: EmotionDistribution


@dataclass
class TripletBatch:
    triplets: list  # (anchor, positive, negative) index tuples

    def __len__(self):
        return len(self.triplets)

    def indices(self) -> tuple[list[int], list[int], list[int]]:
        a, p, n = zip(*self.triplets)
        return list(a), list(p), list(n)


# ------------------------------------------------------------------ request encoder


class RequestEncoder(nn.Module):
    """Small contextual text encoder producing ``(C^t, N^l)`` request matrices.

    Each position gets its own contextual feature plus a normalized sentence
    summary (masked mean) broadcast across positions. Padding is masked out as
    attention keys and from the summary, so outputs at real token positions
    never depend on what sits in the pad.

    The output passes through a non-affine batch norm. Without it the ratio
    triplet loss drives every text onto one constant matrix; in eval mode it
    is a fixed per-channel affine map, so inference stays per-sample.
    """

    def __init__(self, vocab_size: int = 4096, channels: int = 32, max_len: int = 16,
                 layers: int = 2, heads: int = 4, seed: int = 0):
        super().__init__()
        self.vocab_size, self.channels, self.max_len = vocab_size, channels, max_len
        gen = torch.Generator().manual_seed(seed)
        self.token = nn.Embedding(vocab_size, channels)
        self.position = nn.Parameter(torch.zeros(max_len, channels))
        layer = nn.TransformerEncoderLayer(channels, heads, dim_feedforward=2 * channels,
                                           dropout=0.0, batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.out = nn.Linear(channels, channels)
        self.pool_norm = nn.LayerNorm(channels)
        self.pool_out = nn.Linear(channels, channels)
        self.out_norm = nn.BatchNorm1d(channels, affine=False)
        with torch.no_grad():
            for p in self.parameters():
                if p.dim() > 1:
                    p.copy_(torch.randn(p.shape, generator=gen) * (1.0 / math.sqrt(p.shape[-1])))
                else:
                    p.zero_()
            self.position.copy_(0.1 * torch.randn(self.position.shape, generator=gen))
            for mod in self.modules():
                if isinstance(mod, nn.LayerNorm) and mod.weight is not None:
                    mod.weight.fill_(1.0)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.token(ids) + self.position[: ids.shape[1]]
        x = self.encoder(x, src_key_padding_mask=~mask)
        m = mask.unsqueeze(-1).to(x.dtype)
        pooled = (x * m).sum(1) / m.sum(1).clamp_min(1.0)
        x = self.out(x) + self.pool_out(self.pool_norm(pooled)).unsqueeze(1)
        return self.out_norm(x.transpose(1, 2))

    def encode(self, texts: Sequence[str]) -> torch.Tensor:
        ids, mask = batch_tokenize(texts, self.max_len, self.vocab_size)
        return self(ids, mask)

    def freeze(self) -> "RequestEncoder":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def config(self) -> dict:
        return {"vocab_size": self.vocab_size, "channels": self.channels, "max_len": self.max_len,
                "layers": len(self.encoder.layers), "heads": self.encoder.layers[0].self_attn.num_heads}


def encode_request(text, encoder: RequestEncoder) -> torch.Tensor:
    """Emotional request ``(C^t, N^l)`` for one text."""
    if isinstance(text, str) and not text.strip():
        raise InvalidInputError("text is empty")
    ids, mask = tokenize(text, encoder.max_len, encoder.vocab_size)
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            return encoder(torch.tensor([ids]), torch.tensor([mask]))[0]
    finally:
        encoder.train(was_training)


# --------------------------------------------------------------- distributions


def estimate_distribution(image, classifier: Callable) -> EmotionDistribution:
    """Softmax of the classifier's 8 logits."""
    logits = classifier(image)
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().double().numpy()
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if logits.size != NUM_CATEGORIES:
        raise ConfigurationError(f"classifier returned {logits.size} scores, expected {NUM_CATEGORIES}")
    return EmotionDistribution.from_logits(logits)


def pair_relation(a: EmotionDistribution, b: EmotionDistribution, wheel: WheelGeometry = DEFAULT_WHEEL) -> str:
    ca, cb = a.category, b.category
    if wheel.region_of(ca) == wheel.region_of(cb):
        return POSITIVE
    if wheel.opposite(ca) == cb:
        return NEGATIVE
    return NEUTRAL


# ------------------------------------------------------------------- distances


def sentiment_distance(r_i, r_j, d_i, d_j, eps: float = EPS):
    """``||r_i - r_j|| / max(||d_i - d_j||, eps)``; requests are flattened first.

    Works on single samples or on matching leading batch dimensions.
    """
    r_i, r_j, d_i, d_j = (torch.as_tensor(x) for x in (r_i, r_j, d_i, d_j))
    num = torch.linalg.vector_norm((r_i - r_j).flatten(start_dim=r_i.dim() - 2 if r_i.dim() >= 2 else 0), dim=-1)
    den = torch.linalg.vector_norm(d_i - d_j, dim=-1).to(num.dtype).clamp_min(eps)
    return num / den


def sample_distance(s_i: SpectrumSample, s_j: SpectrumSample, eps: float = EPS):
    return sentiment_distance(s_i.request, s_j.request,
                              s_i.distribution.tensor(torch.float64), s_j.distribution.tensor(torch.float64), eps)


def pairwise_distances(requests: torch.Tensor, distributions: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Full ``(B, B)`` matrix of sentiment distances."""
    r = requests.flatten(1)
    num = torch.linalg.vector_norm(r[:, None, :] - r[None, :, :], dim=-1)
    d = distributions.to(num.dtype)
    den = torch.linalg.vector_norm(d[:, None, :] - d[None, :, :], dim=-1).clamp_min(eps)
    return num / den


# ---------------------------------------------------------------------- mining


def relation_table(distributions: torch.Tensor, wheel: WheelGeometry = DEFAULT_WHEEL) -> np.ndarray:
    cats = np.argmax(np.asarray(distributions, dtype=np.float64), axis=1)
    return wheel.relation_matrix()[cats[:, None], cats[None, :]]


def mine_triplets(samples: Sequence[SpectrumSample] | None = None, wheel: WheelGeometry = DEFAULT_WHEEL,
                  eps: float = EPS, *, requests: torch.Tensor | None = None,
                  distributions: torch.Tensor | None = None) -> TripletBatch:
    """Batch-hard mining: farthest positive and nearest negative per anchor.

    Pass either a list of samples or stacked ``requests``/``distributions``.
    Ties resolve to the lowest index.
    """
    if samples is not None:
        requests = torch.stack([s.request for s in samples])
        distributions = torch.stack([s.distribution.tensor(torch.float64) for s in samples])
    with torch.no_grad():
        dist = pairwise_distances(requests.detach(), distributions.detach(), eps).cpu().numpy()
    rel = relation_table(distributions.detach().cpu().numpy(), wheel)
    n = len(rel)
    out = []
    for a in range(n):
        pos = [j for j in range(n) if j != a and rel[a, j] == 1]
        neg = [j for j in range(n) if rel[a, j] == -1]
        if not pos or not neg:
            continue
        p = max(pos, key=lambda j: (dist[a, j], -j))
        q = min(neg, key=lambda j: (dist[a, j], j))
        out.append((a, p, q))
    if not out:
        raise EmptyBatchError("no anchor has both a positive and a negative in this batch")
    return TripletBatch(out)


def triplet_hinge(d_pos: torch.Tensor, d_neg: torch.Tensor, alpha: float = ALPHA) -> torch.Tensor:
    return torch.clamp(torch.as_tensor(d_pos) - torch.as_tensor(d_neg) + alpha, min=0.0).sum()


def contrastive_loss(requests: torch.Tensor, distributions: torch.Tensor, triplets: TripletBatch,
                     alpha: float = ALPHA, eps: float = EPS) -> torch.Tensor:
    """Sum over triplets of ``max(0, dis(a, p) - dis(a, n) + alpha)``."""
    if not len(triplets):
        raise EmptyBatchError("no triplets")
    a, p, n = triplets.indices()
    d = distributions.to(requests.dtype)
    d_pos = sentiment_distance(requests[a], requests[p], d[a], d[p], eps)
    d_neg = sentiment_distance(requests[a], requests[n], d[a], d[n], eps)
    return triplet_hinge(d_pos, d_neg, alpha)


# -------------------------------------------------------------------- training


@dataclass
class SpectrumTrainConfig:
    steps: int = 600
    batch_size: int = 32
    lr: float = 1e-3
    alpha: float = ALPHA
    eps: float = EPS
    seed: int = 0


def train_spectrum(sources: Sequence[SpectrumSource], config: SpectrumTrainConfig,
                   encoder: RequestEncoder | None = None, wheel: WheelGeometry = DEFAULT_WHEEL):
    """Train ``encoder`` on ``sources`` and return it frozen, with the step log."""
    if encoder is None:
        encoder = RequestEncoder(seed=config.seed)
    history: list[dict] = []
    if config.steps <= 0:
        return encoder.freeze(), history
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    tokens = [batch_tokenize([s.text], encoder.max_len, encoder.vocab_size) for s in sources]
    ids = torch.cat([t[0] for t in tokens])
    mask = torch.cat([t[1] for t in tokens])
    dists = torch.tensor(np.stack([s.distribution.probs for s in sources]), dtype=torch.float32)

    encoder.train()
    opt = torch.optim.Adam(encoder.parameters(), lr=config.lr)
    step, epoch_had_triplet = 0, False
    order, cursor = rng.permutation(len(sources)), 0
    while step < config.steps:
        if cursor >= len(order):
            if not epoch_had_triplet:
                raise EmptyBatchError("an entire epoch produced no valid triplet")
            order, cursor, epoch_had_triplet = rng.permutation(len(sources)), 0, False
        idx = torch.as_tensor(order[cursor:cursor + config.batch_size])
        cursor += config.batch_size
        requests = encoder(ids[idx], mask[idx])
        try:
            triplets = mine_triplets(requests=requests, distributions=dists[idx], wheel=wheel, eps=config.eps)
        except EmptyBatchError:
            continue
        epoch_had_triplet = True
        loss = contrastive_loss(requests, dists[idx], triplets, config.alpha, config.eps)
        if not torch.isfinite(loss):
            raise DivergenceError(f"spectrum loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({"step": step, "loss": loss.item(), "triplets": len(triplets)})
        if step % 50 == 0:
            log.info("spectrum step %d loss %.4f (%d triplets)", step, loss.item(), len(triplets))
        step += 1
    return encoder.freeze(), history


def triplet_accuracy(encoder: RequestEncoder, sources: Sequence[SpectrumSource], n_triplets: int = 2000,
                     seed: int = 0, wheel: WheelGeometry = DEFAULT_WHEEL, eps: float = EPS) -> float:
    """Fraction of random valid triplets with ``dis(a, p) < dis(a, n)``."""
    encoder.eval()
    with torch.no_grad():
        req = encoder.encode([s.text for s in sources]).double()
    dists = torch.tensor(np.stack([s.distribution.probs for s in sources]))
    rel = relation_table(dists.numpy(), wheel)
    rng = np.random.default_rng(seed)
    anchors = [a for a in range(len(sources))
               if (rel[a] == -1).any() and ((rel[a] == 1).sum() > 1)]
    if not anchors:
        raise EmptyBatchError("no anchor with both positives and negatives")
    hits = 0
    for _ in range(n_triplets):
        a = anchors[rng.integers(len(anchors))]
        pos = np.flatnonzero(rel[a] == 1)
        pos = pos[pos != a]
        p = rng.choice(pos)
        q = rng.choice(np.flatnonzero(rel[a] == -1))
        d_ap = sentiment_distance(req[a], req[p], dists[a], dists[p], eps)
        d_aq = sentiment_distance(req[a], req[q], dists[a], dists[q], eps)
        hits += bool(d_ap < d_aq)
    return hits / n_triplets


# ------------------------------------------------------------------- manifests


def load_manifest(path, classifier: Callable | None = None, image_loader: Callable | None = None) -> list[SpectrumSource]:
    """Read a JSONL manifest of ``{"id", "text", "distribution" | "image_path"}`` records."""
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if "distribution" in rec:
            dist = EmotionDistribution(rec["distribution"])
        elif "image_path" in rec:
            if classifier is None or image_loader is None:
                raise ConfigurationError(f"{path}:{lineno}: image_path needs a classifier")
            img = image_loader(path.parent / rec["image_path"])
            dist = estimate_distribution(img, classifier)
        else:
            raise InvalidInputError(f"{path}:{lineno}: record needs distribution or image_path")
        out.append(SpectrumSource(str(rec["id"]), rec["text"], dist))
    return out


def dump_pairwise_csv(path, sources: Sequence[SpectrumSource], encoder: RequestEncoder, eps: float = EPS):
    encoder.eval()
    with torch.no_grad():
        req = encoder.encode([s.text for s in sources]).double()
    dists = torch.tensor(np.stack([s.distribution.probs for s in sources]))
    mat = pairwise_distances(req, dists, eps).numpy()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id_i", "id_j", "distance"])
        for i, si in enumerate(sources):
            for j, sj in enumerate(sources):
                if i < j:
                    w.writerow([si.sample_id, sj.sample_id, f"{mat[i, j]:.8g}"])


def write_history_csv(path, history: Iterable[dict]):
    history = list(history)
    with open(path, "w", newline="") as fh:
        if not history:
            fh.write("step,loss\n")
            return
        w = csv.DictWriter(fh, fieldnames=list(history[0]))
        w.writeheader()
        w.writerows(history)
