"""Quantitative metrics: Frechet distance between feature Gaussians, semantic
clarity (Sem-C) and emotion-distribution KL divergence, plus a suite runner
that writes a JSON report and a per-record CSV.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .errors import InvalidInputError
from .spectrum import EmotionDistribution, estimate_distribution

log = logging.getLogger(__name__)

PSD_FLOOR = -1e-8
KLD_EPS = 1e-8


@dataclass
class GaussianSummary:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise InvalidInputError(f"covariance shape {self.covariance.shape} does not match mean dim {d}")
        scale = max(1.0, float(np.abs(self.covariance).max()))
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-10 * scale):
            raise InvalidInputError("covariance must be symmetric")
        if np.linalg.eigvalsh(self.covariance).min() < PSD_FLOOR * scale:
            raise InvalidInputError("covariance is not positive semi-definite")

    @classmethod
    def from_features(cls, features) -> "GaussianSummary":
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise InvalidInputError("need a (n >= 2, d) feature matrix")
        cov = np.cov(x, rowvar=False)
        return cls(x.mean(axis=0), (cov + cov.T) / 2)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The trace of the product root is taken from the symmetric matrix
    ``S_a^{1/2} S_b S_a^{1/2}``, which has the same eigenvalues as ``S_a S_b``;
    negative eigenvalues from round-off are clamped to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise InvalidInputError(f"dimension mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    root_a = _sqrt_psd(a.covariance)
    inner = root_a @ b.covariance @ root_a
    lam = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_cross = float(np.sqrt(np.clip(lam, 0.0, None)).sum())
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * tr_cross)
    return max(value, 0.0)


def _check_probs(p: np.ndarray, who: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.size == 0 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
        raise InvalidInputError(f"{who} did not return a probability vector")
    return p


def sem_c(images: Sequence, object_classifier: Callable, scene_classifier: Callable) -> float:
    """Mean over images of the larger of the two classifiers' top probabilities."""
    if len(images) == 0:
        raise InvalidInputError("sem_c needs at least one image")
    scores = [per_image_clarity(img, object_classifier, scene_classifier) for img in images]
    return float(np.mean(scores))


def per_image_clarity(image, object_classifier: Callable, scene_classifier: Callable) -> float:
    po = _check_probs(object_classifier(image), "object classifier")
    ps = _check_probs(scene_classifier(image), "scene classifier")
    return float(max(po.max(), ps.max()))


def _smooth(p: np.ndarray, eps: float) -> np.ndarray:
    q = p + eps
    return q / q.sum()


def kld_score(predicted: EmotionDistribution, target: EmotionDistribution, eps: float = KLD_EPS,
              direction: str = "target||predicted") -> float:
    """KL divergence between eps-smoothed, renormalized distributions.

    ``direction`` selects ``KL(target || predicted)`` (default) or
    ``KL(predicted || target)``.
    """
    p = _smooth(np.asarray(target.probs, dtype=np.float64), eps)
    q = _smooth(np.asarray(predicted.probs, dtype=np.float64), eps)
    if direction == "predicted||target":
        p, q = q, p
    elif direction != "target||predicted":
        raise InvalidInputError(f"unknown KL direction {direction!r}")
    return max(float(np.sum(p * np.log(p / q))), 0.0)


# ---------------------------------------------------------------------- suite


class LatentFeatures:
    """Default FID features: autoencoder latents average-pooled to 4x4."""

    def __init__(self, autoencoder, pool: int = 4):
        self.autoencoder, self.pool = autoencoder, pool

    def __call__(self, images: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            z = self.autoencoder.encode(images)
            return F.adaptive_avg_pool2d(z, self.pool).flatten(1).double().numpy()


@dataclass
class EvalRecord:
    id: str
    original: object  # path or (3, H, W) tensor
    edited: object
    target: EmotionDistribution
    text: str = ""


@dataclass
class EvalHandles:
    features: Callable[[torch.Tensor], np.ndarray]
    object_classifier: Callable
    scene_classifier: Callable
    emotion_classifier: Callable
    image_loader: Callable = None
    kld_direction: str = "target||predicted"
    kld_eps: float = KLD_EPS
    config: dict = field(default_factory=dict)

    def load(self, ref) -> torch.Tensor:
        if torch.is_tensor(ref):
            return ref
        if self.image_loader is None:
            raise InvalidInputError(f"no image loader configured for {ref!r}")
        return self.image_loader(ref)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def evaluate_suite(records: Sequence[EvalRecord], handles: EvalHandles, out_dir=None) -> dict:
    """Run every metric over ``records``; a failing metric is reported under
    ``errors`` and its value set to ``None`` instead of aborting the suite.
    """
    if not records:
        raise InvalidInputError("no evaluation records")
    report = {"fid": None, "sem_c": None, "mean_kld": None, "n": len(records),
              "config_hash": config_hash(handles.config), "errors": {}}
    rows = [{"id": r.id, "text": r.text, "kld": None, "clarity": None, "predicted": None} for r in records]
    try:
        edited = torch.stack([handles.load(r.edited) for r in records])
        originals = torch.stack([handles.load(r.original) for r in records])
    except Exception as exc:  # noqa: BLE001 -- loading failures become report entries
        report["errors"]["load"] = f"{type(exc).__name__}: {exc}"
        _write(report, rows, out_dir)
        return report

    def run(name, fn):
        try:
            report[name] = fn()
        except Exception as exc:  # noqa: BLE001
            log.warning("metric %s failed: %s", name, exc)
            report["errors"][name] = f"{type(exc).__name__}: {exc}"

    def fid():
        return frechet_distance(GaussianSummary.from_features(handles.features(edited)),
                                GaussianSummary.from_features(handles.features(originals)))

    def clarity():
        for row, img in zip(rows, edited):
            row["clarity"] = per_image_clarity(img, handles.object_classifier, handles.scene_classifier)
        return float(np.mean([row["clarity"] for row in rows]))

    def kld():
        for row, rec, img in zip(rows, records, edited):
            pred = estimate_distribution(img, handles.emotion_classifier)
            row["predicted"] = pred.category
            row["kld"] = kld_score(pred, rec.target, handles.kld_eps, handles.kld_direction)
        return float(np.mean([row["kld"] for row in rows]))

    run("fid", fid)
    run("sem_c", clarity)
    run("mean_kld", kld)
    _write(report, rows, out_dir)
    return report


def _write(report: dict, rows: list, out_dir):
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    with open(out / "records.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["id", "text", "kld", "clarity", "predicted"])
        w.writeheader()
        w.writerows(rows)


def load_eval_manifest(path) -> list[EvalRecord]:
    """JSONL with ``{"id", "original", "edited", "target": [8 floats], "text"}`` per line."""
    base = Path(path).parent
    records = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            records.append(EvalRecord(str(obj["id"]), str(base / obj["original"]), str(base / obj["edited"]),
                                      EmotionDistribution(obj["target"]), obj.get("text", "")))
    return records
