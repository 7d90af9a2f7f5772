"""Text-image pair dataset construction: three-phase chain-of-thought
annotation, the keyword / emotion / retrieval validation filters, an
append-only record store and evaluation-split building.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import threading
import warnings
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from string import Template
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (ConfigurationError, InvalidInputError, SequencingError, ValidationUnavailableError)
from .spectrum import DEFAULT_WHEEL, NEGATIVE, POSITIVE, REGIONS, EmotionDistribution, WheelGeometry, category_index
from .text import normalize_words

log = logging.getLogger(__name__)

PHASES = ("cot_objects", "cot_cues", "cot_description")
CRITERIA = ("keyword", "emotion", "retrieval")
STATUSES = ("pending", "annotated", "validated", "rejected")
N_DISTRACTORS = 127
TOP_K = 10

# ----------------------------------------------------------------- records


@dataclass
class AnnotationRecord:
    id: str
    image: str
    phase1: str | None = None
    phase2: str | None = None
    phase3: str | None = None
    status: str = "pending"
    reason: str | None = None
    retries: int = 0
    error: str | None = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.status not in STATUSES:
            raise InvalidInputError(f"unknown status {self.status!r}")
        if self.phase3 is not None and (self.phase1 is None or self.phase2 is None):
            raise InvalidInputError(f"record {self.id}: phase 3 present without phases 1-2")
        if (self.status == "rejected") != (self.reason is not None):
            raise InvalidInputError(f"record {self.id}: a rejection carries exactly one criterion")
        if self.reason is not None and self.reason not in CRITERIA:
            raise InvalidInputError(f"record {self.id}: unknown criterion {self.reason!r}")

    @property
    def text(self) -> str | None:
        return self.phase3

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "AnnotationRecord":
        return cls(**obj)


class RecordStore:
    """JSONL append-log of record snapshots; the last line per id wins.

    Writing a snapshot identical to the current one is a no-op, so
    re-running a finished pipeline leaves the file untouched.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[str, AnnotationRecord] = {}
        if self.path.exists():
            with open(self.path) as fh:
                for line in fh:
                    if line.strip():
                        rec = AnnotationRecord.from_json(json.loads(line))
                        self._records[rec.id] = rec

    def __len__(self):
        return len(self._records)

    def __contains__(self, record_id):
        return record_id in self._records

    def get(self, record_id: str) -> AnnotationRecord:
        return self._records[record_id]

    def records(self) -> list[AnnotationRecord]:
        return [self._records[k] for k in sorted(self._records)]

    def put(self, record: AnnotationRecord) -> bool:
        """Append ``record`` if it differs from the stored snapshot; returns whether it wrote."""
        with self._lock:
            old = self._records.get(record.id)
            if old is not None and old.to_json() == record.to_json():
                return False
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._records[record.id] = AnnotationRecord.from_json(record.to_json())
            return True


# -------------------------------------------------------------- annotation


def load_templates(directory=None) -> dict[str, Template]:
    """Phase prompt templates; ``$objects`` and ``$cues`` are the named slots."""
    out = {}
    for phase in PHASES:
        name = f"{phase}.txt"
        if directory is None:
            text = resources.files("affedit").joinpath("templates").joinpath(name).read_text(encoding="utf-8")
        else:
            path = Path(directory) / name
            if not path.exists():
                raise ConfigurationError(f"missing prompt template {path}")
            text = path.read_text(encoding="utf-8")
        out[phase] = Template(text)
    required = {"cot_cues": {"objects"}, "cot_description": {"objects", "cues"}}
    for phase, slots in required.items():
        found = {m.group("named") or m.group("braced") for m in Template.pattern.finditer(out[phase].template)}
        if not slots <= found:
            raise ConfigurationError(f"template {phase} must use slots {sorted(slots)}")
    return out


class CoTSession:
    """Three sequential client calls, each prompt filled with earlier answers."""

    def __init__(self, image, client, templates: Mapping[str, Template]):
        self.image, self.client, self.templates = image, client, templates
        self.answers: dict[str, str] = {}

    def _ask(self, phase: str, **slots) -> str:
        prompt = self.templates[phase].substitute(**slots)
        answer = self.client.ask(self.image, phase, prompt).strip()
        if not answer:
            raise ValidationUnavailableError(f"empty answer in {phase}")
        self.answers[phase] = answer
        return answer

    def objects(self) -> str:
        return self._ask("cot_objects")

    def cues(self) -> str:
        if "cot_objects" not in self.answers:
            raise SequencingError("phase 2 requested before phase 1 completed")
        return self._ask("cot_cues", objects=self.answers["cot_objects"])

    def description(self) -> str:
        if "cot_cues" not in self.answers:
            raise SequencingError("phase 3 requested before phase 2 completed")
        return self._ask("cot_description", objects=self.answers["cot_objects"], cues=self.answers["cot_cues"])


def annotate_cot(record: AnnotationRecord, image, client, templates: Mapping[str, Template] | None = None,
                 store: RecordStore | None = None) -> AnnotationRecord:
    """Run the three phases for a pending record; failures keep it pending with a retry count."""
    if record.status != "pending":
        return record
    templates = templates or load_templates()
    session = CoTSession(image, client, templates)
    try:
        p1 = session.objects()
        p2 = session.cues()
        p3 = session.description()
    except SequencingError:
        raise
    except Exception as exc:  # noqa: BLE001 -- any client failure defers the record
        out = AnnotationRecord(record.id, record.image, retries=record.retries + 1,
                               error=f"{type(exc).__name__}: {exc}")
    else:
        out = AnnotationRecord(record.id, record.image, p1, p2, p3, "annotated", retries=record.retries)
    if store is not None:
        store.put(out)
    return out


# -------------------------------------------------------------- validation


@dataclass(frozen=True)
class ValidationResult:
    passed: bool
    reason: str | None = None
    detail: dict = field(default_factory=dict)


class PolarityLexicon:
    """Word -> positive/negative map binarized at the valence scale midpoint.

    Words scoring exactly at the midpoint are treated as neutral.
    """

    def __init__(self, valence: Mapping[str, float], scale: tuple[float, float] | None = None):
        if not valence:
            raise ConfigurationError("lexicon is empty")
        vals = np.array(list(valence.values()), dtype=np.float64)
        lo, hi = scale if scale is not None else (float(vals.min()), float(vals.max()))
        self.midpoint = (lo + hi) / 2.0
        self.polarity: dict[str, str] = {}
        for word, v in valence.items():
            key = " ".join(normalize_words(word))
            if not key or v == self.midpoint:
                continue
            self.polarity[key] = POSITIVE if v > self.midpoint else NEGATIVE

    @classmethod
    def from_tsv(cls, path, scale: tuple[float, float] | None = None) -> "PolarityLexicon":
        """Two columns, ``word<TAB>valence``; a header row is skipped if present."""
        valence = {}
        with open(path, newline="") as fh:
            for row in csv.reader(fh, delimiter="\t"):
                if len(row) < 2 or not row[0].strip():
                    continue
                try:
                    valence[row[0].strip()] = float(row[1])
                except ValueError:
                    continue
        return cls(valence, scale)

    def lookup(self, word: str) -> str | None:
        return self.polarity.get(word.lower())


def image_polarity(image, image_classifier: Callable, wheel: WheelGeometry = DEFAULT_WHEEL) -> str:
    """``"positive"`` or ``"negative"`` from the valence region of the image's top category."""
    region = wheel.region_of(_category_of(image_classifier(image)))
    return POSITIVE if region == REGIONS[0] else NEGATIVE


def validate_keyword(text: str, polarity: str, lexicon: PolarityLexicon) -> ValidationResult:
    """Pass iff some token of ``text`` carries ``polarity`` in the lexicon."""
    if polarity not in (POSITIVE, NEGATIVE):
        raise InvalidInputError(f"polarity must be {POSITIVE!r} or {NEGATIVE!r}")
    hits = [w for w in normalize_words(text) if lexicon.lookup(w) == polarity]
    if hits:
        return ValidationResult(True, detail={"matches": hits})
    return ValidationResult(False, "keyword")


def _category_of(output) -> str:
    """Category name from a classifier output: a name, an index, or 8 logits/probabilities."""
    if isinstance(output, str):
        return output
    if isinstance(output, (int, np.integer)):
        return EmotionDistribution.one_hot(int(output)).category
    arr = np.asarray(output, dtype=np.float64).reshape(-1)
    if arr.shape[0] != 8:
        raise ConfigurationError(f"classifier returned {arr.shape[0]} scores, expected 8")
    return EmotionDistribution.from_logits(arr).category


def validate_emotion_agreement(text: str, image, text_classifier: Callable, image_classifier: Callable,
                               policy: str = "category", wheel: WheelGeometry = DEFAULT_WHEEL) -> ValidationResult:
    """Pass iff both classifiers pick the same category (or region, with ``policy="region"``)."""
    try:
        ct = _category_of(text_classifier(text))
        ci = _category_of(image_classifier(image))
    except ConfigurationError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise ValidationUnavailableError(f"emotion classifier failed: {exc}") from exc
    if policy == "category":
        ok = category_index(ct) == category_index(ci)
    elif policy == "region":
        ok = wheel.region_of(ct) == wheel.region_of(ci)
    else:
        raise ConfigurationError(f"unknown agreement policy {policy!r}")
    detail = {"text_category": ct, "image_category": ci}
    return ValidationResult(True, detail=detail) if ok else ValidationResult(False, "emotion", detail)


def record_seed(record_id: str, seed: int = 0) -> int:
    digest = hashlib.sha256(f"{seed}:{record_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def sample_distractors(record_id: str, pool: Sequence[str], seed: int = 0, k: int = N_DISTRACTORS) -> list[str]:
    """``k`` distinct ids from ``pool`` (excluding ``record_id``), seeded per record."""
    candidates = sorted(set(pool) - {record_id})
    if len(candidates) < k:
        raise ConfigurationError(f"need {k} distinct distractors, corpus has {len(candidates)}")
    rng = np.random.default_rng(record_seed(record_id, seed))
    return [candidates[i] for i in sorted(rng.choice(len(candidates), size=k, replace=False))]


def retrieval_rank(scores: Mapping[str, float], paired_id: str) -> tuple[int, int]:
    """``(rank, worst_rank)`` of ``paired_id``; rank breaks ties by id order,
    worst_rank places the paired image after every tied competitor.
    """
    s = scores[paired_id]
    higher = sum(1 for k, v in scores.items() if k != paired_id and v > s)
    tied = [k for k, v in scores.items() if k != paired_id and v == s]
    rank = 1 + higher + sum(1 for k in tied if k < paired_id)
    return rank, 1 + higher + len(tied)


def validate_retrieval(text: str, paired_id: str, images: Mapping[str, object], distractor_ids: Sequence[str],
                       retriever: Callable, top_k: int = TOP_K) -> ValidationResult:
    """Rank the paired image among itself plus 127 distractors.

    Passes only if the paired image is within ``top_k`` under every tie order.
    """
    ids = [paired_id] + [d for d in distractor_ids if d != paired_id]
    if len(set(ids)) - 1 < N_DISTRACTORS:
        raise ConfigurationError(f"need {N_DISTRACTORS} distinct distractors, got {len(set(ids)) - 1}")
    try:
        raw = np.asarray(retriever(text, [images[i] for i in ids]), dtype=np.float64).reshape(-1)
    except Exception as exc:  # noqa: BLE001
        raise ValidationUnavailableError(f"retriever failed: {exc}") from exc
    if raw.shape[0] != len(ids):
        raise ConfigurationError("retriever returned the wrong number of scores")
    rank, worst = retrieval_rank(dict(zip(ids, raw.tolist())), paired_id)
    detail = {"rank": rank, "worst_rank": worst}
    return ValidationResult(True, detail=detail) if worst <= top_k else ValidationResult(False, "retrieval", detail)


@dataclass
class ValidationHandles:
    lexicon: PolarityLexicon
    text_classifier: Callable
    image_classifier: Callable
    retriever: Callable
    image_loader: Callable
    policy: str = "category"
    seed: int = 0
    wheel: WheelGeometry = DEFAULT_WHEEL


def validate_record(record: AnnotationRecord, handles: ValidationHandles, images: Mapping[str, object],
                    pool: Sequence[str]) -> AnnotationRecord:
    """Apply keyword, emotion and retrieval filters in that order; the first failure is the reason."""
    if record.status != "annotated":
        return record
    image = images[record.id]
    text = record.text
    checks = (
        lambda: validate_keyword(text, image_polarity(image, handles.image_classifier, handles.wheel),
                                 handles.lexicon),
        lambda: validate_emotion_agreement(text, image, handles.text_classifier, handles.image_classifier,
                                           handles.policy, handles.wheel),
        lambda: validate_retrieval(text, record.id, images, sample_distractors(record.id, pool, handles.seed),
                                   handles.retriever),
    )
    details = {}
    for check in checks:
        result = check()
        details.update(result.detail)
        if not result.passed:
            return _with_status(record, "rejected", result.reason, details)
    return _with_status(record, "validated", None, details)


def _with_status(record: AnnotationRecord, status: str, reason: str | None, details: dict) -> AnnotationRecord:
    obj = record.to_json()
    obj.update(status=status, reason=reason, details=json.loads(json.dumps(details)))
    return AnnotationRecord.from_json(obj)


class ImageCache(dict):
    """Lazy ``id -> image`` mapping over a loader."""

    def __init__(self, refs: Mapping[str, str], loader: Callable):
        super().__init__()
        self.refs, self.loader = refs, loader

    def __missing__(self, key):
        value = self.loader(self.refs[key])
        self[key] = value
        return value


def validate_store(store: RecordStore, handles: ValidationHandles) -> dict:
    """Validate every annotated record; returns counts per outcome.

    Records whose classifiers are unavailable stay annotated (deferred).
    """
    records = store.records()
    images = ImageCache({r.id: r.image for r in records}, handles.image_loader)
    pool = [r.id for r in records]
    counts = {"validated": 0, "rejected": 0, "deferred": 0, "unchanged": 0}
    for rec in records:
        if rec.status != "annotated":
            counts["unchanged"] += 1
            continue
        try:
            out = validate_record(rec, handles, images, pool)
        except ValidationUnavailableError as exc:
            log.warning("record %s deferred: %s", rec.id, exc)
            counts["deferred"] += 1
            continue
        store.put(out)
        counts[out.status] += 1
    return counts


def annotate_store(store: RecordStore, client, image_loader: Callable, templates=None,
                   max_retries: int = 3) -> dict:
    templates = templates or load_templates()
    counts = {"annotated": 0, "pending": 0, "unchanged": 0}
    for rec in store.records():
        if rec.status != "pending" or rec.retries >= max_retries:
            counts["unchanged"] += 1
            continue
        out = annotate_cot(rec, image_loader(rec.image), client, templates, store)
        counts[out.status] += 1
    return counts


# ---------------------------------------------------------------- eval split


@dataclass
class EvalSample:
    original: str
    target: str
    target_text: str
    target_distribution: EmotionDistribution
    distance: float

    def to_json(self) -> dict:
        return {"original": self.original, "target": self.target, "text": self.target_text,
                "target_distribution": self.target_distribution.tolist(),
                "distance": self.distance}


def nearest_neighbors(embeddings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index and Euclidean distance of each row's nearest other row (lowest index wins ties)."""
    x = np.asarray(embeddings, dtype=np.float64)
    sq = (x * x).sum(1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0)
    np.fill_diagonal(d2, np.inf)
    idx = d2.argmin(axis=1)
    return idx, np.sqrt(d2[np.arange(len(x)), idx])


def build_eval_split(records: Sequence[AnnotationRecord], embed: Callable, distribution: Callable, n: int,
                     percentile: float | None = None) -> list[EvalSample]:
    """Pair each validated record with its nearest distinct neighbour by embedding.

    ``embed(record)`` returns a feature vector and ``distribution(record)`` the
    target's :class:`EmotionDistribution`. With ``percentile``, pairs farther
    apart than that percentile of all pair distances are dropped.
    """
    pool = sorted((r for r in records if r.status == "validated"), key=lambda r: r.id)
    if len(pool) < 2:
        raise InvalidInputError("need at least two validated records")
    if n <= 0:
        warnings.warn("requested an empty evaluation split", stacklevel=2)
        return []
    emb = np.stack([np.asarray(embed(r), dtype=np.float64).reshape(-1) for r in pool])
    idx, dist = nearest_neighbors(emb)
    keep = np.ones(len(pool), dtype=bool)
    if percentile is not None:
        keep = dist <= np.percentile(dist, percentile)
    samples = [EvalSample(pool[i].id, pool[j].id, pool[j].text, distribution(pool[j]), float(dist[i]))
               for i, j in enumerate(idx) if keep[i]]
    if n > len(samples):
        warnings.warn(f"requested {n} evaluation samples, only {len(samples)} available", stacklevel=2)
    return samples[:n]


def write_split(path, samples: Iterable[EvalSample]):
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
