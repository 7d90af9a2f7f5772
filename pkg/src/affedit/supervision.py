"""Supervisor (MLLM) clients, the sentiment-alignment and noise-prediction
losses, and the mapper training step with a frozen backbone.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import io
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx
import numpy as np
import torch

from .checkpoint import checksum
from .diffusion import NoiseSchedule, forward_noise_batch
from .errors import ConfigurationError, DivergenceError, InvalidStepError, SupervisionUnavailableError
from .mapper import mapper_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SupervisorPrompt:
    id: str
    text: str

    def __post_init__(self):
        if not self.id or not self.text.strip():
            raise ConfigurationError("prompt id and text must be non-empty")


DEFAULT_PROMPTS = (
    SupervisorPrompt("color_tone", "Describe the overall color tone of this image and how it makes a viewer feel."),
    SupervisorPrompt("object_category", "Which objects appear in this image, and what emotions might they evoke?"),
    SupervisorPrompt("facial_expression", "Describe any facial expressions or body language in this image."),
    SupervisorPrompt("overall_atmosphere", "In one sentence, what is the overall emotional atmosphere of this image?"),
)


@dataclass
class SupervisorResponse:
    prompt_id: str
    text: str
    flagged: bool = False


class Supervisor(Protocol):
    def ask(self, image, prompt_id: str, prompt: str) -> str: ...


def image_bytes(image) -> bytes:
    """Canonical bytes of an image: raw file bytes, or float32 CHW tensor bytes."""
    if isinstance(image, (bytes, bytearray)):
        return bytes(image)
    arr = torch.as_tensor(image, dtype=torch.float32).detach().cpu().contiguous().numpy()
    return arr.tobytes()


def image_digest(image) -> str:
    return hashlib.sha256(image_bytes(image)).hexdigest()


def cache_key(image, prompt_id: str) -> str:
    return hashlib.sha256(image_bytes(image) + prompt_id.encode()).hexdigest()


class FixtureSupervisor:
    """Offline supervisor answering from a ``{(image digest, prompt id): text}`` table."""

    def __init__(self, table: dict, default: str | None = None):
        self.table = dict(table)
        self.default = default
        self.calls = 0

    def ask(self, image, prompt_id: str, prompt: str = "") -> str:
        self.calls += 1
        key = (image_digest(image), prompt_id)
        if key in self.table:
            return self.table[key]
        if self.default is not None:
            return self.default
        raise SupervisionUnavailableError(f"no fixture response for prompt {prompt_id!r}")


class RateLimiter:
    """Minimum spacing between calls, shared across threads."""

    def __init__(self, min_interval: float = 0.0, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.min_interval = min_interval
        self._clock, self._sleep = clock, sleep
        self._next = 0.0
        self._lock = threading.Lock()

    def wait(self):
        with self._lock:
            now = self._clock()
            delay = self._next - now
            if delay > 0:
                self._sleep(delay)
                now += delay
            self._next = now + self.min_interval


def _png_data_url(image) -> str:
    from PIL import Image

    arr = torch.as_tensor(image, dtype=torch.float32).clamp(0, 1)
    arr = (arr.permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode()


class HttpSupervisor:
    """Chat-completion style HTTP client with retries and a rate limiter.

    The API key is read from the environment variable named by ``api_key_env``.
    ``transport`` lets tests inject an ``httpx.MockTransport``.
    """

    def __init__(self, endpoint: str, model: str = "default", api_key_env: str = "AFFEDIT_API_KEY",
                 timeout: float = 30.0, max_retries: int = 3, backoff: float = 0.5,
                 rate_limiter: RateLimiter | None = None, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        if max_retries < 1:
            raise ConfigurationError("max_retries must be >= 1")
        self.endpoint, self.model = endpoint, model
        self.api_key_env = api_key_env
        self.max_retries, self.backoff = max_retries, backoff
        self.rate_limiter = rate_limiter or RateLimiter()
        self._sleep = sleep
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self.calls = 0

    def _payload(self, image, prompt: str) -> dict:
        return {
            "model": self.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {"type": "image_url", "image_url": {"url": _png_data_url(image)}},
                ],
            }],
        }

    def ask(self, image, prompt_id: str, prompt: str = "") -> str:
        self.calls += 1
        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = self._payload(image, prompt or prompt_id)
        last = None
        for attempt in range(self.max_retries):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            self.rate_limiter.wait()
            try:
                resp = self._client.post(self.endpoint, json=payload, headers=headers)
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise SupervisionUnavailableError(f"supervisor rejected request: HTTP {resp.status_code}")
            try:
                return str(resp.json()["choices"][0]["message"]["content"])
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise SupervisionUnavailableError(f"malformed supervisor reply: {exc}") from exc
        raise SupervisionUnavailableError(f"supervisor unreachable after {self.max_retries} attempts ({last})")

    def close(self):
        self._client.close()


class ResponseCache:
    """Content-addressed on-disk store: ``<root>/<key[:2]>/<key>.txt``."""

    def __init__(self, root):
        self.root = Path(root)
        self.hits = 0
        self.misses = 0

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.txt"

    def get(self, key: str) -> str | None:
        p = self._path(key)
        if p.exists():
            self.hits += 1
            return p.read_text(encoding="utf-8")
        self.misses += 1
        return None

    def put(self, key: str, text: str):
        p = self._path(key)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(".tmp")
        tmp.write_text(text, encoding="utf-8")
        tmp.replace(p)


def collect_responses(image, prompts: Sequence[SupervisorPrompt], supervisor: Supervisor,
                      cache: ResponseCache | None = None) -> list[SupervisorResponse]:
    """One response per prompt, in prompt order. Empty answers are flagged, not cached."""
    if not prompts:
        raise ConfigurationError("at least one prompt is required")
    out = []
    for prompt in prompts:
        key = cache_key(image, prompt.id) if cache is not None else None
        text = cache.get(key) if cache is not None else None
        if text is None:
            text = supervisor.ask(image, prompt.id, prompt.text)
            if cache is not None and text.strip():
                cache.put(key, text)
        flagged = not text.strip()
        if flagged:
            log.warning("empty supervisor response for prompt %s", prompt.id)
        out.append(SupervisorResponse(prompt.id, text, flagged))
    return out


def collect_many(images, prompts, supervisor: Supervisor, cache: ResponseCache | None = None,
                 workers: int = 1) -> list[list[SupervisorResponse]]:
    """:func:`collect_responses` over several images, up to ``workers`` at a time."""
    if workers <= 1:
        return [collect_responses(img, prompts, supervisor, cache) for img in images]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda img: collect_responses(img, prompts, supervisor, cache), images))


def encode_responses(responses: Sequence[SupervisorResponse], semantic_encoder) -> torch.Tensor:
    """Response embeddings ``(N^r, C^s, N^l)`` from the frozen semantic encoder."""
    with torch.no_grad():
        return semantic_encoder.encode([r.text for r in responses])


# --------------------------------------------------------------------- losses


def sentiment_alignment_loss(mapped: torch.Tensor, responses: torch.Tensor, squared: bool = False) -> torch.Tensor:
    """Sum over responses of ``||mapped - response||_F``, averaged over the batch.

    ``mapped`` is ``(B, C, N)`` or ``(C, N)``; ``responses`` is ``(B, R, C, N)``
    or ``(R, C, N)``. ``squared=True`` sums squared norms instead.
    """
    if mapped.dim() == 2:
        mapped, responses = mapped.unsqueeze(0), responses.unsqueeze(0)
    diff = (mapped.unsqueeze(1) - responses).flatten(2)
    sq = diff.pow(2).sum(-1)
    per = sq if squared else sq.sqrt()
    return per.sum(1).mean()


def diffusion_loss(latent: torch.Tensor, t, noise: torch.Tensor, condition: torch.Tensor, denoiser,
                   schedule: NoiseSchedule) -> torch.Tensor:
    """Batch mean of ``||eps - eps_hat(z_t, t, condition)||_2`` (per-sample Frobenius norm)."""
    if latent.dim() == 3:
        latent, noise, condition = latent.unsqueeze(0), noise.unsqueeze(0), condition.unsqueeze(0)
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(latent.shape[0])
    if bool(((t < 1) | (t > schedule.T)).any()):
        raise InvalidStepError(f"step outside [1, {schedule.T}]: {t.tolist()}")
    z_t = forward_noise_batch(latent, t, noise, schedule)
    eps_hat = denoiser(z_t, t, condition)
    return (noise - eps_hat).flatten(1).norm(dim=1).mean()


@dataclass(frozen=True)
class LossWeights:
    beta: float = 10.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigurationError("beta must be > 0")


def total_loss(sa, dm, weights: LossWeights = LossWeights()):
    return sa + weights.beta * dm


# ------------------------------------------------------------------- training


@dataclass
class MapperBatch:
    """Self-reconstruction batch: each image paired with its own description."""

    requests: torch.Tensor  # (B, C^t, N^l), frozen spectrum encoder output
    semantics: torch.Tensor  # (B, C^s, N^l), frozen semantic encoder output
    responses: torch.Tensor  # (B, N^r, C^s, N^l), encoded supervisor answers
    latents: torch.Tensor  # (B, c, h, w), frozen autoencoder output


@dataclass
class TrainState:
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    step: int = 0
    frozen_checksum: str = ""
    history: list = field(default_factory=list)


def init_train_state(mapper, frozen: Sequence[torch.nn.Module], lr: float = 5e-5, seed: int = 0) -> TrainState:
    for module in frozen:
        module.requires_grad_(False)
    opt = torch.optim.Adam(mapper.parameters(), lr=lr)
    return TrainState(opt, torch.Generator().manual_seed(seed), 0, checksum(*frozen))


def train_step(batch: MapperBatch, mapper, denoiser, schedule: NoiseSchedule, state: TrainState,
               weights: LossWeights = LossWeights(), squared: bool = False,
               frozen: Sequence[torch.nn.Module] = ()) -> dict:
    """One Adam step on the mapper parameters only.

    Returns ``{"step", "L_sa", "L_dm", "L_total"}``. Raises
    :class:`DivergenceError` on a non-finite loss and ``RuntimeError`` if a
    frozen module's checksum moved.
    """
    if any(p.requires_grad for p in denoiser.parameters()):
        raise ConfigurationError("denoiser must be frozen during mapper training")
    mapper.train()
    b = batch.latents.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=state.generator)
    eps = torch.randn(batch.latents.shape, generator=state.generator)
    mapped = mapper_forward(batch.requests, batch.semantics, mapper)
    sa = sentiment_alignment_loss(mapped, batch.responses, squared=squared)
    dm = diffusion_loss(batch.latents, t, eps, mapped, denoiser, schedule)
    loss = total_loss(sa, dm, weights)
    if not torch.isfinite(loss):
        raise DivergenceError(f"mapper loss became {loss.item()} at step {state.step} "
                              f"(L_sa={sa.item()}, L_dm={dm.item()})")
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    mapper.eval()
    if frozen and checksum(*frozen) != state.frozen_checksum:
        raise RuntimeError("frozen backbone parameters changed during a mapper step")
    record = {"step": state.step, "L_sa": sa.item(), "L_dm": dm.item(), "L_total": loss.item()}
    state.history.append(record)
    state.step += 1
    return record


def train_mapper(batches: Callable[[torch.Generator], MapperBatch], mapper, denoiser, schedule: NoiseSchedule,
                 steps: int, frozen: Sequence[torch.nn.Module], lr: float = 5e-5, seed: int = 0,
                 weights: LossWeights = LossWeights(), squared: bool = False, log_path=None) -> TrainState:
    """Run ``steps`` mapper updates; ``batches(generator)`` draws each batch."""
    state = init_train_state(mapper, frozen, lr, seed)
    for step in range(steps):
        rec = train_step(batches(state.generator), mapper, denoiser, schedule, state, weights, squared, frozen)
        if step % 50 == 0:
            log.info("mapper step %d L_sa %.4f L_dm %.4f", step, rec["L_sa"], rec["L_dm"])
    if log_path is not None:
        write_loss_csv(log_path, state.history)
    return state


def write_loss_csv(path, history: Sequence[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "L_sa", "L_dm", "L_total"])
        w.writeheader()
        for rec in history:
            w.writerow({k: rec[k] for k in w.fieldnames})

