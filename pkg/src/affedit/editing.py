"""Affective editing strategies: global partial-noising edit, masked local
edit and generation from Gaussian noise. Also PNG I/O and the bundle of
models a run needs (:class:`Pipeline`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .checkpoint import load_into, read_header, save_checkpoint
from .diffusion import (Autoencoder, Denoiser, NoiseSchedule, build_schedule, decode_latent, denoise_step,
                        encode_image, forward_noise)
from .errors import InvalidInputError
from .mapper import EmotionalMapper, MapperConfig, SemanticEncoder, mapper_forward
from .spectrum import RequestEncoder
from .text import normalize_words

DEFAULT_T = 37


@dataclass
class Pipeline:
    """Every model an edit needs; all components are read-only at inference."""

    request_encoder: RequestEncoder
    semantic_encoder: SemanticEncoder
    mapper: EmotionalMapper
    autoencoder: Autoencoder
    denoiser: Denoiser
    schedule: NoiseSchedule

    def condition(self, texts: Sequence[str]) -> torch.Tensor:
        """Mapped semantic representation ``(B, C^s, N^l)`` for each text."""
        for text in texts:
            if not normalize_words(text):
                raise InvalidInputError("text description is empty")
        with torch.no_grad():
            req = self.request_encoder.encode(texts)
            sem = self.semantic_encoder.encode(texts)
            return mapper_forward(req, sem, self.mapper)

    def modules(self) -> dict:
        return {"request_encoder": self.request_encoder, "semantic_encoder": self.semantic_encoder,
                "mapper": self.mapper, "autoencoder": self.autoencoder, "denoiser": self.denoiser}

    def config(self) -> dict:
        return {
            "request_encoder": self.request_encoder.config(),
            "semantic_encoder": {"vocab_size": self.semantic_encoder.vocab_size,
                                 "channels": self.semantic_encoder.channels,
                                 "max_len": self.semantic_encoder.max_len},
            "mapper": self.mapper.config.to_dict(),
            "autoencoder": {"latent_channels": self.autoencoder.latent_channels,
                            "image_size": self.autoencoder.image_size,
                            "width": self.autoencoder.width},
            "denoiser": {"width": self.denoiser.width, "cond_channels": self.denoiser.cond_channels,
                         "time_dim": self.denoiser.time_dim},
            "schedule": {"T": self.schedule.T, "kind": self.schedule.kind, "eta": self.schedule.eta},
        }

    def save(self, path) -> Path:
        return save_checkpoint(path, self.modules(), self.config())

    @classmethod
    def load(cls, path, producer: str = "train-mapper") -> "Pipeline":
        cfg = read_header(path, producer)
        pipe = cls.from_config(cfg)
        load_into(path, pipe.modules(), producer)
        pipe.freeze()
        return pipe

    @classmethod
    def from_config(cls, cfg: dict) -> "Pipeline":
        ae_cfg, dn_cfg, sc = cfg["autoencoder"], cfg["denoiser"], cfg["schedule"]
        return cls(
            RequestEncoder(**cfg["request_encoder"]),
            SemanticEncoder(**cfg["semantic_encoder"]),
            EmotionalMapper(MapperConfig(**cfg["mapper"])),
            Autoencoder(latent_channels=ae_cfg["latent_channels"], width=ae_cfg["width"],
                        image_size=ae_cfg["image_size"]),
            Denoiser(latent_channels=ae_cfg["latent_channels"], width=dn_cfg["width"],
                     cond_channels=dn_cfg["cond_channels"], time_dim=dn_cfg["time_dim"]),
            build_schedule(sc["T"], sc["kind"], sc["eta"]),
        )

    def freeze(self) -> "Pipeline":
        for m in self.modules().values():
            m.eval().requires_grad_(False)
        return self


@dataclass
class EditRequest:
    image: torch.Tensor | None  # (3, H, W) in [0, 1]; None for generation
    text: str
    t: int = DEFAULT_T
    mask: torch.Tensor | None = None  # (H, W), 1 = editable
    seed: int = 0


@dataclass
class EditResult:
    image: torch.Tensor
    trace: list = field(default_factory=list)


def _check_text(text: str):
    if not normalize_words(text):
        raise InvalidInputError("text description is empty")


def latent_mask(mask: torch.Tensor, image_hw: tuple[int, int], latent_hw: tuple[int, int]) -> torch.Tensor:
    """Binary image-space mask -> binary latent-space mask (nearest neighbour)."""
    m = torch.as_tensor(mask, dtype=torch.float32)
    if m.dim() == 3 and m.shape[0] == 1:
        m = m[0]
    if m.dim() != 2 or tuple(m.shape) != tuple(image_hw):
        raise InvalidInputError(f"mask shape {tuple(m.shape)} does not match image {tuple(image_hw)}")
    if not bool(((m == 0) | (m == 1)).all()):
        raise InvalidInputError("mask must be binary (0/1)")
    small = F.interpolate(m[None, None], size=latent_hw, mode="nearest")[0, 0]
    return small > 0.5


def _record(trace, keep: bool, t: int, z: torch.Tensor, z_in: torch.Tensor | None = None):
    entry = {"t": t, "norm": float(z.norm())}
    if keep:
        entry["z"] = z.clone()
        if z_in is not None:
            entry["z_in"] = z_in.clone()
    trace.append(entry)


def edit(req: EditRequest, pipe: Pipeline, keep_latents: bool = False) -> EditResult:
    """Noise ``E(I)`` to step ``t`` and denoise back under the mapped text."""
    if req.image is None:
        raise InvalidInputError("edit needs an input image")
    if req.mask is not None:
        raise InvalidInputError("use edit_masked for masked requests")
    _check_text(req.text)
    pipe.schedule.check_step(req.t, lo=0)
    gen = torch.Generator().manual_seed(req.seed)
    z = encode_image(req.image, pipe.autoencoder).unsqueeze(0)
    eps0 = torch.randn(z.shape, generator=gen)
    cond = pipe.condition([req.text]) if req.t > 0 else None
    z_t = forward_noise(z, req.t, eps0, pipe.schedule)
    trace = []
    _record(trace, keep_latents, req.t, z_t)
    with torch.no_grad():
        for s in range(req.t, 0, -1):
            z_t = denoise_step(z_t, s, cond, pipe.denoiser, pipe.schedule, gen)
            _record(trace, keep_latents, s - 1, z_t)
    return EditResult(decode_latent(z_t[0], pipe.autoencoder), trace)


def edit_masked(req: EditRequest, pipe: Pipeline, keep_latents: bool = False) -> EditResult:
    """Masked edit: after every refinement the non-editable region is reset to
    the original latent noised to the same level (with the run's initial noise).
    """
    if req.image is None or req.mask is None:
        raise InvalidInputError("edit_masked needs an image and a mask")
    _check_text(req.text)
    pipe.schedule.check_step(req.t, lo=0)
    h, w = req.image.shape[-2:]
    m = latent_mask(req.mask, (h, w), pipe.autoencoder.latent_shape[1:])
    gen = torch.Generator().manual_seed(req.seed)
    z = encode_image(req.image, pipe.autoencoder).unsqueeze(0)
    eps0 = torch.randn(z.shape, generator=gen)
    cond = pipe.condition([req.text]) if req.t > 0 else None
    z_in = forward_noise(z, req.t, eps0, pipe.schedule)
    z_t = z_in.clone()
    trace = []
    _record(trace, keep_latents, req.t, z_t, z_in)
    with torch.no_grad():
        for s in range(req.t, 0, -1):
            refined = denoise_step(z_t, s, cond, pipe.denoiser, pipe.schedule, gen)
            z_in = forward_noise(z, s - 1, eps0, pipe.schedule)
            z_t = torch.where(m, refined, z_in)
            _record(trace, keep_latents, s - 1, z_t, z_in)
    return EditResult(decode_latent(z_t[0], pipe.autoencoder), trace)


def generate(text: str, seed: int, pipe: Pipeline, steps: int | None = None) -> EditResult:
    """Full reverse chain from ``z_T ~ N(0, I)``."""
    _check_text(text)
    steps = pipe.schedule.T if steps is None else steps
    pipe.schedule.check_step(steps)
    gen = torch.Generator().manual_seed(seed)
    z_t = torch.randn((1, *pipe.autoencoder.latent_shape), generator=gen)
    cond = pipe.condition([text])
    trace = []
    with torch.no_grad():
        for s in range(steps, 0, -1):
            z_t = denoise_step(z_t, s, cond, pipe.denoiser, pipe.schedule, gen)
            _record(trace, False, s - 1, z_t)
    return EditResult(decode_latent(z_t[0], pipe.autoencoder), trace)


def generate_batch(texts: Sequence[str], seeds: Sequence[int], pipe: Pipeline) -> torch.Tensor:
    """Batched :func:`generate`; row ``i`` matches ``generate(texts[i], seeds[i])`` up to float32 batching noise."""
    for text in texts:
        _check_text(text)
    z_t = torch.stack([torch.randn(pipe.autoencoder.latent_shape, generator=torch.Generator().manual_seed(s))
                       for s in seeds])
    cond = pipe.condition(list(texts))
    if pipe.schedule.eta > 0:
        raise InvalidInputError("generate_batch requires a deterministic schedule (eta = 0)")
    with torch.no_grad():
        for s in range(pipe.schedule.T, 0, -1):
            z_t = denoise_step(z_t, s, cond, pipe.denoiser, pipe.schedule)
    return decode_latent(z_t, pipe.autoencoder)


# ------------------------------------------------------------------------ I/O


def load_image(path, size: int | None = None) -> torch.Tensor:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BICUBIC)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def save_image(image: torch.Tensor, path) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = (image.detach().clamp(0, 1).permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")
    return path


def load_mask(path) -> torch.Tensor:
    """Single-channel PNG with values 0/255 -> ``(H, W)`` 0/1 tensor."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    if not np.isin(arr, (0, 255)).all():
        raise InvalidInputError(f"{path}: mask must contain only 0 and 255")
    return torch.from_numpy((arr == 255).astype(np.float32))


def quantize(image: torch.Tensor) -> torch.Tensor:
    """The 8-bit values :func:`save_image` would write."""
    return (image.detach().clamp(0, 1) * 255).round().to(torch.uint8)
