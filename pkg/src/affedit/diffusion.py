"""Desk-scale latent diffusion backbone.

Noise schedule, closed-form forward noising, the reverse update, a toy
autoencoder (3x64x64 images <-> 4x16x16 latents) and a small conditional
U-Net denoiser with cross-attention to the semantic representation.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigurationError, DivergenceError, InvalidInputError, InvalidStepError

log = logging.getLogger(__name__)

# ------------------------------------------------------------------- schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step coefficients, indexed ``1..T``; index 0 is the clean state.

    ``alpha[0]`` and ``alpha_bar[0]`` are 1 and ``sigma[0]`` is 0 by convention.
    """

    T: int
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    kind: str = "linear-beta"
    eta: float = 0.0

    def check_step(self, t: int, lo: int = 1):
        if not lo <= int(t) <= self.T:
            raise InvalidStepError(f"step {t} outside [{lo}, {self.T}]")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "alpha", "alpha_bar", "sigma"])
            for t in range(self.T + 1):
                w.writerow([t, repr(float(self.alpha[t])), repr(float(self.alpha_bar[t])), repr(float(self.sigma[t]))])


def build_schedule(T: int = 50, kind: str = "linear-beta", eta: float = 0.0,
                   beta_start: float | None = None, beta_end: float | None = None) -> NoiseSchedule:
    """Linear-beta or cosine schedule with DDIM-style ``sigma`` scaled by ``eta``.

    The linear range defaults to ``0.1/T .. 20/T``, i.e. the classic
    1e-4..0.02 over 1000 steps rescaled to ``T`` steps.
    """
    if T < 1:
        raise ConfigurationError("T must be >= 1")
    if not 0.0 <= eta <= 1.0:
        raise ConfigurationError("eta must lie in [0, 1]")
    if kind == "linear-beta":
        lo = 0.1 / T if beta_start is None else beta_start
        hi = min(20.0 / T, 0.999) if beta_end is None else beta_end
        betas = np.linspace(lo, hi, T, dtype=np.float64) if T > 1 else np.array([lo], dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ConfigurationError(f"unknown schedule kind {kind!r}")
    alpha = np.concatenate([[1.0], 1.0 - betas])
    if not np.all((alpha[1:] > 0) & (alpha[1:] < 1)):
        raise ConfigurationError("schedule produced alpha outside (0, 1)")
    alpha_bar = np.empty(T + 1)
    alpha_bar[0] = 1.0
    for t in range(1, T + 1):
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t]
    sigma = np.zeros(T + 1)
    for t in range(1, T + 1):
        sigma[t] = eta * math.sqrt((1 - alpha_bar[t - 1]) / (1 - alpha_bar[t]) * (1 - alpha[t]))
    return NoiseSchedule(T, alpha, alpha_bar, sigma, kind, eta)


def forward_noise(z: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule,
                  cumulative: bool = True) -> torch.Tensor:
    """``sqrt(a) * z + sqrt(1 - a) * eps`` with ``a = alpha_bar[t]``.

    ``cumulative=False`` uses the per-step ``alpha[t]`` instead (the literal
    printed form; only meaningful for auditing).
    """
    schedule.check_step(t, lo=0)
    if eps.shape != z.shape:
        raise InvalidInputError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z.shape)}")
    if t == 0:
        return z.clone()
    a = float(schedule.alpha_bar[t] if cumulative else schedule.alpha[t])
    return math.sqrt(a) * z + math.sqrt(1.0 - a) * eps


def forward_noise_batch(z: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule):
    """Per-sample steps ``t`` of shape ``(B,)``; used in training."""
    ab = torch.as_tensor(schedule.alpha_bar, dtype=z.dtype)[t].view(-1, *([1] * (z.dim() - 1)))
    return ab.sqrt() * z + (1 - ab).sqrt() * eps


def denoise_step(z_t: torch.Tensor, t: int, condition, denoiser, schedule: NoiseSchedule,
                 generator: torch.Generator | None = None) -> torch.Tensor:
    """One reverse update:

    ``z_{t-1} = 1/sqrt(alpha_t) * (z_t - eps_hat * (1 - alpha_t) / sqrt(1 - alpha_bar_t)) + sigma_t * noise``
    """
    schedule.check_step(t)
    a, ab, sig = float(schedule.alpha[t]), float(schedule.alpha_bar[t]), float(schedule.sigma[t])
    eps_hat = denoiser(z_t, t, condition)
    z_prev = (1.0 / math.sqrt(a)) * (z_t - eps_hat * ((1.0 - a) / math.sqrt(1.0 - ab)))
    if sig > 0:
        noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype, device=z_t.device)
        z_prev = z_prev + sig * noise
    return z_prev


# ---------------------------------------------------------------- autoencoder


class Autoencoder(nn.Module):
    """Toy convolutional autoencoder with 4x spatial downsampling.

    Latents are multiplied by ``latent_scale`` (fitted after training so they
    have roughly unit variance). Images are float in ``[0, 1]``.
    """

    def __init__(self, image_channels: int = 3, latent_channels: int = 4, width: int = 64,
                 image_size: int = 64):
        super().__init__()
        self.image_channels, self.latent_channels, self.image_size = image_channels, latent_channels, image_size
        self.width = width
        patch = image_channels * 16
        # space-to-depth keeps every convolution at latent resolution
        self.encoder = nn.Sequential(
            nn.PixelUnshuffle(4),
            nn.Conv2d(patch, width, 3, 1, 1), nn.SiLU(),
            nn.Conv2d(width, width, 3, 1, 1), nn.SiLU(),
            nn.Conv2d(width, latent_channels, 3, 1, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, width, 3, 1, 1), nn.SiLU(),
            nn.Conv2d(width, width, 3, 1, 1), nn.SiLU(),
            nn.Conv2d(width, patch, 3, 1, 1),
            nn.PixelShuffle(4),
        )
        self.register_buffer("latent_scale", torch.tensor(1.0))

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.image_size // 4, self.image_size // 4)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return self.encoder(image * 2 - 1) * self.latent_scale

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        return (self.decoder(z / self.latent_scale) + 1) / 2

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(z).clamp(0.0, 1.0)


def _as_batch(x: torch.Tensor, expected: tuple, what: str) -> tuple[torch.Tensor, bool]:
    single = x.dim() == len(expected)
    if single:
        x = x.unsqueeze(0)
    if tuple(x.shape[1:]) != tuple(expected):
        raise InvalidInputError(f"{what} shape {tuple(x.shape[1:])} != expected {tuple(expected)}")
    return x, single


def encode_image(image: torch.Tensor, autoencoder: Autoencoder) -> torch.Tensor:
    ae = autoencoder
    x, single = _as_batch(image, (ae.image_channels, ae.image_size, ae.image_size), "image")
    if not torch.isfinite(x).all():
        raise InvalidInputError("image contains non-finite values")
    with torch.no_grad():
        z = ae.encode(x.to(ae.latent_scale.dtype))
    return z[0] if single else z


def decode_latent(z: torch.Tensor, autoencoder: Autoencoder) -> torch.Tensor:
    x, single = _as_batch(z, autoencoder.latent_shape, "latent")
    with torch.no_grad():
        img = autoencoder.decode(x)
    return img[0] if single else img


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    mse = float(((a.double() - b.double()) ** 2).mean())
    return float("inf") if mse == 0 else 10 * math.log10(1.0 / mse)


def train_autoencoder(ae: Autoencoder, images: torch.Tensor, steps: int = 600, batch_size: int = 32,
                      lr: float = 2e-3, seed: int = 0) -> list[float]:
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1))
    ae.train()
    history = []
    for step in range(steps):
        idx = torch.randint(0, len(images), (batch_size,), generator=gen)
        x = images[idx]
        loss = F.mse_loss(ae.decoder(ae.encoder(x * 2 - 1)), x * 2 - 1)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        history.append(loss.item())
        if step % 100 == 0:
            log.info("autoencoder step %d mse %.5f", step, loss.item())
    with torch.no_grad():
        z = torch.cat([ae.encoder(images[i:i + 256] * 2 - 1) for i in range(0, len(images), 256)])
        ae.latent_scale.fill_(1.0 / float(z.std()))
    ae.eval().requires_grad_(False)
    return history


# ------------------------------------------------------------------- denoiser


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _groups(ch: int) -> int:
    return math.gcd(8, ch)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, 1, 1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention2d(nn.Module):
    def __init__(self, channels: int, cond_channels: int, heads: int = 4):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.attn = nn.MultiheadAttention(channels, heads, kdim=cond_channels, vdim=cond_channels,
                                          batch_first=True)

    def forward(self, x, cond):
        # cond: (B, C^s, N^l)
        b, c, h, w = x.shape
        q = self.norm(x).flatten(2).transpose(1, 2)
        kv = cond.transpose(1, 2)
        out = self.attn(q, kv, kv, need_weights=False)[0]
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Denoiser(nn.Module):
    """Conditional two-level U-Net predicting the noise in ``z_t``."""

    def __init__(self, latent_channels: int = 4, width: int = 32, cond_channels: int = 64,
                 time_dim: int = 64, heads: int = 4):
        super().__init__()
        self.latent_channels, self.width, self.cond_channels = latent_channels, width, cond_channels
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        w = width
        self.conv_in = nn.Conv2d(latent_channels, w, 3, 1, 1)
        self.res1 = ResBlock(w, w, time_dim)
        self.attn1 = CrossAttention2d(w, cond_channels, heads)
        self.down = nn.Conv2d(w, 2 * w, 3, 2, 1)
        self.res2 = ResBlock(2 * w, 2 * w, time_dim)
        self.attn2 = CrossAttention2d(2 * w, cond_channels, heads)
        self.up = nn.Conv2d(2 * w, w, 3, 1, 1)
        self.res3 = ResBlock(2 * w, w, time_dim)
        self.attn3 = CrossAttention2d(w, cond_channels, heads)
        self.norm_out = nn.GroupNorm(_groups(w), w)
        self.conv_out = nn.Conv2d(w, latent_channels, 3, 1, 1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, z_t: torch.Tensor, t, condition: torch.Tensor) -> torch.Tensor:
        if not torch.is_tensor(t) or t.dim() == 0:
            t = torch.full((z_t.shape[0],), int(t))
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(z_t.dtype))
        h1 = self.attn1(self.res1(self.conv_in(z_t), temb), condition)
        h2 = self.attn2(self.res2(self.down(h1), temb), condition)
        u = self.up(F.interpolate(h2, scale_factor=2, mode="nearest"))
        h3 = self.attn3(self.res3(torch.cat([u, h1], dim=1), temb), condition)
        return self.conv_out(F.silu(self.norm_out(h3)))


def train_denoiser(denoiser: Denoiser, latents: torch.Tensor, conditions, schedule: NoiseSchedule,
                   steps: int = 1000, batch_size: int = 64, lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Backbone pretraining with the usual epsilon MSE.

    ``conditions(idx, generator)`` returns the ``(B, C^s, N^l)`` conditioning
    for latent indices ``idx``; it may sample among several captions.
    """
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(denoiser.parameters(), lr=lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1))
    denoiser.train()
    history = []
    for step in range(steps):
        idx = torch.randint(0, len(latents), (batch_size,), generator=gen)
        z = latents[idx]
        t = torch.randint(1, schedule.T + 1, (batch_size,), generator=gen)
        eps = torch.randn(z.shape, generator=gen)
        z_t = forward_noise_batch(z, t, eps, schedule)
        loss = F.mse_loss(denoiser(z_t, t, conditions(idx, gen)), eps)
        if not torch.isfinite(loss):
            raise DivergenceError(f"denoiser loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        history.append(loss.item())
        if step % 100 == 0:
            log.info("denoiser step %d mse %.4f", step, loss.item())
    denoiser.eval().requires_grad_(False)
    return history
