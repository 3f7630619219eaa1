"""Patch-based variational codec for time series.

Patches are lifted by a learned MLP, contextualized by a causal pre-norm
transformer, and mapped to per-patch Gaussian latents; a per-latent MLP
decodes back to patch space. The KL weight follows a sigmoid schedule so
early training prioritizes reconstruction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from .errors import DivergenceError, ShapeError, ValidationError
from .layers import TransformerBlock
from .signal import PatchSeq, Series, normalize, patchify

LOGVAR_CLAMP = 30.0


@dataclass(frozen=True)
class CodecConfig:
    """Architecture knobs for the codec."""

    p: int = 32
    d_model: int = 64
    n_layers: int = 4
    d_latent: int = 16
    beta_peak: float = 1.5
    heads: int = 4
    max_patches: int = 128
    beta_k: float = 10.0
    beta_t0: float = 0.5

    def __post_init__(self):
        if self.p < 1 or self.d_model < 1 or self.n_layers < 1 or self.d_latent < 1:
            raise ValidationError("codec dimensions must be positive")
        if self.d_model % self.heads != 0:
            raise ValidationError(
                f"d_model {self.d_model} not divisible by heads {self.heads}"
            )
        if self.beta_peak < 0:
            raise ValidationError("beta_peak must be >= 0")


@dataclass(frozen=True)
class Latent:
    """Per-patch Gaussian posterior and its (sampled or mean) draw."""

    mu: torch.Tensor
    logvar: torch.Tensor
    z: torch.Tensor

    def __post_init__(self):
        if not (self.mu.shape == self.logvar.shape == self.z.shape):
            raise ShapeError("latent fields must share one (n, d_latent) shape")
        if self.mu.ndim != 2:
            raise ShapeError("latents are 2-d: one row per patch")
        if not bool(torch.isfinite(self.logvar).all()):
            raise ValidationError("logvar must be finite")
        if bool((self.logvar.abs() > LOGVAR_CLAMP + 1e-6).any()):
            raise ValidationError(f"|logvar| must be <= {LOGVAR_CLAMP}")

    @property
    def n_patches(self) -> int:
        return int(self.mu.shape[0])


def reparameterize(
    mu: torch.Tensor,
    logvar: torch.Tensor,
    seed: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Draw z = mu + exp(logvar/2) * eta with eta ~ N(0, I).

    ``seed`` makes the draw reproducible; ``generator`` lets a caller thread
    one RNG through many calls. logvar is clamped to +-30 before exp.
    """
    if mu.shape != logvar.shape:
        raise ShapeError("mu and logvar must have the same shape")
    if seed is not None:
        generator = torch.Generator().manual_seed(seed)
    logvar = logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
    eta = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.exp(0.5 * logvar) * eta


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(q || N(0, I)) as a mean over (patch, dimension) elements."""
    if mu.shape != logvar.shape:
        raise ShapeError("mu and logvar must have the same shape")
    return 0.5 * (mu.pow(2) + logvar.exp() - logvar - 1.0).mean()


def beta_schedule(
    step: int, total_steps: int, beta_peak: float, k: float = 10.0, t0: float = 0.5
) -> float:
    """Sigmoid KL-weight ramp: near zero at step 0, saturated at the end."""
    if total_steps <= 0:
        raise ValidationError("total_steps must be positive")
    if not (0 <= step <= total_steps):
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    t = step / total_steps
    return beta_peak / (1.0 + math.exp(-k * (t - t0)))


class Codec(nn.Module):
    """Encoder-decoder over patch sequences with Gaussian latents."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.patch_embed = nn.Sequential(
            nn.Linear(cfg.p, d), nn.GELU(), nn.Linear(d, d)
        )
        self.pos_embed = nn.Embedding(cfg.max_patches, d)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, cfg.heads) for _ in range(cfg.n_layers)
        )
        self.norm = nn.LayerNorm(d)
        self.mu_head = nn.Linear(d, cfg.d_latent)
        self.logvar_head = nn.Linear(d, cfg.d_latent)
        self.decoder = nn.Sequential(
            nn.Linear(cfg.d_latent, d), nn.GELU(), nn.Linear(d, cfg.p)
        )

    def _posterior(self, patches: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Map (b, n, p) patches to per-patch (mu, logvar), causally."""
        b, n, p = patches.shape
        if p != self.cfg.p:
            raise ShapeError(f"patch length {p} != configured {self.cfg.p}")
        if n > self.cfg.max_patches:
            raise ValidationError(
                f"{n} patches exceed max_patches {self.cfg.max_patches}"
            )
        pos = torch.arange(n, device=patches.device)
        h = self.patch_embed(patches) + self.pos_embed(pos)
        for block in self.blocks:
            h = block(h)
        h = self.norm(h)
        mu = self.mu_head(h)
        logvar = self.logvar_head(h).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
        return mu, logvar

    def forward(
        self, patches: torch.Tensor, eta: Optional[torch.Tensor] = None
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Full differentiable pass: (b, n, p) -> (mu, logvar, recon).

        ``eta`` is pre-drawn reparameterization noise; None means z = mu.
        """
        mu, logvar = self._posterior(patches)
        z = mu if eta is None else mu + torch.exp(0.5 * logvar) * eta
        return mu, logvar, self.decoder(z)

    def encode(
        self,
        ps: PatchSeq,
        mode: str = "deterministic",
        seed: Optional[int] = None,
        generator: Optional[torch.Generator] = None,
    ) -> Latent:
        """Per-patch latents; latent i depends only on patches <= i."""
        if mode not in ("sample", "deterministic"):
            raise ValidationError(f"unknown encode mode {mode!r}")
        dtype = next(self.parameters()).dtype
        patches = torch.tensor(ps.patches, dtype=dtype).unsqueeze(0)
        mu, logvar = self._posterior(patches)
        mu, logvar = mu.squeeze(0), logvar.squeeze(0)
        if mode == "sample":
            z = reparameterize(mu, logvar, seed=seed, generator=generator)
        else:
            z = mu
        return Latent(mu=mu, logvar=logvar, z=z)

    def decode(self, latent: Union[Latent, torch.Tensor], pad_len: int = 0) -> PatchSeq:
        """One p-length patch per latent row."""
        z = latent.z if isinstance(latent, Latent) else latent
        if z.ndim != 2 or z.shape[1] != self.cfg.d_latent:
            raise ShapeError(
                f"latents must have shape (n, {self.cfg.d_latent}), got {tuple(z.shape)}"
            )
        patches = self.decoder(z)
        return PatchSeq(
            patches.detach().cpu().double().numpy(), p=self.cfg.p, pad_len=pad_len
        )

    def decode_tensor(self, z: torch.Tensor) -> torch.Tensor:
        """Differentiable decode: (..., d_latent) -> (..., p)."""
        if z.shape[-1] != self.cfg.d_latent:
            raise ShapeError(
                f"latents must end in d_latent={self.cfg.d_latent}, got {tuple(z.shape)}"
            )
        return self.decoder(z)


def vae_loss(
    x: PatchSeq,
    recon: Union[PatchSeq, torch.Tensor],
    mu: torch.Tensor,
    logvar: torch.Tensor,
    beta: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """total = masked recon MSE + beta * KL; padded tail points are excluded."""
    target = torch.tensor(x.patches, dtype=mu.dtype)
    recon_t = torch.tensor(recon.patches, dtype=mu.dtype) if isinstance(recon, PatchSeq) else recon
    if recon_t.shape != target.shape:
        raise ShapeError(
            f"recon shape {tuple(recon_t.shape)} != input shape {tuple(target.shape)}"
        )
    mask = torch.as_tensor(x.pad_mask())
    sq = (recon_t - target).pow(2)
    recon_mse = (sq * mask).sum() / mask.sum()
    kl = kl_divergence(mu, logvar)
    total = recon_mse + beta * kl
    return total, recon_mse, kl


@dataclass(frozen=True)
class CodecOptConfig:
    """Optimization knobs for codec pretraining."""

    steps: int = 2000
    batch_size: int = 16
    lr: float = 5e-4
    warmup_frac: float = 0.03
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if not (0.0 <= self.warmup_frac < 1.0):
            raise ValidationError("warmup_frac must be in [0, 1)")


def _prepare_batch(
    series_batch: Sequence[Series], p: int, dtype: torch.dtype
) -> tuple[torch.Tensor, torch.Tensor]:
    """Normalize, patchify, and right-pad a batch to a common patch count.

    Returns (patches (b, n, p), mask (b, n, p)) where the mask is False on
    padded patches and padded tail points.
    """
    seqs = [patchify(normalize(s)[0], p) for s in series_batch]
    n_max = max(ps.n_patches for ps in seqs)
    b = len(seqs)
    patches = torch.zeros(b, n_max, p, dtype=dtype)
    mask = torch.zeros(b, n_max, p, dtype=torch.bool)
    for i, ps in enumerate(seqs):
        n = ps.n_patches
        patches[i, :n] = torch.tensor(ps.patches, dtype=dtype)
        mask[i, :n] = torch.as_tensor(ps.pad_mask())
    return patches, mask


def pretrain_codec(
    corpus: Iterable[Series],
    cfg: CodecConfig,
    opt_cfg: CodecOptConfig,
    codec: Optional[Codec] = None,
) -> tuple[Codec, list[dict]]:
    """Train the codec on a stream of series; returns (codec, loss trace).

    The KL weight follows :func:`beta_schedule`; a non-finite loss aborts with
    a diagnostic rather than training through NaNs.
    """
    series_pool = list(corpus)
    if not series_pool:
        raise ValidationError("codec pretraining needs a non-empty corpus")
    torch.manual_seed(opt_cfg.seed)
    if codec is None:
        codec = Codec(cfg)
    codec.train()
    dtype = next(codec.parameters()).dtype
    optim = torch.optim.AdamW(
        codec.parameters(), lr=opt_cfg.lr, weight_decay=opt_cfg.weight_decay
    )
    warmup_steps = max(1, int(opt_cfg.steps * opt_cfg.warmup_frac))
    rng = np.random.default_rng(opt_cfg.seed)
    noise_gen = torch.Generator().manual_seed(opt_cfg.seed)
    trace: list[dict] = []
    for step in range(opt_cfg.steps):
        idx = rng.integers(0, len(series_pool), size=opt_cfg.batch_size)
        patches, mask = _prepare_batch([series_pool[i] for i in idx], cfg.p, dtype)
        eta = torch.randn(
            (patches.shape[0], patches.shape[1], cfg.d_latent),
            generator=noise_gen, dtype=dtype,
        )
        mu, logvar, recon = codec(patches, eta)
        beta = beta_schedule(
            step, opt_cfg.steps, cfg.beta_peak, k=cfg.beta_k, t0=cfg.beta_t0
        )
        sq = (recon - patches).pow(2)
        recon_mse = (sq * mask).sum() / mask.sum()
        kl = kl_divergence(mu, logvar)
        total = recon_mse + beta * kl
        if not torch.isfinite(total):
            raise DivergenceError(
                f"non-finite codec loss at step {step}: "
                f"recon={recon_mse.item():.4g} kl={kl.item():.4g} beta={beta:.4g}"
            )
        for group in optim.param_groups:
            scale = min(1.0, (step + 1) / warmup_steps)
            group["lr"] = opt_cfg.lr * scale
        optim.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(codec.parameters(), opt_cfg.clip_norm)
        optim.step()
        if step % opt_cfg.log_every == 0 or step == opt_cfg.steps - 1:
            trace.append(
                {
                    "step": step,
                    "total": float(total.item()),
                    "recon_mse": float(recon_mse.item()),
                    "kl": float(kl.item()),
                    "beta": float(beta),
                }
            )
    codec.eval()
    return codec, trace


def reconstruction_mse(codec: Codec, series_list: Sequence[Series]) -> float:
    """Mean masked reconstruction MSE in normalized units, deterministic mode."""
    if not series_list:
        raise ValidationError("need at least one series")
    codec.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for s in series_list:
            normed, _ = normalize(s)
            ps = patchify(normed, codec.cfg.p)
            latent = codec.encode(ps, mode="deterministic")
            recon = codec.decode_tensor(latent.z).cpu().double().numpy()
            mask = ps.pad_mask()
            total += float(((recon - ps.patches) ** 2 * mask).sum())
            count += int(mask.sum())
    return total / count
