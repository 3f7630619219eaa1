"""Bridging codec latents and the language-model embedding space.

A slot token stands in for each encoded patch inside the token stream; at
embedding time slot rows are produced from the latent plus a scale embedding
instead of the token table. The output side maps hidden states back to latent
space and predicts the normalization stats of generated series.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .codec import Codec, Latent
from .corpus import InterleavedExample, TextSegment, TsSegment
from .errors import ShapeError, ValidationError
from .signal import NormStats, PatchSeq, normalize, patchify

# Loss-mask values describe the token as a prediction target.
MASK_IGNORE = 0
MASK_TEXT = 1
MASK_TS = 2

# Joining convention: segments are separated by one newline owned by the
# earlier segment, so a prompt-only stream is a bit-exact prefix of the full
# training stream.
SEGMENT_SEP = "\n"


def scale_features(stats: NormStats) -> torch.Tensor:
    """Compress (mu, sigma) into [sign(mu)*log1p|mu|, log sigma]."""
    mu, sigma = stats.mu, stats.sigma
    return torch.tensor(
        [math.copysign(math.log1p(abs(mu)), mu), math.log(sigma)],
        dtype=torch.float32,
    )


def scale_target(stats: NormStats) -> torch.Tensor:
    """Regression target for the scale head; same transform as the features."""
    return scale_features(stats)


def stats_from_prediction(pred: torch.Tensor) -> NormStats:
    """Invert :func:`scale_features` on a (2,)-shaped prediction."""
    if pred.shape != (2,):
        raise ShapeError(f"scale prediction must have shape (2,), got {tuple(pred.shape)}")
    slog_mu, log_sigma = float(pred[0]), float(pred[1])
    mu = math.copysign(math.expm1(abs(slog_mu)), slog_mu)
    sigma = max(math.exp(log_sigma), 1e-6)
    return NormStats(mu=mu, sigma=sigma, constant=False)


@dataclass(frozen=True)
class FusionConfig:
    """Widths for the adapter stack; ``linear_adapter`` drops the MLPs."""

    d_latent: int = 16
    d_lm: int = 96
    linear_adapter: bool = False

    def __post_init__(self):
        if self.d_latent < 1 or self.d_lm < 1:
            raise ValidationError("fusion dimensions must be positive")


class _ResidualMLP(nn.Module):
    """x + MLP2(GELU(MLP1(x))), with MLP2 zero-initialized.

    Zero init makes the block an identity at the start of training, so the
    adapters begin as plain linear maps.
    """

    def __init__(self, d: int):
        super().__init__()
        self.fc1 = nn.Linear(d, d)
        self.fc2 = nn.Linear(d, d)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class AdapterIn(nn.Module):
    """Latent -> LM embedding: linear up-projection plus a residual MLP."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.proj = nn.Linear(cfg.d_latent, cfg.d_lm, bias=False)
        self.res = None if cfg.linear_adapter else _ResidualMLP(cfg.d_lm)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.proj.in_features:
            raise ShapeError(
                f"latent width {z.shape[-1]} != d_latent {self.proj.in_features}"
            )
        u = self.proj(z)
        return u if self.res is None else self.res(u)


class AdapterOut(nn.Module):
    """LM hidden -> latent mean: residual MLP then a linear down-projection."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.res = None if cfg.linear_adapter else _ResidualMLP(cfg.d_lm)
        self.proj = nn.Linear(cfg.d_lm, cfg.d_latent)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.proj.in_features:
            raise ShapeError(
                f"hidden width {h.shape[-1]} != d_lm {self.proj.in_features}"
            )
        v = h if self.res is None else self.res(h)
        return self.proj(v)


class FusionAdapters(nn.Module):
    """All trainable fusion parts: in/out adapters, scale encoder, scale head."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        self.adapter_in = AdapterIn(cfg)
        self.adapter_out = AdapterOut(cfg)
        self.scale_encoder = nn.Sequential(
            nn.Linear(2, cfg.d_lm), nn.GELU(), nn.Linear(cfg.d_lm, cfg.d_lm)
        )
        self.scale_head = nn.Sequential(
            nn.Linear(cfg.d_lm, cfg.d_lm), nn.GELU(), nn.Linear(cfg.d_lm, 2)
        )

    def adapt_in(self, z: torch.Tensor) -> torch.Tensor:
        return self.adapter_in(z)

    def adapt_out(self, h: torch.Tensor) -> torch.Tensor:
        return self.adapter_out(h)

    def scale_embed(self, stats: NormStats) -> torch.Tensor:
        return self.scale_encoder(scale_features(stats))

    def predict_scale(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.cfg.d_lm:
            raise ShapeError(f"hidden width {h.shape[-1]} != d_lm {self.cfg.d_lm}")
        return self.scale_head(h)


# ---------------------------------------------------------------------------
# Token streams

@dataclass(frozen=True)
class StreamTsSegment:
    """One encoded series inside a token stream."""

    first_pos: int
    patch_seq: PatchSeq
    stats: NormStats
    latent: Optional[Latent] = None

    @property
    def n_slots(self) -> int:
        return self.patch_seq.n_patches


@dataclass(frozen=True)
class TokenStream:
    """Token ids with slot bookkeeping and per-target loss classes.

    ``loss_mask[j]`` classifies position j as a prediction target: 0 ignore,
    1 text, 2 slot. Slot positions hold ``ts_token_id`` and nothing else does.
    """

    token_ids: np.ndarray
    loss_mask: np.ndarray
    ts_segments: tuple[StreamTsSegment, ...]
    ts_token_id: int

    def __post_init__(self):
        ids = np.asarray(self.token_ids, dtype=np.int64)
        mask = np.asarray(self.loss_mask, dtype=np.int8)
        if ids.ndim != 1 or ids.size == 0:
            raise ValidationError("token stream must be a non-empty id vector")
        if mask.shape != ids.shape:
            raise ValidationError("loss_mask length must equal token length")
        if not np.isin(mask, (MASK_IGNORE, MASK_TEXT, MASK_TS)).all():
            raise ValidationError("loss_mask values must be in {0, 1, 2}")
        slot_positions = set()
        for seg in self.ts_segments:
            for pos in range(seg.first_pos, seg.first_pos + seg.n_slots):
                if pos in slot_positions:
                    raise ValidationError(f"slot position {pos} claimed twice")
                slot_positions.add(pos)
        from_ids = set(np.flatnonzero(ids == self.ts_token_id).tolist())
        if from_ids != slot_positions:
            raise ValidationError(
                "slot tokens and slot records disagree: "
                f"ids at {sorted(from_ids)} vs records at {sorted(slot_positions)}"
            )
        for pos in np.flatnonzero(mask == MASK_TS).tolist():
            if pos not in slot_positions:
                raise ValidationError(f"ts loss mask at non-slot position {pos}")
        for seg in self.ts_segments:
            for pos in range(seg.first_pos, seg.first_pos + seg.n_slots):
                if mask[pos] == MASK_TEXT:
                    raise ValidationError(f"text loss mask at slot position {pos}")
        ids.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "token_ids", ids)
        object.__setattr__(self, "loss_mask", mask)
        object.__setattr__(self, "ts_segments", tuple(self.ts_segments))

    def __len__(self) -> int:
        return int(self.token_ids.size)

    @property
    def ts_slots(self) -> list[tuple[int, int, int]]:
        """(position, flat patch index, segment index) per slot, in order."""
        out = []
        flat = 0
        for k, seg in enumerate(self.ts_segments):
            for i in range(seg.n_slots):
                out.append((seg.first_pos + i, flat, k))
                flat += 1
        return out

    @property
    def latents(self) -> list[Optional[Latent]]:
        return [seg.latent for seg in self.ts_segments]

    @property
    def scales(self) -> list[NormStats]:
        return [seg.stats for seg in self.ts_segments]

    def slot_positions(self) -> np.ndarray:
        return np.array([pos for pos, _, _ in self.ts_slots], dtype=np.int64)


def build_token_stream(
    ex: InterleavedExample,
    tokenizer,
    codec: Codec,
    masking: str = "all",
    include_response: bool = True,
    encode_latents: bool = True,
) -> TokenStream:
    """Turn an example into ids, slots, and loss classes.

    Text is tokenized with specials disabled so payload text can never mint a
    slot; each series is normalized, patchified, and (optionally) encoded with
    the frozen codec, one slot token per patch. ``masking="response_only"``
    marks prompt-side targets ignore; ``include_response=False`` builds the
    inference-time prompt prefix.
    """
    if masking not in ("all", "response_only"):
        raise ValidationError(f"unknown masking mode {masking!r}")
    ts_id = getattr(tokenizer, "ts_token_id", None)
    if ts_id is None:
        raise ValidationError("tokenizer does not define a slot token")
    segments = ex.segments if include_response else ex.prompt_segments()
    if not segments:
        raise ValidationError("no segments to build a stream from")

    ids: list[int] = [tokenizer.bos_token_id]
    mask: list[int] = [MASK_IGNORE]
    ts_data: list[StreamTsSegment] = []
    sep_ids = tokenizer.tokenize(SEGMENT_SEP, allow_special=False)

    for i, seg in enumerate(segments):
        trained = masking == "all" or seg.role == "response"
        if isinstance(seg, TextSegment):
            toks = tokenizer.tokenize(seg.text, allow_special=False)
            ids.extend(toks)
            mask.extend([MASK_TEXT if trained else MASK_IGNORE] * len(toks))
        elif isinstance(seg, TsSegment):
            normed, stats = normalize(seg.series)
            ps = patchify(normed, codec.cfg.p)
            latent = None
            if encode_latents:
                with torch.no_grad():
                    latent = codec.encode(ps, mode="deterministic")
            ts_data.append(
                StreamTsSegment(
                    first_pos=len(ids), patch_seq=ps, stats=stats, latent=latent
                )
            )
            ids.extend([ts_id] * ps.n_patches)
            mask.extend([MASK_TS if trained else MASK_IGNORE] * ps.n_patches)
        else:
            raise ValidationError(f"unknown segment type {type(seg)!r}")
        last = i == len(segments) - 1
        if not last or not include_response:
            # Separator owned by the segment it follows.
            ids.extend(sep_ids)
            mask.extend([MASK_TEXT if trained else MASK_IGNORE] * len(sep_ids))
    if include_response:
        ids.append(tokenizer.eos_token_id)
        mask.append(MASK_TEXT)
    return TokenStream(
        token_ids=np.array(ids, dtype=np.int64),
        loss_mask=np.array(mask, dtype=np.int8),
        ts_segments=tuple(ts_data),
        ts_token_id=ts_id,
    )


def embed_stream(
    ts: TokenStream,
    embed_table: nn.Embedding,
    adapters: FusionAdapters,
    latent_rows: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Per-position input embeddings: table rows, except adapters at slots.

    ``latent_rows`` overrides the cached latents with an in-graph (n_total,
    d_latent) tensor, which is how training backpropagates into the codec.
    """
    ids = torch.tensor(ts.token_ids, dtype=torch.long)
    base = embed_table(ids)
    slots = ts.ts_slots
    if not slots:
        return base
    if latent_rows is None:
        missing = [k for k, lat in enumerate(ts.latents) if lat is None]
        if missing:
            raise ValidationError(
                f"stream segments {missing} have no cached latents; "
                "pass latent_rows or build with encode_latents=True"
            )
        latent_rows = torch.cat([seg.latent.z for seg in ts.ts_segments], dim=0)
    n_total = sum(seg.n_slots for seg in ts.ts_segments)
    if latent_rows.shape != (n_total, adapters.cfg.d_latent):
        raise ShapeError(
            f"latent_rows must have shape ({n_total}, {adapters.cfg.d_latent}), "
            f"got {tuple(latent_rows.shape)}"
        )
    positions = torch.tensor([pos for pos, _, _ in slots], dtype=torch.long)
    feats = torch.stack(
        [scale_features(ts.ts_segments[k].stats) for _, _, k in slots]
    ).to(base.dtype)
    slot_embs = adapters.adapt_in(latent_rows.to(base.dtype)) + adapters.scale_encoder(feats)
    out = base.clone()
    out[positions] = slot_embs
    return out
