"""Multi-objective loss and the three-stage training curriculum.

Stage 1 (align) fits only the adapters and scale heads against a frozen codec
and LM on simple synthetic tasks; stage 2 (pretrain) unfreezes everything on
the full mixture; stage 3 (sft) keeps everything trainable but supervises
response tokens only. Budgets are counted in consumed tokens, not steps.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import collect_rng_state, save_checkpoint
from .corpus import InterleavedExample
from .errors import DivergenceError, ValidationError
from .fusion import MASK_TEXT, MASK_TS, TokenStream, build_token_stream, embed_stream, scale_target
from .lm import ModelBundle

STAGES = ("align", "pretrain", "sft")
ALIGN_TRAINABLE = frozenset({"adapter_in", "adapter_out", "scale_encoder", "scale_head"})
ALL_PARTS = frozenset(
    {"codec", "lm", "adapter_in", "adapter_out", "scale_encoder", "scale_head"}
)
# Token budgets per stage, desk-scale stand-ins for the full-size curriculum.
DEFAULT_BUDGETS = {"align": 200_000, "pretrain": 2_000_000, "sft": 2_000_000}
# Stage-1 corpus leans on the foundational tasks: translation and summary stats.
ALIGN_PROPORTIONS = {"translate": 0.5, "stats": 0.5}


@dataclass(frozen=True)
class LossWeights:
    """Fixed objective weights; exposed as config because they matter."""

    lambda1: float = 1.0   # cross-entropy on text targets
    lambda2: float = 0.5   # MSE on next-patch predictions
    lambda3: float = 0.1   # MSE on scale predictions

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")


@dataclass(frozen=True)
class StagePlan:
    """Which parts train, on how many tokens, with which loss masking."""

    stage: str
    trainable: frozenset
    token_budget: int
    loss_mode: str

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValidationError(f"unknown stage {self.stage!r}")
        if not self.trainable or not self.trainable <= ALL_PARTS:
            raise ValidationError(f"trainable must be a nonempty subset of {sorted(ALL_PARTS)}")
        if self.token_budget <= 0:
            raise ValidationError("token_budget must be positive")
        if self.loss_mode not in ("all_tokens", "response_only"):
            raise ValidationError(f"unknown loss_mode {self.loss_mode!r}")


def stage_plan(stage: str, token_budget: Optional[int] = None) -> StagePlan:
    """Default plan for a named stage; budget optionally overridden."""
    if stage not in STAGES:
        raise ValidationError(f"unknown stage {stage!r}")
    budget = token_budget if token_budget is not None else DEFAULT_BUDGETS[stage]
    trainable = ALIGN_TRAINABLE if stage == "align" else ALL_PARTS
    loss_mode = "response_only" if stage == "sft" else "all_tokens"
    return StagePlan(stage=stage, trainable=frozenset(trainable),
                     token_budget=budget, loss_mode=loss_mode)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    lr: float = 3e-4
    warmup_frac: float = 0.03
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0  # 0 = final checkpoint only
    max_steps: int = 0         # 0 = run until the token budget is spent

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if not (0.0 <= self.warmup_frac < 1.0):
            raise ValidationError("warmup_frac must be in [0, 1)")
        if self.clip_norm <= 0:
            raise ValidationError("clip_norm must be positive")


def stage_seed(master_seed: int, stage: str) -> int:
    """Derive the per-stage RNG substream from the master seed."""
    ss = np.random.SeedSequence([master_seed, STAGES.index(stage)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2 ** 63))


def encode_stream_latents(stream: TokenStream, codec) -> Optional[torch.Tensor]:
    """In-graph deterministic latents for every slot, (n_total, d_latent).

    Gradients flow into the codec encoder when it is unfrozen; with cached
    latents they could not.
    """
    if not stream.ts_segments:
        return None
    dtype = next(codec.parameters()).dtype
    rows = []
    for seg in stream.ts_segments:
        patches = torch.tensor(seg.patch_seq.patches, dtype=dtype)
        mu, _ = codec._posterior(patches.unsqueeze(0))
        rows.append(mu[0])
    return torch.cat(rows, dim=0)


def total_loss(
    streams: Sequence[TokenStream],
    bundle: ModelBundle,
    weights: LossWeights = LossWeights(),
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Assemble (total, ce, ts_mse, scale) over a batch of streams.

    CE averages over supervised text tokens, ts_mse over supervised patch
    elements (padding excluded), scale over supervised segments. The total is
    the weighted sum of exactly those three tensors.
    """
    if not streams:
        raise ValidationError("total_loss needs at least one stream")
    dev_param = next(bundle.lm.parameters())
    zero = torch.zeros((), dtype=dev_param.dtype, device=dev_param.device)
    ce_sum, ts_sum, scale_sum = zero.clone(), zero.clone(), zero.clone()
    ce_n = ts_n = scale_n = 0

    for stream in streams:
        if stream.loss_mask[0] != 0:
            raise ValidationError("position 0 has no preceding context to train on")
        latents = encode_stream_latents(stream, bundle.codec)
        emb = embed_stream(stream, bundle.lm.embed, bundle.adapters,
                           latent_rows=latents)
        hidden, logits = bundle.lm(emb.unsqueeze(0))
        h, lg = hidden[0], logits[0]
        ids = torch.tensor(stream.token_ids, dtype=torch.long)
        mask = stream.loss_mask

        text_pos = np.nonzero(mask == MASK_TEXT)[0]
        if len(text_pos):
            pos = torch.from_numpy(text_pos)
            ce_sum = ce_sum + F.cross_entropy(lg[pos - 1], ids[pos],
                                              reduction="sum")
            ce_n += len(text_pos)

        supervised = [s for s in stream.ts_slots if mask[s[0]] == MASK_TS]
        if supervised:
            pos = torch.tensor([s[0] for s in supervised], dtype=torch.long)
            mu_hat = bundle.adapters.adapt_out(h[pos - 1])
            pred = bundle.codec.decode_tensor(mu_hat)
            targets, valid = [], []
            offsets = np.cumsum([0] + [s.n_slots for s in stream.ts_segments])
            for _, flat, k in supervised:
                seg = stream.ts_segments[k]
                local = flat - offsets[k]
                targets.append(seg.patch_seq.patches[local])
                valid.append(seg.patch_seq.pad_mask()[local])
            target = torch.tensor(np.stack(targets), dtype=pred.dtype)
            keep = torch.tensor(np.stack(valid))
            ts_sum = ts_sum + ((pred - target) ** 2 * keep).sum()
            ts_n += int(keep.sum())

        for k, seg in enumerate(stream.ts_segments):
            if mask[seg.first_pos] != MASK_TS:
                continue
            pred = bundle.adapters.predict_scale(h[seg.first_pos - 1])
            tgt = scale_target(seg.stats).to(pred.dtype)
            scale_sum = scale_sum + ((pred - tgt) ** 2).sum()
            scale_n += tgt.numel()

    if ce_n == 0 and ts_n == 0 and scale_n == 0:
        warnings.warn("batch has no supervised positions; losses are zero")
    ce = ce_sum / ce_n if ce_n else zero
    ts_mse = ts_sum / ts_n if ts_n else zero
    scale = scale_sum / scale_n if scale_n else zero
    total = weights.lambda1 * ce + weights.lambda2 * ts_mse + weights.lambda3 * scale
    return total, ce, ts_mse, scale


def optimizer_step(
    optimizer: torch.optim.Optimizer,
    params: Sequence[torch.Tensor],
    clip_norm: float,
) -> tuple[float, bool]:
    """Clip the global grad norm, then step; skip entirely on non-finite grads.

    Returns (pre-clip grad norm, skipped).
    """
    norm = torch.nn.utils.clip_grad_norm_(params, clip_norm)
    if not torch.isfinite(norm):
        optimizer.zero_grad(set_to_none=True)
        return float("inf"), True
    optimizer.step()
    return float(norm), False


def _build_streams(
    examples: Sequence[InterleavedExample],
    bundle: ModelBundle,
    loss_mode: str,
) -> list[TokenStream]:
    masking = "response_only" if loss_mode == "response_only" else "all"
    streams, dropped = [], 0
    for ex in examples:
        stream = build_token_stream(ex, bundle.tokenizer, bundle.codec,
                                    masking=masking, encode_latents=False)
        if len(stream) > bundle.lm.cfg.max_seq_len:
            dropped += 1
            continue
        streams.append(stream)
    if dropped:
        warnings.warn(f"dropped {dropped} examples longer than max_seq_len")
    if not streams:
        raise ValidationError("no usable examples after length filtering")
    return streams


def run_stage(
    plan: StagePlan,
    examples: Sequence[InterleavedExample],
    bundle: ModelBundle,
    cfg: TrainConfig = TrainConfig(),
    weights: LossWeights = LossWeights(),
    out_dir: Optional[Union[str, Path]] = None,
    extra_meta: Optional[dict] = None,
) -> tuple[ModelBundle, list[dict]]:
    """Train one curriculum stage in place; returns (bundle, metrics trace).

    Only ``plan.trainable`` parts receive gradients; everything else keeps
    bit-identical weights. A non-finite loss restores the last good weights
    and raises. When ``out_dir`` is given, metrics stream to metrics.jsonl
    and a checkpoint directory named after the stage is written.
    """
    seed = stage_seed(cfg.seed, plan.stage)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    streams = _build_streams(examples, bundle, plan.loss_mode)

    parts = bundle.parts()
    for name, module in parts.items():
        active = name in plan.trainable
        module.train(active)
        for p in module.parameters():
            p.requires_grad_(active)
    params = [p for name in sorted(plan.trainable)
              for p in parts[name].parameters()]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    avg_len = sum(len(s) for s in streams) / len(streams)
    est_steps = max(1, math.ceil(plan.token_budget / (avg_len * cfg.batch_size)))
    if cfg.max_steps:
        est_steps = min(est_steps, cfg.max_steps)
    warmup = max(1, int(round(est_steps * cfg.warmup_frac)))

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_path / f"{plan.stage}-metrics.jsonl", "w")

    last_good = {name: {k: v.detach().clone() for k, v in m.state_dict().items()}
                 for name, m in parts.items()}
    trace: list[dict] = []
    step = tokens = skipped = 0
    order: list[int] = []
    last_row: Optional[dict] = None

    def log(row: dict) -> None:
        trace.append(row)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")
            metrics_fh.flush()

    try:
        while tokens < plan.token_budget:
            if cfg.max_steps and step >= cfg.max_steps:
                break
            while len(order) < cfg.batch_size:
                order.extend(rng.permutation(len(streams)).tolist())
            batch = [streams[i] for i in order[: cfg.batch_size]]
            del order[: cfg.batch_size]

            lr = cfg.lr * min(1.0, (step + 1) / warmup)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
            total, ce, ts_mse, scale = total_loss(batch, bundle, weights)
            if not torch.isfinite(total):
                for name, m in parts.items():
                    m.load_state_dict(last_good[name])
                raise DivergenceError(
                    f"non-finite loss at step {step} of stage {plan.stage}; "
                    f"weights restored to the last good state"
                )
            total.backward()
            grad_norm, skip = optimizer_step(opt, params, cfg.clip_norm)
            skipped += int(skip)
            tokens += sum(len(s) for s in batch)
            step += 1

            last_row = {
                "stage": plan.stage, "step": step, "tokens": tokens,
                "total": float(total.detach()), "ce": float(ce.detach()),
                "ts_mse": float(ts_mse.detach()), "scale": float(scale.detach()),
                "lr": lr, "grad_norm": grad_norm, "skipped": skipped,
            }
            if step % cfg.log_every == 0 or tokens >= plan.token_budget:
                log(last_row)
            if (out_path is not None and cfg.checkpoint_every
                    and step % cfg.checkpoint_every == 0):
                _checkpoint(out_path, bundle, plan, cfg, seed, step, tokens,
                            rng, extra_meta)
                last_good = {
                    name: {k: v.detach().clone() for k, v in m.state_dict().items()}
                    for name, m in parts.items()
                }
    finally:
        if metrics_fh is not None:
            if last_row is not None and (not trace or trace[-1] is not last_row):
                trace.append(last_row)
                metrics_fh.write(json.dumps(last_row, sort_keys=True) + "\n")
            metrics_fh.close()
        elif last_row is not None and (not trace or trace[-1] is not last_row):
            trace.append(last_row)
        for module in parts.values():
            module.eval()
            for p in module.parameters():
                p.requires_grad_(True)

    if out_path is not None:
        _checkpoint(out_path, bundle, plan, cfg, seed, step, tokens, rng,
                    extra_meta)
    return bundle, trace


def _checkpoint(out_path: Path, bundle: ModelBundle, plan: StagePlan,
                cfg: TrainConfig, seed: int, step: int, tokens: int,
                rng: np.random.Generator,
                extra_meta: Optional[dict] = None) -> None:
    save_checkpoint(
        out_path / plan.stage,
        bundle,
        metadata={
            **(extra_meta or {}),
            "stage": plan.stage,
            "step": step,
            "tokens": tokens,
            "master_seed": cfg.seed,
            "stage_seed": seed,
            "token_budget": plan.token_budget,
            "loss_mode": plan.loss_mode,
            "trainable": sorted(plan.trainable),
        },
        rng_state=collect_rng_state(rng),
    )
