import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

from timefuse.codec import Codec, CodecConfig
from timefuse.corpus import (
    CorpusParams,
    InterleavedExample,
    TextSegment,
    TsSegment,
    build_corpus,
    make_classification_example,
)
from timefuse.errors import DivergenceError, ValidationError
from timefuse.fusion import (
    MASK_IGNORE,
    MASK_TEXT,
    MASK_TS,
    FusionAdapters,
    FusionConfig,
    build_token_stream,
    embed_stream,
    scale_target,
)
from timefuse.lm import LM, ByteTokenizer, LMConfig, ModelBundle
from timefuse.signal import Series
from timefuse.training import (
    ALIGN_TRAINABLE,
    ALL_PARTS,
    LossWeights,
    StagePlan,
    TrainConfig,
    encode_stream_latents,
    optimizer_step,
    run_stage,
    stage_plan,
    stage_seed,
    total_loss,
)

CODEC_CFG = CodecConfig(p=4, d_model=8, n_layers=1, d_latent=4, heads=2, max_patches=32)
FUSE_CFG = FusionConfig(d_latent=4, d_lm=16)


def micro_bundle(seed: int = 0, max_seq_len: int = 320) -> ModelBundle:
    torch.manual_seed(seed)
    tok = ByteTokenizer()
    return ModelBundle(
        tokenizer=tok,
        codec=Codec(CODEC_CFG),
        adapters=FusionAdapters(FUSE_CFG),
        lm=LM(LMConfig(d_lm=16, n_layers=2, heads=2,
                       vocab_size=tok.vocab_size, max_seq_len=max_seq_len)),
    )


def mixed_example(n_points: int = 6, seed: int = 0) -> InterleavedExample:
    rng = np.random.default_rng(seed)
    return InterleavedExample(
        (
            TextSegment("Continue:"),
            TsSegment(Series(rng.normal(size=n_points) + 2.0)),
            TsSegment(Series(rng.normal(size=n_points // 2)), role="response"),
        ),
        "forecast",
    )


def state_bytes(module: nn.Module) -> bytes:
    return b"".join(
        v.detach().cpu().contiguous().numpy().tobytes()
        for _, v in sorted(module.state_dict().items())
    )


def tiny_corpus(n: int = 30, seed: int = 1):
    params = CorpusParams(min_length=8, max_length=24, horizon=4,
                          translate_max_points=4,
                          proportions={"translate": 0.5, "stats": 0.5})
    return build_corpus(n, seed=seed, params=params)


# ---------------------------------------------------------------------------
# Configs and plans

def test_loss_weight_defaults_and_validation():
    w = LossWeights()
    assert (w.lambda1, w.lambda2, w.lambda3) == (1.0, 0.5, 0.1)
    with pytest.raises(ValidationError):
        LossWeights(lambda2=-0.1)


def test_stage_plans_encode_the_curriculum():
    align = stage_plan("align")
    assert align.trainable == ALIGN_TRAINABLE
    assert "codec" not in align.trainable and "lm" not in align.trainable
    assert align.loss_mode == "all_tokens"
    pretrain = stage_plan("pretrain")
    assert pretrain.trainable == ALL_PARTS
    sft = stage_plan("sft")
    assert sft.trainable == ALL_PARTS
    assert sft.loss_mode == "response_only"
    assert stage_plan("align", token_budget=123).token_budget == 123


def test_stage_plan_validation():
    with pytest.raises(ValidationError):
        stage_plan("warmup")
    with pytest.raises(ValidationError):
        StagePlan("align", frozenset(), 100, "all_tokens")
    with pytest.raises(ValidationError):
        StagePlan("align", frozenset({"magic"}), 100, "all_tokens")
    with pytest.raises(ValidationError):
        StagePlan("align", ALIGN_TRAINABLE, 0, "all_tokens")
    with pytest.raises(ValidationError):
        StagePlan("align", ALIGN_TRAINABLE, 100, "prompts_only")


def test_stage_seeds_are_deterministic_and_distinct():
    seeds = {name: stage_seed(7, name) for name in ("align", "pretrain", "sft")}
    assert seeds == {name: stage_seed(7, name) for name in seeds}
    assert len(set(seeds.values())) == 3
    assert all(0 <= s < 2 ** 63 for s in seeds.values())
    assert stage_seed(8, "align") != seeds["align"]


# ---------------------------------------------------------------------------
# total_loss

def test_text_only_batch_reduces_to_lm_cross_entropy():
    bundle = micro_bundle()
    ex = InterleavedExample(
        (TextSegment("2+2="), TextSegment("4", role="response")), "raw"
    )
    stream = build_token_stream(ex, bundle.tokenizer, bundle.codec)
    total, ce, ts_mse, scale = total_loss(
        [stream], bundle, LossWeights(lambda2=0.0, lambda3=0.0)
    )
    emb = embed_stream(stream, bundle.lm.embed, bundle.adapters)
    _, logits = bundle.lm(emb.unsqueeze(0))
    pos = torch.from_numpy(np.nonzero(stream.loss_mask == MASK_TEXT)[0])
    ids = torch.tensor(stream.token_ids, dtype=torch.long)
    expected = F.cross_entropy(logits[0][pos - 1], ids[pos], reduction="sum") / len(pos)
    assert torch.equal(ce, expected)
    assert torch.equal(total, expected)
    assert float(ts_mse) == 0.0 and float(scale) == 0.0


def test_unsupervised_batch_is_zero_with_warning():
    bundle = micro_bundle()
    stream = build_token_stream(
        mixed_example(), bundle.tokenizer, bundle.codec,
        masking="response_only", include_response=False,
    )
    assert (stream.loss_mask == MASK_IGNORE).all()
    with pytest.warns(UserWarning, match="no supervised positions"):
        total, ce, ts_mse, scale = total_loss([stream], bundle)
    assert float(total) == 0.0


def test_total_is_exactly_the_weighted_component_sum():
    bundle = micro_bundle(seed=2)
    streams = [
        build_token_stream(mixed_example(seed=s), bundle.tokenizer, bundle.codec)
        for s in range(3)
    ]
    w = LossWeights(lambda1=1.0, lambda2=0.5, lambda3=0.1)
    total, ce, ts_mse, scale = total_loss(streams, bundle, w)
    recomposed = w.lambda1 * ce + w.lambda2 * ts_mse + w.lambda3 * scale
    assert torch.equal(total, recomposed)
    assert all(float(t.detach()) > 0 for t in (ce, ts_mse, scale))


def test_ts_loss_is_next_patch_mse_excluding_padding():
    bundle = micro_bundle(seed=3)
    # 6 points with p=4: two patches, second padded by 2.
    stream = build_token_stream(
        mixed_example(n_points=6), bundle.tokenizer, bundle.codec
    )
    _, _, ts_mse, _ = total_loss([stream], bundle)

    latents = encode_stream_latents(stream, bundle.codec)
    emb = embed_stream(stream, bundle.lm.embed, bundle.adapters,
                       latent_rows=latents)
    hidden, _ = bundle.lm(emb.unsqueeze(0))
    h = hidden[0]
    num = torch.zeros(())
    count = 0
    offsets = np.cumsum([0] + [s.n_slots for s in stream.ts_segments])
    for pos, flat, k in stream.ts_slots:
        seg = stream.ts_segments[k]
        local = flat - offsets[k]
        pred = bundle.codec.decode_tensor(bundle.adapters.adapt_out(h[pos - 1]))
        target = torch.tensor(seg.patch_seq.patches[local], dtype=pred.dtype)
        valid = torch.tensor(seg.patch_seq.pad_mask()[local])
        num = num + ((pred - target) ** 2 * valid).sum()
        count += int(valid.sum())
    # Prompt: 6 valid of 8 patch elements; response (3 points): 3 valid of 4.
    assert count == 9
    assert torch.allclose(ts_mse, num / count, atol=1e-6)


def test_scale_loss_supervises_first_slot_of_each_segment():
    bundle = micro_bundle(seed=4)
    stream = build_token_stream(
        mixed_example(seed=5), bundle.tokenizer, bundle.codec
    )
    _, _, _, scale = total_loss([stream], bundle)
    latents = encode_stream_latents(stream, bundle.codec)
    emb = embed_stream(stream, bundle.lm.embed, bundle.adapters,
                       latent_rows=latents)
    hidden, _ = bundle.lm(emb.unsqueeze(0))
    num = torch.zeros(())
    count = 0
    for seg in stream.ts_segments:
        pred = bundle.adapters.predict_scale(hidden[0][seg.first_pos - 1])
        tgt = scale_target(seg.stats).to(pred.dtype)
        num = num + ((pred - tgt) ** 2).sum()
        count += 2
    assert torch.allclose(scale, num / count, atol=1e-6)


def test_response_only_gradients_skip_prompt_positions():
    bundle = micro_bundle(seed=6)
    ex = make_classification_example(
        Series(np.sin(np.arange(12.0)) + 2.0), "sine", ("sine", "square"),
        rng=np.random.default_rng(0),
    )
    stream = build_token_stream(
        ex, bundle.tokenizer, bundle.codec, masking="response_only"
    )
    mask = stream.loss_mask
    supervised = np.nonzero(mask != MASK_IGNORE)[0]
    assert len(supervised) > 0
    # Recreate the CE exactly as assembled, keeping logits in the graph.
    latents = encode_stream_latents(stream, bundle.codec)
    emb = embed_stream(stream, bundle.lm.embed, bundle.adapters,
                       latent_rows=latents)
    _, logits = bundle.lm(emb.unsqueeze(0))
    logits.retain_grad()
    pos = torch.from_numpy(np.nonzero(mask == MASK_TEXT)[0])
    ids = torch.tensor(stream.token_ids, dtype=torch.long)
    ce = F.cross_entropy(logits[0][pos - 1], ids[pos], reduction="sum")
    ce.backward()
    grad = logits.grad[0]
    contributing = set((pos - 1).tolist())
    for row in range(grad.shape[0]):
        if row in contributing:
            assert float(grad[row].abs().sum()) > 0
        else:
            assert torch.equal(grad[row], torch.zeros_like(grad[row]))


def test_empty_batch_is_rejected():
    with pytest.raises(ValidationError):
        total_loss([], micro_bundle())


def test_joint_gradients_match_finite_differences():
    torch.manual_seed(0)
    bundle = micro_bundle()
    for m in (bundle.codec, bundle.adapters, bundle.lm):
        m.double()
    stream = build_token_stream(
        mixed_example(n_points=5), bundle.tokenizer, bundle.codec
    )

    class Joint(nn.Module):
        def __init__(self):
            super().__init__()
            self.codec = bundle.codec
            self.adapters = bundle.adapters
            self.lm = bundle.lm

        def forward(self):
            return total_loss([stream], bundle)[0]

    joint = Joint()
    names = [n for n, _ in joint.named_parameters()]
    params = tuple(
        p.detach().clone().requires_grad_(True) for _, p in joint.named_parameters()
    )

    def loss_of(*flat):
        return torch.func.functional_call(joint, dict(zip(names, flat)), ())

    # fast_mode checks a random Jacobian projection, which keeps the joint
    # codec+adapters+LM chain tractable; per-module tests do the dense check.
    assert torch.autograd.gradcheck(
        loss_of, params, eps=1e-6, atol=1e-7, rtol=1e-4, fast_mode=True
    )


# ---------------------------------------------------------------------------
# optimizer_step

def test_gradient_norm_is_clipped_before_the_update():
    x = nn.Parameter(torch.zeros(4))
    opt = torch.optim.SGD([x], lr=1.0)
    x.grad = torch.full((4,), 5.0)  # norm 10
    norm, skipped = optimizer_step(opt, [x], 1.0)
    assert not skipped
    assert norm == pytest.approx(10.0, rel=1e-6)
    # SGD with lr 1 applies exactly the (clipped) gradient.
    assert float(x.detach().norm()) == pytest.approx(1.0, rel=1e-5)


def test_zero_gradients_leave_params_unchanged_without_decay():
    x = nn.Parameter(torch.tensor([2.0, -3.0]))
    opt = torch.optim.AdamW([x], lr=0.1, weight_decay=0.0)
    x.grad = torch.zeros(2)
    before = x.detach().clone()
    optimizer_step(opt, [x], 1.0)
    assert torch.equal(x.detach(), before)


def test_weight_decay_shrinks_params_even_at_zero_gradient():
    x = nn.Parameter(torch.tensor([2.0]))
    opt = torch.optim.AdamW([x], lr=0.1, weight_decay=0.5)
    x.grad = torch.zeros(1)
    optimizer_step(opt, [x], 1.0)
    assert float(x.detach()) == pytest.approx(2.0 * (1 - 0.1 * 0.5))


def test_nonfinite_gradients_skip_the_step():
    x = nn.Parameter(torch.tensor([1.0]))
    opt = torch.optim.AdamW([x], lr=0.1)
    x.grad = torch.tensor([float("nan")])
    norm, skipped = optimizer_step(opt, [x], 1.0)
    assert skipped and norm == float("inf")
    assert float(x.detach()) == 1.0
    assert x.grad is None


def test_quadratic_converges_to_the_minimum():
    x = nn.Parameter(torch.tensor(3.0))
    opt = torch.optim.AdamW([x], lr=0.05, weight_decay=0.0)
    for _ in range(500):
        opt.zero_grad()
        ((x - 1.0) ** 2).backward()
        optimizer_step(opt, [x], 1.0)
    assert abs(float(x.detach()) - 1.0) < 1e-4


# ---------------------------------------------------------------------------
# run_stage

def test_align_stage_freezes_codec_and_lm():
    bundle = micro_bundle(seed=8)
    codec_before = state_bytes(bundle.codec)
    lm_before = state_bytes(bundle.lm)
    adapters_before = state_bytes(bundle.adapters)
    plan = stage_plan("align", token_budget=4_000)
    bundle, trace = run_stage(plan, tiny_corpus(), bundle,
                              TrainConfig(batch_size=2, lr=1e-3, log_every=5))
    assert state_bytes(bundle.codec) == codec_before
    assert state_bytes(bundle.lm) == lm_before
    assert state_bytes(bundle.adapters) != adapters_before
    assert trace and trace[-1]["tokens"] >= 4_000
    # Everything is inference-ready afterwards.
    for part in bundle.parts().values():
        assert not part.training
        assert all(p.requires_grad for p in part.parameters())


def test_pretrain_stage_updates_all_parts_and_improves():
    bundle = micro_bundle(seed=9)
    before = {name: state_bytes(m) for name, m in bundle.parts().items()}
    plan = stage_plan("pretrain", token_budget=60_000)
    bundle, trace = run_stage(plan, tiny_corpus(40, seed=2), bundle,
                              TrainConfig(batch_size=4, lr=1e-3, log_every=10))
    for name, m in bundle.parts().items():
        assert state_bytes(m) != before[name], name
    assert trace[-1]["total"] < 0.7 * trace[0]["total"]


def test_run_stage_writes_metrics_and_checkpoint(tmp_path):
    from timefuse.checkpoint import load_checkpoint

    bundle = micro_bundle(seed=10)
    plan = stage_plan("align", token_budget=2_000)
    bundle, trace = run_stage(
        plan, tiny_corpus(), bundle,
        TrainConfig(batch_size=2, lr=1e-3, log_every=3),
        out_dir=tmp_path,
    )
    lines = (tmp_path / "align-metrics.jsonl").read_text().splitlines()
    rows = [json.loads(line) for line in lines]
    assert rows == trace
    assert {"stage", "step", "tokens", "total", "ce", "ts_mse", "scale",
            "lr", "grad_norm", "skipped"} <= set(rows[0])
    loaded, meta, rng_state = load_checkpoint(tmp_path / "align")
    assert meta["stage"] == "align"
    assert meta["step"] == trace[-1]["step"]
    assert meta["trainable"] == sorted(ALIGN_TRAINABLE)
    assert meta["stage_seed"] == stage_seed(0, "align")
    assert "torch" in rng_state
    assert state_bytes(loaded.lm) == state_bytes(bundle.lm)


def test_run_stage_is_deterministic():
    corpus = tiny_corpus()
    plan = stage_plan("align", token_budget=2_000)
    cfg = TrainConfig(batch_size=2, lr=1e-3, log_every=5)
    b1, t1 = run_stage(plan, corpus, micro_bundle(seed=11), cfg)
    b2, t2 = run_stage(plan, corpus, micro_bundle(seed=11), cfg)
    assert t1 == t2
    assert state_bytes(b1.adapters) == state_bytes(b2.adapters)


def test_divergence_aborts_and_restores_weights():
    bundle = micro_bundle(seed=12)
    with torch.no_grad():
        bundle.lm.head.bias.fill_(float("inf"))
    good = state_bytes(bundle.adapters)
    plan = stage_plan("align", token_budget=10_000)
    with pytest.raises(DivergenceError, match="non-finite loss"):
        run_stage(plan, tiny_corpus(), bundle,
                  TrainConfig(batch_size=2, lr=1e-3))
    assert state_bytes(bundle.adapters) == good


def test_max_steps_caps_the_run():
    bundle = micro_bundle(seed=13)
    plan = stage_plan("align", token_budget=10_000_000)
    bundle, trace = run_stage(
        plan, tiny_corpus(), bundle,
        TrainConfig(batch_size=2, lr=1e-3, log_every=2, max_steps=7),
    )
    assert trace[-1]["step"] == 7


def test_overlong_examples_are_dropped_with_warning():
    # 120 splits the corpus: translation streams fit, stats streams do not.
    bundle = micro_bundle(seed=14, max_seq_len=120)
    corpus = tiny_corpus()
    plan = stage_plan("align", token_budget=500)
    with pytest.warns(UserWarning, match="longer than max_seq_len"):
        run_stage(plan, corpus, bundle, TrainConfig(batch_size=2, lr=1e-3))
