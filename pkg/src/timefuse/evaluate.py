"""Task evaluators and the metrics they report.

Forecasts are scored as rMAPE against a seasonal-naive baseline whose season
comes from the series frequency tag; classification and QA use normalized
exact match; anomaly detection uses strict point-wise F1 (no point-adjust);
text quality is perplexity. ``run_eval`` drives a bundle over a corpus file
and emits a deterministic report.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .corpus import (
    InterleavedExample,
    TASK_TAGS,
    TextSegment,
    TsSegment,
    parse_anomaly_spans,
    read_corpus,
    spans_to_points,
)
from .errors import ParseError, ValidationError
from .fusion import MASK_TEXT, TokenStream, build_token_stream, embed_stream
from .lm import GenPolicy, GenTS, ModelBundle, constrained_decode, generate
from .signal import Series, denormalize, normalize, patchify, seasonal_naive, unpatchify

MAPE_EPS = 1e-8
# Naive season per sampling-frequency tag: hourly repeats the day, daily the
# week, weekly/monthly/quarterly the year; untagged series fall back to lag 1.
SEASON_BY_FREQUENCY = {"H": 24, "D": 7, "W": 52, "M": 12, "Q": 4, None: 1}


@dataclass(frozen=True)
class EvalReport:
    task_tag: str
    metrics: dict
    n_examples: int
    config_hash: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.task_tag not in TASK_TAGS:
            raise ValidationError(f"unknown task tag {self.task_tag!r}")
        if self.n_examples <= 0:
            raise ValidationError("report needs at least one example")
        for name, value in self.metrics.items():
            if isinstance(value, float) and not math.isfinite(value):
                raise ValidationError(f"metric {name} is not finite: {value}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "task": self.task_tag,
                "metrics": self.metrics,
                "n_examples": self.n_examples,
                "config_hash": self.config_hash,
                "seed": self.seed,
            },
            sort_keys=True,
            separators=(",", ":"),
        )


def mape(pred: np.ndarray, actual: np.ndarray) -> float:
    """Mean of |a - p| / max(|a|, eps)."""
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape or pred.ndim != 1:
        raise ValidationError(
            f"pred and actual must be equal-length 1-D, got {pred.shape} "
            f"vs {actual.shape}"
        )
    if len(pred) == 0:
        raise ValidationError("mape needs at least one point")
    denom = np.maximum(np.abs(actual), MAPE_EPS)
    return float(np.mean(np.abs(actual - pred) / denom))


def rmape(pred, actual, naive_pred) -> float:
    """MAPE relative to the seasonal-naive baseline; 1.0 means parity.

    A perfect baseline makes the ratio degenerate: 0/0 is defined as 1.0
    (parity with perfection) and x/0 as inf.
    """
    model = mape(pred, actual)
    baseline = mape(naive_pred, actual)
    if baseline == 0.0:
        return 1.0 if model == 0.0 else float("inf")
    return model / baseline


_SPACE_RUN = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    return _SPACE_RUN.sub(" ", text.strip()).casefold()


def exact_match(outputs: Sequence[str], targets: Sequence[str]) -> float:
    """Fraction of pairs equal after trim / case-fold / space-collapse."""
    if len(outputs) != len(targets):
        raise ValidationError(
            f"outputs ({len(outputs)}) and targets ({len(targets)}) differ in length"
        )
    if not outputs:
        raise ValidationError("exact_match needs at least one pair")
    hits = sum(
        normalize_answer(o) == normalize_answer(t)
        for o, t in zip(outputs, targets)
    )
    return hits / len(outputs)


def anomaly_f1(pred_points: set, true_points: set) -> tuple[float, float, float]:
    """Strict point-wise precision/recall/F1; empty sets count as vacuously right."""
    pred_points = set(pred_points)
    true_points = set(true_points)
    tp = len(pred_points & true_points)
    precision = tp / len(pred_points) if pred_points else 1.0
    recall = tp / len(true_points) if true_points else 1.0
    if precision + recall == 0.0:
        return precision, recall, 0.0
    f1 = 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def perplexity(stream: TokenStream, bundle: ModelBundle) -> float:
    """exp(mean next-token CE) over a text-only stream's supervised tokens."""
    if stream.ts_segments:
        raise ValidationError("perplexity is defined on text-only streams")
    positions = np.nonzero(stream.loss_mask == MASK_TEXT)[0]
    if len(positions) == 0:
        raise ValidationError("stream has no supervised text tokens")
    bundle.eval_mode()
    with torch.no_grad():
        emb = embed_stream(stream, bundle.lm.embed, bundle.adapters)
        _, logits = bundle.lm(emb.unsqueeze(0))
        ids = torch.tensor(stream.token_ids, dtype=torch.long)
        pos = torch.from_numpy(positions)
        ce = torch.nn.functional.cross_entropy(
            logits[0][pos - 1], ids[pos], reduction="mean"
        )
    return float(torch.exp(ce))


def corpus_perplexity(streams: Sequence[TokenStream], bundle: ModelBundle) -> float:
    """exp of the token-weighted mean CE across streams."""
    total, count = 0.0, 0
    bundle.eval_mode()
    with torch.no_grad():
        for stream in streams:
            positions = np.nonzero(stream.loss_mask == MASK_TEXT)[0]
            if len(positions) == 0:
                continue
            emb = embed_stream(stream, bundle.lm.embed, bundle.adapters)
            _, logits = bundle.lm(emb.unsqueeze(0))
            ids = torch.tensor(stream.token_ids, dtype=torch.long)
            pos = torch.from_numpy(positions)
            ce = torch.nn.functional.cross_entropy(
                logits[0][pos - 1], ids[pos], reduction="sum"
            )
            total += float(ce)
            count += len(positions)
    if count == 0:
        raise ValidationError("no supervised text tokens in any stream")
    return math.exp(total / count)


def season_for(frequency: Optional[str], override: Optional[int] = None) -> int:
    if override is not None:
        if override < 1:
            raise ValidationError("season override must be >= 1")
        return override
    return SEASON_BY_FREQUENCY.get(frequency, 1)


def estimate_period(values: np.ndarray, min_lag: int = 4) -> Optional[int]:
    """Dominant period via the first autocorrelation peak, or None.

    Aperiodic signals (AR, white noise) have a monotonically decaying ACF with
    no local maximum above the confidence bar, so they return None.
    """
    x = np.asarray(values, dtype=np.float64)
    n = len(x)
    max_lag = n // 3
    if max_lag <= min_lag:
        return None
    xc = x - x.mean()
    denom = float(np.dot(xc, xc))
    if denom <= 0:
        return None
    acf = np.array([float(np.dot(xc[:-k], xc[k:])) / denom
                    for k in range(1, max_lag + 1)])
    for k in range(1, len(acf) - 1):
        lag = k + 1
        if lag < min_lag:
            continue
        # a genuine period dips (anti-phase) before its peak; a slowly
        # decaying ACF with sampling wiggles never does
        if (acf[k] >= acf[k - 1] and acf[k] >= acf[k + 1] and acf[k] > 0.35
                and float(acf[:k].min()) < 0.2 * acf[k]):
            return lag
    return None


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks with ties averaged; bounds the leverage of extreme values."""
    n = len(x)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(n)
    ranks[order] = np.arange(n, dtype=np.float64)
    _, inverse = np.unique(x, return_inverse=True)
    sums = np.bincount(inverse, weights=ranks)
    counts = np.bincount(inverse)
    return (sums / counts)[inverse]


def _phase_residual(x: np.ndarray, period: Optional[int]) -> np.ndarray:
    """Per-point deviation from the best-matching same-phase neighbour.

    With a detected period the residual at t is the smallest distance to any
    value one or two cycles away: a clean point agrees with at least one clean
    mate (so corrupted mates cannot poison it), while a corrupted point agrees
    with none. Without a period it falls back to the distance from a short
    self-excluding running median.
    """
    n = len(x)
    resid = np.empty(n)
    if period:
        for t in range(n):
            mates = [x[t + j * period] for j in (-2, -1, 1, 2)
                     if 0 <= t + j * period < n]
            resid[t] = min(abs(x[t] - m) for m in mates) if mates else 0.0
    else:
        half = 3
        for t in range(n):
            lo, hi = max(0, t - half), min(n, t + half + 1)
            window = np.delete(x[lo:hi], t - lo)
            resid[t] = abs(x[t] - float(np.median(window))) if len(window) else 0.0
    return resid


def detect_anomalies(
    series: Series,
    codec,
    threshold_sigma: float = 4.0,
) -> tuple[set, np.ndarray]:
    """Reconstruction-error detector with a robust local validation pass.

    Stage 1 proposes candidates: points whose codec reconstruction error
    exceeds median + threshold_sigma * MAD-based sigma. The codec supplies the
    expected normal behaviour, but its error field alone over-triggers: sharp
    clean features reconstruct imperfectly, and a large anomaly contaminates
    the latents of everything after it through causal attention.

    Stage 2 keeps a candidate only if the point also deviates from a robust
    local expectation: the value is detrended (median slope), compared against
    same-phase neighbours when a period is detectable (falling back to a
    running median), and must sit threshold_sigma / 2 residual-MADs away.

    Returns (anomalous indices, per-point reconstruction error).
    """
    if threshold_sigma <= 0:
        raise ValidationError("threshold_sigma must be positive")
    normed, stats = normalize(series)
    ps = patchify(normed, codec.cfg.p)
    with torch.no_grad():
        latent = codec.encode(ps, mode="deterministic")
        recon = codec.decode(latent, pad_len=ps.pad_len)
    recon_series = denormalize(unpatchify(recon), stats)
    err = np.abs(series.values - recon_series.values)
    med = float(np.median(err))
    mad = float(np.median(np.abs(err - med)))
    sigma = 1.4826 * mad if mad > 0 else (float(err.std()) or 1.0)
    candidates = np.nonzero(err > med + threshold_sigma * sigma)[0]
    if len(candidates) == 0:
        return set(), err

    # trimmed-mean slope: median-of-diffs is unstable on cyclic signals
    # (arcsine-distributed diffs), and plain mean is corruption-sensitive
    x = series.values.astype(np.float64)
    slope = 0.0
    if len(x) > 1:
        d = np.diff(x)
        lo, hi = np.quantile(d, [0.1, 0.9])
        core = d[(d >= lo) & (d <= hi)]
        slope = float(core.mean()) if len(core) else float(np.median(d))
    detrended = x - slope * np.arange(len(x))
    # 5-sigma corruption can carry half the signal energy and bury the ACF
    # peak, so the period is estimated on the rank-transformed signal
    period = estimate_period(_average_ranks(detrended))
    if period:
        # seasonal differencing cancels the waveform exactly, leaving the
        # cleanest slope estimate; redo the detrend with it
        slope = float(np.median(x[period:] - x[:-period])) / period
        detrended = x - slope * np.arange(len(x))
    resid = _phase_residual(detrended, period)
    rmad = float(np.median(np.abs(resid - np.median(resid))))
    rscale = 1.4826 * rmad if rmad > 0 else (float(resid.std()) or 1e-9)
    # two gates: a statistical outlier among the residuals, and a material
    # effect relative to the signal's own robust spread
    smad = float(np.median(np.abs(detrended - np.median(detrended))))
    sscale = 1.4826 * smad if smad > 0 else (float(detrended.std()) or 1e-9)
    keep = (resid > (threshold_sigma / 2.0) * rscale) & (
        resid > (threshold_sigma / 4.0) * sscale
    )
    points = set(int(t) for t in candidates if keep[t])
    return points, err


def _prompt_stream(ex: InterleavedExample, bundle: ModelBundle) -> TokenStream:
    return build_token_stream(
        ex, bundle.tokenizer, bundle.codec, include_response=False
    )


def _response_text(ex: InterleavedExample) -> str:
    return "".join(
        seg.text for seg in ex.response_segments() if isinstance(seg, TextSegment)
    )


def _response_series(ex: InterleavedExample) -> Series:
    for seg in ex.response_segments():
        if isinstance(seg, TsSegment):
            return seg.series
    raise ValidationError("example has no time-series response")


def _history_series(ex: InterleavedExample) -> Series:
    for seg in reversed(ex.prompt_segments()):
        if isinstance(seg, TsSegment):
            return seg.series
    raise ValidationError("example has no time-series prompt")


def _first_generated_series(out) -> Optional[np.ndarray]:
    for seg in out.segments:
        if isinstance(seg, GenTS):
            return seg.series.values
    return None


def _forecast_prediction(
    ex: InterleavedExample,
    bundle: ModelBundle,
    horizon: int,
    seed: int,
) -> np.ndarray:
    """Greedy slot-budgeted forecast, padded with the last value if short."""
    budget = math.ceil(horizon / bundle.codec.cfg.p)
    out = generate(
        _prompt_stream(ex, bundle), bundle,
        GenPolicy(ts_slot_budget=budget),
        max_new=budget + 8, seed=seed,
    )
    values = _first_generated_series(out)
    if values is None or len(values) == 0:
        history = _history_series(ex)
        return np.full(horizon, history.values[-1])
    if len(values) < horizon:
        values = np.concatenate(
            [values, np.full(horizon - len(values), values[-1])]
        )
    return values[:horizon]


def eval_forecast(
    examples: Sequence[InterleavedExample],
    bundle: ModelBundle,
    seed: int = 0,
    season_override: Optional[int] = None,
    baseline_as_model: bool = False,
    plot_dir: Optional[Path] = None,
    plot_examples: int = 4,
) -> tuple[dict, list[dict]]:
    scores, maes, rows = [], [], []
    for i, ex in enumerate(examples):
        history = _history_series(ex)
        actual = _response_series(ex).values
        horizon = int(ex.meta.get("horizon", len(actual)))
        horizon = min(horizon, len(actual))
        season = season_for(history.frequency, season_override)
        naive = seasonal_naive(history, season, horizon).values
        if baseline_as_model:
            pred = naive.copy()
        else:
            pred = _forecast_prediction(ex, bundle, horizon, seed=seed + i)
        score = rmape(pred, actual[:horizon], naive)
        scores.append(score)
        maes.append(float(np.mean(np.abs(actual[:horizon] - pred))))
        rows.append({"example": i, "rmape": score, "season": season})
        if plot_dir is not None and i < plot_examples:
            _write_forecast_plots(plot_dir, i, history.values, actual[:horizon],
                                  pred, naive)
    finite = [s for s in scores if math.isfinite(s)]
    metrics = {
        "rmape": float(np.mean(finite)) if finite else float("inf"),
        "mae": float(np.mean(maes)),
        "n_degenerate": len(scores) - len(finite),
    }
    return metrics, rows


def _write_forecast_plots(plot_dir: Path, idx: int, history: np.ndarray,
                          actual: np.ndarray, pred: np.ndarray,
                          naive: np.ndarray) -> None:
    plot_dir.mkdir(parents=True, exist_ok=True)
    n = len(history)
    curves = {
        "history": (np.arange(n), history),
        "actual": (np.arange(n, n + len(actual)), actual),
        "pred": (np.arange(n, n + len(pred)), pred),
        "naive": (np.arange(n, n + len(naive)), naive),
    }
    for name, (x, y) in curves.items():
        lines = [f"{int(xi)} {yi:.10g}" for xi, yi in zip(x, y)]
        path = plot_dir / f"forecast_{idx:03d}_{name}.txt"
        path.write_text("\n".join(lines) + "\n")


def eval_classify(
    examples: Sequence[InterleavedExample],
    bundle: ModelBundle,
) -> tuple[dict, list[dict]]:
    outputs, targets, rows = [], [], []
    for i, ex in enumerate(examples):
        labels = tuple(ex.meta["label_set"])
        pred = constrained_decode(_prompt_stream(ex, bundle), bundle, labels)
        truth = _response_text(ex)
        outputs.append(pred)
        targets.append(truth)
        rows.append({"example": i, "pred": pred, "truth": truth})
    return {"accuracy": exact_match(outputs, targets)}, rows


def eval_anomaly(
    examples: Sequence[InterleavedExample],
    bundle: ModelBundle,
    seed: int = 0,
    threshold_sigma: float = 4.0,
) -> tuple[dict, list[dict]]:
    """Micro-averaged point-wise F1 over the evaluation set.

    Reconstruction-mode examples are scored with the codec error detector;
    direct-mode examples ask the model for a span string and parse it
    (an unparseable reply counts as predicting no anomalies).
    """
    tp = fp = fn = 0
    rows = []
    for i, ex in enumerate(examples):
        series = _history_series(ex)
        truth = set(spans_to_points(ex.meta["spans"]))
        if ex.meta.get("mode") == "reconstruction":
            pred, _ = detect_anomalies(series, bundle.codec, threshold_sigma)
        else:
            out = generate(_prompt_stream(ex, bundle), bundle,
                           GenPolicy(), max_new=96, seed=seed + i)
            text = "".join(
                seg.text for seg in out.segments if hasattr(seg, "text")
            )
            try:
                pred = set(spans_to_points(parse_anomaly_spans(text.strip())))
            except ParseError:
                pred = set()
        tp += len(pred & truth)
        fp += len(pred - truth)
        fn += len(truth - pred)
        p, r, f1 = anomaly_f1(pred, truth)
        rows.append({"example": i, "precision": p, "recall": r, "f1": f1})
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    metrics = {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "point_adjust": False,
    }
    return metrics, rows


def eval_text_match(
    examples: Sequence[InterleavedExample],
    bundle: ModelBundle,
    seed: int = 0,
    max_new: int = 160,
) -> tuple[dict, list[dict]]:
    """Greedy generation scored by normalized exact match on the text reply."""
    outputs, targets, rows = [], [], []
    for i, ex in enumerate(examples):
        out = generate(_prompt_stream(ex, bundle), bundle, GenPolicy(),
                       max_new=max_new, seed=seed + i)
        text = "".join(seg.text for seg in out.segments if hasattr(seg, "text"))
        truth = _response_text(ex)
        outputs.append(text)
        targets.append(truth)
        rows.append({"example": i, "pred": text, "truth": truth})
    return {"exact_match": exact_match(outputs, targets)}, rows


def eval_perplexity(
    examples: Sequence[InterleavedExample],
    bundle: ModelBundle,
) -> tuple[dict, list[dict]]:
    streams = [
        build_token_stream(ex, bundle.tokenizer, bundle.codec)
        for ex in examples
    ]
    value = corpus_perplexity(streams, bundle)
    return {"perplexity": value}, []


def run_eval(
    task_tag: str,
    dataset_path: Union[str, Path],
    bundle: ModelBundle,
    policy: GenPolicy = GenPolicy(),
    seed: int = 0,
    config_hash: str = "",
    out_dir: Optional[Union[str, Path]] = None,
    season_override: Optional[int] = None,
    baseline_as_model: bool = False,
    threshold_sigma: float = 4.0,
    max_examples: Optional[int] = None,
) -> EvalReport:
    """Evaluate one task over a corpus file and write a deterministic report.

    With ``out_dir`` set, writes ``report.json``, a per-example
    ``trace.jsonl``, and (forecast only) two-column plot files.
    """
    if task_tag not in TASK_TAGS:
        raise ValidationError(f"unknown task tag {task_tag!r}")
    _, all_examples = read_corpus(dataset_path)
    examples = [ex for ex in all_examples if ex.task_tag == task_tag]
    if max_examples is not None:
        examples = examples[:max_examples]
    if not examples:
        raise ValidationError(
            f"{dataset_path} holds no examples for task {task_tag!r}"
        )
    torch.manual_seed(seed)
    bundle.eval_mode()
    out_path = Path(out_dir) if out_dir is not None else None

    if task_tag == "forecast":
        plot_dir = out_path / "plots" if out_path is not None else None
        metrics, rows = eval_forecast(
            examples, bundle, seed=seed, season_override=season_override,
            baseline_as_model=baseline_as_model, plot_dir=plot_dir,
        )
    elif task_tag == "classify":
        metrics, rows = eval_classify(examples, bundle)
    elif task_tag == "anomaly":
        metrics, rows = eval_anomaly(examples, bundle, seed=seed,
                                     threshold_sigma=threshold_sigma)
    elif task_tag in ("qa", "translate", "stats"):
        metrics, rows = eval_text_match(examples, bundle, seed=seed)
    else:  # raw: language-modeling quality
        metrics, rows = eval_perplexity(examples, bundle)

    report = EvalReport(
        task_tag=task_tag,
        metrics=metrics,
        n_examples=len(examples),
        config_hash=config_hash,
        seed=seed,
    )
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "report.json").write_text(report.to_json() + "\n")
        with open(out_path / "trace.jsonl", "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return report
