"""Synthetic corpora: signal generators, task formatting, and record serialization.

Every formatter in this module has a total inverse parser, so anything a model
is trained to emit can be scored mechanically. Records are line-delimited JSON
with a version field; float values use full round-trip precision.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .errors import ParseError, ValidationError
from .signal import Series

FORMAT_VERSION = 1

TASK_TAGS = ("forecast", "classify", "anomaly", "qa", "translate", "stats", "raw")
ROLES = ("prompt", "response")

GENERATORS = ("sine", "square", "trend", "ar1", "noise", "composite")


# ---------------------------------------------------------------------------
# Example data model

@dataclass(frozen=True)
class TextSegment:
    text: str
    role: str = "prompt"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"unknown role {self.role!r}")
        if not isinstance(self.text, str):
            raise ValidationError("text segment payload must be a string")


@dataclass(frozen=True)
class TsSegment:
    series: Series
    role: str = "prompt"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValidationError(f"unknown role {self.role!r}")
        if not isinstance(self.series, Series):
            raise ValidationError("ts segment payload must be a Series")


Segment = Union[TextSegment, TsSegment]


@dataclass(frozen=True)
class InterleavedExample:
    """One training or evaluation record: interleaved text and series segments.

    Prompt segments come first, response segments last; the split is what
    response-only training masks against. ``meta`` carries task ground truth
    that is awkward to re-parse out of the prompt (label sets, anomaly spans).
    """

    segments: tuple[Segment, ...]
    task_tag: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task_tag not in TASK_TAGS:
            raise ValidationError(f"unknown task tag {self.task_tag!r}")
        segments = tuple(self.segments)
        if not segments:
            raise ValidationError("example must contain at least one segment")
        roles = [ROLES.index(s.role) for s in segments]
        if any(b < a for a, b in zip(roles, roles[1:])):
            raise ValidationError("response segments must follow all prompt segments")
        if roles[-1] != 1:
            raise ValidationError("example must end with a response segment")
        object.__setattr__(self, "segments", segments)

    def prompt_segments(self) -> tuple[Segment, ...]:
        return tuple(s for s in self.segments if s.role == "prompt")

    def response_segments(self) -> tuple[Segment, ...]:
        return tuple(s for s in self.segments if s.role == "response")


# ---------------------------------------------------------------------------
# Signal generators

@dataclass(frozen=True)
class SynthSpec:
    """Closed-form description of one synthetic signal."""

    generator: str
    length: int
    seed: int
    amplitude: float = 1.0
    period: float = 32.0
    phase: float = 0.0
    drift: float = 0.0
    noise: float = 0.0
    ar_coeff: float = 0.8
    frequency: Optional[str] = None

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValidationError(f"unknown generator {self.generator!r}")
        if self.length < 1:
            raise ValidationError(f"length must be >= 1, got {self.length}")
        if self.period <= 0:
            raise ValidationError("period must be positive")
        if self.noise < 0:
            raise ValidationError("noise sigma must be >= 0")


def gen_signal(spec: SynthSpec) -> Series:
    """Sample a signal from its spec; deterministic for a fixed seed.

    Closed forms:
      sine:      a * sin(2*pi*t/T + phi) + noise
      square:    a * sgn(sin(2*pi*t/T + phi)) + noise, sgn(0) = 1
      trend:     drift * t + noise
      ar1:       x[t] = c * x[t-1] + e[t], e ~ N(0, noise^2)
      noise:     white N(0, noise^2)
      composite: sine + trend + noise
    """
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.length, dtype=np.float64)
    eps = rng.normal(0.0, 1.0, spec.length) * spec.noise
    angle = 2.0 * math.pi * t / spec.period + spec.phase
    if spec.generator == "sine":
        values = spec.amplitude * np.sin(angle) + eps
    elif spec.generator == "square":
        values = spec.amplitude * np.where(np.sin(angle) >= 0.0, 1.0, -1.0) + eps
    elif spec.generator == "trend":
        values = spec.drift * t + eps
    elif spec.generator == "ar1":
        values = np.empty(spec.length)
        prev = 0.0
        for i in range(spec.length):
            prev = spec.ar_coeff * prev + eps[i]
            values[i] = prev
    elif spec.generator == "noise":
        values = eps
    else:
        values = spec.amplitude * np.sin(angle) + spec.drift * t + eps
    return Series(values, frequency=spec.frequency)


def inject_anomalies(
    series: Series,
    rng: np.random.Generator,
    n_spans: int,
    amplitude: float = 5.0,
    kinds: Sequence[str] = ("spike", "shift"),
) -> tuple[Series, list[tuple[int, int]]]:
    """Corrupt a series with spikes and/or level shifts; returns spans hit.

    Spikes cover 1-2 points, level shifts 4-12; offsets are ``amplitude``
    standard deviations of the clean series, signed at random. Spans are drawn
    uniformly and kept disjoint. ``kinds`` restricts which corruption types
    are drawn.
    """
    if n_spans < 0:
        raise ValidationError("n_spans must be >= 0")
    if not kinds or any(k not in ("spike", "shift") for k in kinds):
        raise ValidationError(f"kinds must be a non-empty subset of spike/shift, got {kinds!r}")
    n = len(series)
    sigma = max(float(series.values.std()), 1e-3)
    values = series.values.copy()
    spans: list[tuple[int, int]] = []
    for _ in range(n_spans):
        for _attempt in range(64):
            kind = kinds[int(rng.integers(len(kinds)))] if len(kinds) > 1 else kinds[0]
            width = int(rng.integers(1, 3)) if kind == "spike" else int(rng.integers(4, 13))
            if width > n:
                width = n
            start = int(rng.integers(0, n - width + 1))
            cand = (start, start + width - 1)
            if all(cand[0] > b + 1 or cand[1] < a - 1 for a, b in spans):
                spans.append(cand)
                sign = 1.0 if rng.random() < 0.5 else -1.0
                values[cand[0]: cand[1] + 1] += sign * amplitude * sigma
                break
    spans = normalize_spans(spans)
    return series.with_values(values), spans


# ---------------------------------------------------------------------------
# Formatters and their inverse parsers

def format_values(values: Sequence[float], precision: int = 2) -> str:
    """Render values as comma-separated fixed-precision decimals."""
    if not (0 <= precision <= 6):
        raise ValidationError(f"precision must be in 0..6, got {precision}")
    return ", ".join(f"{float(v):.{precision}f}" for v in values)


def parse_values(text: str) -> np.ndarray:
    """Inverse of :func:`format_values`; raises on malformed numeric text."""
    parts = [p.strip() for p in text.strip().split(",")]
    if parts == [""]:
        raise ParseError("empty value list")
    try:
        return np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError as exc:
        raise ParseError(f"bad numeric literal in value list: {exc}") from None


NO_ANOMALY_TEXT = "No anomalies detected."
_SPAN_RE = re.compile(r"^(\d+)-(\d+)$")


def normalize_spans(spans: Sequence[tuple[int, int]]) -> list[tuple[int, int]]:
    """Sort spans and merge any that overlap or touch."""
    cleaned = []
    for a, b in spans:
        a, b = int(a), int(b)
        if a < 0 or b < a:
            raise ValidationError(f"bad span ({a}, {b})")
        cleaned.append((a, b))
    cleaned.sort()
    merged: list[tuple[int, int]] = []
    for a, b in cleaned:
        if merged and a <= merged[-1][1] + 1:
            merged[-1] = (merged[-1][0], max(merged[-1][1], b))
        else:
            merged.append((a, b))
    return merged


def format_anomaly_spans(spans: Sequence[tuple[int, int]]) -> str:
    """Render spans as 'Anomalies detected at timestamps A-B, C-D'.

    Timestamps are zero-based inclusive indices. Empty input means a clean
    series.
    """
    spans = normalize_spans(spans)
    if not spans:
        return NO_ANOMALY_TEXT
    body = ", ".join(f"{a}-{b}" for a, b in spans)
    return f"Anomalies detected at timestamps {body}"


def parse_anomaly_spans(text: str) -> list[tuple[int, int]]:
    """Inverse of :func:`format_anomaly_spans`."""
    text = text.strip()
    if text == NO_ANOMALY_TEXT:
        return []
    prefix = "Anomalies detected at timestamps "
    if not text.startswith(prefix):
        raise ParseError("anomaly answer does not match the expected template")
    spans = []
    for piece in text[len(prefix):].rstrip(".").split(","):
        m = _SPAN_RE.match(piece.strip())
        if m is None:
            raise ParseError(f"bad span literal {piece.strip()!r}")
        a, b = int(m.group(1)), int(m.group(2))
        if b < a:
            raise ParseError(f"span {a}-{b} runs backwards")
        spans.append((a, b))
    return normalize_spans(spans)


def spans_to_points(spans: Sequence[tuple[int, int]]) -> set[int]:
    return {t for a, b in normalize_spans(spans) for t in range(a, b + 1)}


def points_to_spans(points) -> list[tuple[int, int]]:
    """Group point indices into maximal contiguous inclusive spans."""
    spans: list[tuple[int, int]] = []
    for t in sorted(set(points)):
        if spans and t == spans[-1][1] + 1:
            spans[-1] = (spans[-1][0], t)
        else:
            spans.append((t, t))
    return spans


def format_metadata_line(
    dataset: str, frequency: Optional[str], length: int
) -> str:
    """One-line series header in the fixed 'key = value' comma format."""
    fields = [("dataset", dataset)]
    if frequency is not None:
        fields.append(("sample frequency", frequency))
    fields.append(("length", f"{length} points"))
    body = ", ".join(f"{k} = {v}" for k, v in fields)
    return f"Time series metadata: {body}"


def parse_metadata_line(line: str) -> dict[str, str]:
    """Inverse of :func:`format_metadata_line`; tolerates unknown fields."""
    prefix = "Time series metadata: "
    line = line.strip()
    if not line.startswith(prefix):
        raise ParseError("not a metadata line")
    out: dict[str, str] = {}
    for piece in line[len(prefix):].split(","):
        if " = " not in piece:
            raise ParseError(f"bad metadata field {piece.strip()!r}")
        key, value = piece.split(" = ", 1)
        out[key.strip()] = value.strip()
    return out


STATS_KEYS = ("mean", "std", "median", "q1", "q3", "min", "max")
STATS_PRECISION = 4


def compute_stats(series: Series) -> dict[str, float]:
    """Seven summary statistics; quartiles use linear interpolation."""
    v = series.values
    return {
        "mean": float(v.mean()),
        "std": float(v.std()),
        "median": float(np.median(v)),
        "q1": float(np.percentile(v, 25)),
        "q3": float(np.percentile(v, 75)),
        "min": float(v.min()),
        "max": float(v.max()),
    }


def format_stats(stats: dict[str, float]) -> str:
    rounded = {k: round(float(stats[k]), STATS_PRECISION) for k in STATS_KEYS}
    return json.dumps(rounded)


def parse_stats(text: str) -> dict[str, float]:
    """Inverse of :func:`format_stats`."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"stats answer is not valid JSON: {exc}") from None
    if not isinstance(obj, dict) or set(obj) != set(STATS_KEYS):
        raise ParseError(f"stats object must have exactly the keys {STATS_KEYS}")
    return {k: float(obj[k]) for k in STATS_KEYS}


# ---------------------------------------------------------------------------
# Task example constructors

_FORECAST_TEMPLATES = (
    "Continue the time series for the next {h} points.",
    "Forecast the next {h} values of this series.",
    "Predict the following {h} observations of the series.",
)
_CLASSIFY_TEMPLATES = (
    "Classify the series. Possible labels: {labels}.",
    "Which label describes this series? Possible labels: {labels}.",
)
_ANOMALY_DIRECT_TEMPLATES = (
    "Report any anomalous timestamps in the series.",
    "List the anomalous regions of this series.",
)
_ANOMALY_RECON_TEMPLATES = (
    "Generate the expected normal behavior of this series.",
    "Reconstruct this series without its anomalies.",
)
_TRANSLATE_TO_TEXT_TEMPLATES = (
    "Write out the series values as comma-separated numbers.",
    "Transcribe this series as text with {prec} decimal places.",
)
_TRANSLATE_TO_TS_TEMPLATES = (
    "Convert the following numbers into a time series.",
    "Build the series whose values are listed below.",
)
_STATS_TEMPLATES = (
    "Report summary statistics of the series as a JSON object.",
    "Compute the seven summary statistics of this series.",
)
_MEAN_STD_TEMPLATES = (
    "Report the mean and standard deviation of the series.",
)


def _pick(pool: Sequence[str], rng: Optional[np.random.Generator]) -> str:
    if rng is None:
        return pool[0]
    return pool[int(rng.integers(len(pool)))]


def make_forecast_example(
    history: Series,
    horizon: int,
    context_text: Optional[str] = None,
    future: Optional[Series] = None,
    dataset: str = "synthetic",
    rng: Optional[np.random.Generator] = None,
) -> InterleavedExample:
    """Forecasting as continuation: prompt holds the history, response the future.

    When ``future`` is omitted the final ``horizon`` points of ``history`` are
    split off as the target.
    """
    if horizon < 1:
        raise ValidationError(f"horizon must be >= 1, got {horizon}")
    if future is None:
        if len(history) <= horizon:
            raise ValidationError("history too short to split off the horizon")
        values = history.values
        future = history.with_values(values[len(values) - horizon:])
        history = history.with_values(values[: len(values) - horizon])
    if len(future) != horizon:
        raise ValidationError(f"future has {len(future)} points, expected {horizon}")
    header = _pick(_FORECAST_TEMPLATES, rng).format(h=horizon)
    meta_line = format_metadata_line(dataset, history.frequency, len(history))
    segments: list[Segment] = [TextSegment(f"{header}\n{meta_line}")]
    if context_text is not None:
        segments.append(TextSegment(context_text))
    segments.append(TsSegment(history))
    segments.append(TsSegment(future, role="response"))
    return InterleavedExample(
        tuple(segments), "forecast", meta={"horizon": horizon}
    )


def make_classification_example(
    series: Series,
    label: str,
    label_set: Sequence[str],
    k_shot: int = 0,
    shots: Optional[Sequence[tuple[Series, str]]] = None,
    rng: Optional[np.random.Generator] = None,
) -> InterleavedExample:
    """Classification as constrained generation over a stated label set."""
    label_set = list(label_set)
    if label not in label_set:
        raise ValidationError(f"label {label!r} not in label set {label_set}")
    shots = list(shots or [])
    if k_shot != len(shots):
        raise ValidationError(f"k_shot={k_shot} but {len(shots)} shots given")
    for _, shot_label in shots:
        if shot_label not in label_set:
            raise ValidationError(f"shot label {shot_label!r} not in label set")
    header = _pick(_CLASSIFY_TEMPLATES, rng).format(labels=", ".join(label_set))
    segments: list[Segment] = [TextSegment(header)]
    for shot_series, shot_label in shots:
        segments.append(TsSegment(shot_series))
        segments.append(TextSegment(f"Label: {shot_label}"))
    segments.append(TsSegment(series))
    segments.append(TextSegment("Label:"))
    segments.append(TextSegment(label, role="response"))
    return InterleavedExample(
        tuple(segments), "classify", meta={"label_set": label_set}
    )


def make_anomaly_example(
    series: Series,
    anomaly_spans: Sequence[tuple[int, int]],
    mode: str = "direct",
    clean: Optional[Series] = None,
    rng: Optional[np.random.Generator] = None,
) -> InterleavedExample:
    """Anomaly detection, either as span text or as clean reconstruction."""
    spans = normalize_spans(anomaly_spans)
    if spans and spans[-1][1] >= len(series):
        raise ValidationError("anomaly span extends past the series")
    if mode == "direct":
        header = _pick(_ANOMALY_DIRECT_TEMPLATES, rng)
        answer: Segment = TextSegment(format_anomaly_spans(spans), role="response")
    elif mode == "reconstruction":
        if clean is None:
            raise ValidationError("reconstruction mode requires the clean series")
        if len(clean) != len(series):
            raise ValidationError("clean series length must match the input")
        header = _pick(_ANOMALY_RECON_TEMPLATES, rng)
        answer = TsSegment(clean, role="response")
    else:
        raise ValidationError(f"unknown anomaly mode {mode!r}")
    segments = (TextSegment(header), TsSegment(series), answer)
    return InterleavedExample(
        segments, "anomaly", meta={"spans": [list(s) for s in spans], "mode": mode}
    )


def make_translate_example(
    series: Series,
    direction: str,
    precision: int = 2,
    rng: Optional[np.random.Generator] = None,
) -> InterleavedExample:
    """Lossless-at-precision conversion between a series and numeric text."""
    if not (0 <= precision <= 6):
        raise ValidationError(f"precision must be in 0..6, got {precision}")
    text = format_values(series.values, precision)
    if direction == "ts_to_text":
        header = _pick(_TRANSLATE_TO_TEXT_TEMPLATES, rng).format(prec=precision)
        segments = (
            TextSegment(header),
            TsSegment(series),
            TextSegment(text, role="response"),
        )
    elif direction == "text_to_ts":
        header = _pick(_TRANSLATE_TO_TS_TEMPLATES, rng)
        segments = (
            TextSegment(f"{header}\n{text}"),
            TsSegment(series, role="response"),
        )
    else:
        raise ValidationError(f"unknown direction {direction!r}")
    return InterleavedExample(
        segments, "translate", meta={"precision": precision, "direction": direction}
    )


def make_stats_example(
    series: Series,
    kind: str = "seven_stats",
    rng: Optional[np.random.Generator] = None,
) -> InterleavedExample:
    """Summary statistics of a series, answered as JSON or two labeled numbers."""
    stats = compute_stats(series)
    if kind == "seven_stats":
        header = _pick(_STATS_TEMPLATES, rng)
        answer = format_stats(stats)
    elif kind == "mean_std":
        header = _pick(_MEAN_STD_TEMPLATES, rng)
        answer = (
            f"mean = {stats['mean']:.{STATS_PRECISION}f}, "
            f"std = {stats['std']:.{STATS_PRECISION}f}"
        )
    else:
        raise ValidationError(f"unknown stats kind {kind!r}")
    segments = (
        TextSegment(header),
        TsSegment(series),
        TextSegment(answer, role="response"),
    )
    return InterleavedExample(segments, "stats", meta={"kind": kind})


QA_KINDS = ("trend_direction", "higher_half", "exceeds")

_QA_TEMPLATES = {
    "trend_direction": "Is the overall trend of this series increasing or decreasing?",
    "higher_half": "Which half of the series has the higher mean, the first or the second?",
    "exceeds": "Does the series ever exceed {threshold}? Answer yes or no.",
}


def make_qa_example(
    series: Series,
    kind: str,
    threshold: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
) -> InterleavedExample:
    """Short-answer questions about a series with closed-form ground truth."""
    if kind not in QA_KINDS:
        raise ValidationError(f"unknown qa kind {kind!r}")
    v = series.values
    if kind == "trend_direction":
        t = np.arange(len(v), dtype=np.float64)
        slope = 0.0 if len(v) < 2 else float(np.polyfit(t, v, 1)[0])
        answer = "increasing" if slope >= 0 else "decreasing"
        header = _QA_TEMPLATES[kind]
    elif kind == "higher_half":
        half = len(v) // 2
        if half == 0:
            raise ValidationError("series too short to split into halves")
        answer = "first" if v[:half].mean() > v[half:].mean() else "second"
        header = _QA_TEMPLATES[kind]
    else:
        if threshold is None:
            raise ValidationError("'exceeds' questions need a threshold")
        answer = "yes" if float(v.max()) > threshold else "no"
        header = _QA_TEMPLATES[kind].format(threshold=f"{threshold:.2f}")
    segments = (
        TextSegment(header),
        TsSegment(series),
        TextSegment(answer, role="response"),
    )
    return InterleavedExample(segments, "qa", meta={"kind": kind})


def make_raw_example(parts: Sequence[Union[str, Series]]) -> InterleavedExample:
    """Plain interleaved pretraining content; everything is trained on."""
    segments: list[Segment] = []
    for part in parts:
        if isinstance(part, str):
            segments.append(TextSegment(part, role="response"))
        elif isinstance(part, Series):
            segments.append(TsSegment(part, role="response"))
        else:
            raise ValidationError(f"raw parts must be str or Series, got {type(part)}")
    return InterleavedExample(tuple(segments), "raw")


# ---------------------------------------------------------------------------
# Serialization

def _segment_to_obj(seg: Segment) -> dict:
    if isinstance(seg, TextSegment):
        return {"kind": "text", "role": seg.role, "text": seg.text}
    obj: dict = {"kind": "ts", "role": seg.role, "values": seg.series.values.tolist()}
    if seg.series.frequency is not None:
        obj["frequency"] = seg.series.frequency
    if seg.series.channel_id is not None:
        obj["channel_id"] = seg.series.channel_id
    return obj


def serialize(ex: InterleavedExample) -> str:
    """One example per line; floats keep full round-trip precision."""
    record = {
        "version": FORMAT_VERSION,
        "task": ex.task_tag,
        "segments": [_segment_to_obj(s) for s in ex.segments],
    }
    if ex.meta:
        record["meta"] = ex.meta
    return json.dumps(record, separators=(",", ":"))


def _obj_to_segment(obj: dict, line: Optional[int]) -> Segment:
    kind = obj.get("kind")
    role = obj.get("role", "prompt")
    if kind == "text":
        if "text" not in obj:
            raise ParseError("text segment missing 'text' field", line)
        return TextSegment(obj["text"], role=role)
    if kind == "ts":
        if "values" not in obj:
            raise ParseError("ts segment missing 'values' field", line)
        try:
            series = Series(
                np.array(obj["values"], dtype=np.float64),
                frequency=obj.get("frequency"),
                channel_id=obj.get("channel_id"),
            )
        except (ValidationError, ValueError) as exc:
            raise ParseError(f"bad ts segment values: {exc}", line) from None
        return TsSegment(series, role=role)
    raise ParseError(f"unknown segment kind {kind!r}", line)


def parse(line: str, line_no: Optional[int] = None) -> InterleavedExample:
    """Inverse of :func:`serialize` with field-naming errors."""
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}", line_no) from None
    if not isinstance(record, dict):
        raise ParseError("record must be a JSON object", line_no)
    version = record.get("version")
    if version != FORMAT_VERSION:
        raise ParseError(
            f"version mismatch: got {version!r}, expected {FORMAT_VERSION}", line_no
        )
    task = record.get("task")
    if task not in TASK_TAGS:
        raise ParseError(f"unknown task tag {task!r} in 'task' field", line_no)
    segments_obj = record.get("segments")
    if not isinstance(segments_obj, list) or not segments_obj:
        raise ParseError("'segments' must be a non-empty array", line_no)
    segments = tuple(_obj_to_segment(o, line_no) for o in segments_obj)
    meta = record.get("meta", {})
    if not isinstance(meta, dict):
        raise ParseError("'meta' must be an object", line_no)
    try:
        return InterleavedExample(segments, task, meta=meta)
    except ValidationError as exc:
        raise ParseError(str(exc), line_no) from None


def write_corpus(
    path,
    examples: Sequence[InterleavedExample],
    config_hash: str = "",
    seed: int = 0,
) -> None:
    """Write a shard: one header record, then one record per example."""
    header = {
        "version": FORMAT_VERSION,
        "header": True,
        "config_hash": config_hash,
        "seed": seed,
        "n_examples": len(examples),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for ex in examples:
            fh.write(serialize(ex) + "\n")


def read_header(path) -> dict:
    with open(path) as fh:
        first = fh.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}", 1) from None
    if not isinstance(header, dict) or not header.get("header"):
        raise ParseError("first record must be the shard header", 1)
    if header.get("version") != FORMAT_VERSION:
        raise ParseError(
            f"version mismatch: got {header.get('version')!r}, "
            f"expected {FORMAT_VERSION}", 1,
        )
    return header


def iter_corpus(path) -> Iterator[InterleavedExample]:
    """Stream examples from a shard, skipping the header."""
    read_header(path)
    with open(path) as fh:
        fh.readline()
        for i, line in enumerate(fh, start=2):
            line = line.strip()
            if line:
                yield parse(line, line_no=i)


def read_corpus(path) -> tuple[dict, list[InterleavedExample]]:
    return read_header(path), list(iter_corpus(path))


# ---------------------------------------------------------------------------
# Mixture builder

DEFAULT_MIXTURE = {
    "forecast": 0.30,
    "classify": 0.15,
    "anomaly": 0.15,
    "qa": 0.10,
    "translate": 0.15,
    "stats": 0.15,
}

CLASS_LABELS = ("sine", "square", "trend", "noise")


def draw_task_tags(
    proportions: dict[str, float], n: int, rng: np.random.Generator
) -> list[str]:
    """Sample n task tags i.i.d. at the configured proportions."""
    tags = sorted(proportions)
    probs = np.array([proportions[t] for t in tags], dtype=np.float64)
    if np.any(probs < 0) or probs.sum() <= 0:
        raise ValidationError("proportions must be non-negative and sum > 0")
    for tag in tags:
        if tag not in TASK_TAGS:
            raise ValidationError(f"unknown task tag {tag!r} in mixture")
    probs = probs / probs.sum()
    return [tags[i] for i in rng.choice(len(tags), size=n, p=probs)]


@dataclass(frozen=True)
class CorpusParams:
    """Knobs for synthetic corpus generation."""

    min_length: int = 64
    max_length: int = 160
    horizon: int = 32
    noise: float = 0.05
    k_shot_max: int = 2
    anomaly_amplitude: float = 5.0
    anomaly_mode: str = "direct"
    translate_max_points: int = 12
    frequency_pool: tuple = ("H", "D", "W", "M", None)
    proportions: Optional[dict] = None


def _random_spec(rng: np.random.Generator, params: CorpusParams,
                 generator: Optional[str] = None,
                 length: Optional[int] = None) -> SynthSpec:
    if generator is None:
        generator = GENERATORS[int(rng.integers(len(GENERATORS)))]
    if length is None:
        length = int(rng.integers(params.min_length, params.max_length + 1))
    freq = params.frequency_pool[int(rng.integers(len(params.frequency_pool)))]
    return SynthSpec(
        generator=generator,
        length=length,
        seed=int(rng.integers(2**31)),
        amplitude=float(rng.uniform(0.5, 3.0)),
        period=float(rng.uniform(8.0, 48.0)),
        phase=float(rng.uniform(0.0, 2.0 * math.pi)),
        drift=float(rng.uniform(-0.05, 0.05)),
        noise=params.noise,
        ar_coeff=float(rng.uniform(0.3, 0.95)),
        frequency=freq,
    )


def _label_spec(rng: np.random.Generator, params: CorpusParams, label: str) -> SynthSpec:
    spec = _random_spec(rng, params, generator=label)
    if label == "noise":
        return SynthSpec(**{**spec.__dict__, "noise": max(spec.noise, 0.5)})
    if label == "trend":
        drift = float(rng.uniform(0.02, 0.08)) * (1.0 if rng.random() < 0.5 else -1.0)
        return SynthSpec(**{**spec.__dict__, "drift": drift})
    return spec


def generate_example(
    task_tag: str, rng: np.random.Generator, params: CorpusParams
) -> InterleavedExample:
    """Build one synthetic example of the given task family."""
    if task_tag == "forecast":
        length = int(rng.integers(params.min_length, params.max_length + 1))
        spec = _random_spec(rng, params, length=length + params.horizon)
        return make_forecast_example(gen_signal(spec), params.horizon, rng=rng)
    if task_tag == "classify":
        label = CLASS_LABELS[int(rng.integers(len(CLASS_LABELS)))]
        k = int(rng.integers(0, params.k_shot_max + 1))
        shots = []
        for _ in range(k):
            shot_label = CLASS_LABELS[int(rng.integers(len(CLASS_LABELS)))]
            shots.append((gen_signal(_label_spec(rng, params, shot_label)), shot_label))
        series = gen_signal(_label_spec(rng, params, label))
        return make_classification_example(
            series, label, CLASS_LABELS, k_shot=k, shots=shots, rng=rng
        )
    if task_tag == "anomaly":
        spec = _random_spec(
            rng, params,
            generator=("sine", "square", "composite")[int(rng.integers(3))],
        )
        clean = gen_signal(spec)
        n_spans = int(rng.integers(1, 3))
        corrupted, spans = inject_anomalies(
            clean, rng, n_spans, amplitude=params.anomaly_amplitude
        )
        return make_anomaly_example(
            corrupted, spans, mode=params.anomaly_mode, clean=clean, rng=rng
        )
    if task_tag == "qa":
        kind = QA_KINDS[int(rng.integers(len(QA_KINDS)))]
        spec = _random_spec(rng, params)
        series = gen_signal(spec)
        threshold = float(np.percentile(series.values, 75)) if kind == "exceeds" else None
        return make_qa_example(series, kind, threshold=threshold, rng=rng)
    if task_tag == "translate":
        length = int(rng.integers(4, params.translate_max_points + 1))
        spec = _random_spec(rng, params, length=length)
        direction = "ts_to_text" if rng.random() < 0.5 else "text_to_ts"
        return make_translate_example(gen_signal(spec), direction, rng=rng)
    if task_tag == "stats":
        spec = _random_spec(rng, params)
        kind = "seven_stats" if rng.random() < 0.7 else "mean_std"
        return make_stats_example(gen_signal(spec), kind, rng=rng)
    if task_tag == "raw":
        spec = _random_spec(rng, params)
        return make_raw_example([gen_signal(spec)])
    raise ValidationError(f"unknown task tag {task_tag!r}")


def build_corpus(
    n: int, seed: int, params: Optional[CorpusParams] = None
) -> list[InterleavedExample]:
    """Generate a task mixture of n examples, deterministic in the seed."""
    if n < 1:
        raise ValidationError("corpus size must be >= 1")
    params = params or CorpusParams()
    proportions = params.proportions or DEFAULT_MIXTURE
    rng = np.random.default_rng(seed)
    tags = draw_task_tags(proportions, n, rng)
    return [generate_example(tag, rng, params) for tag in tags]


# ---------------------------------------------------------------------------
# Toy text corpus

_TEXT_SUBJECTS = (
    "the sensor", "the series", "the daily load", "the signal",
    "the meter", "the hourly feed", "the residual", "the baseline",
)
_TEXT_VERBS = (
    "rises", "falls", "oscillates", "drifts", "saturates",
    "stabilizes", "spikes", "flattens",
)
_TEXT_QUALIFIERS = (
    "slowly", "sharply", "every morning", "after the spike",
    "near the mean", "over the weekend", "within one cycle", "at night",
)
_TEXT_TAILS = (
    "before reverting", "and then settles", "without warning",
    "as expected", "until the next reset", "despite the noise",
)


def build_text_corpus(
    n: int, seed: int, numeric_fraction: float = 0.25
) -> list[InterleavedExample]:
    """Tiny templated prose for language pretraining and retention checks.

    The vocabulary is deliberately small so a toy model can fit it; a slice
    of the sentences carries numbers to keep digits in distribution.
    """
    if n < 1:
        raise ValidationError("corpus size must be >= 1")
    if not (0.0 <= numeric_fraction <= 1.0):
        raise ValidationError("numeric_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    examples = []
    for _ in range(n):
        if rng.random() < numeric_fraction:
            a, b = rng.uniform(-10, 10, size=2)
            steps = int(rng.integers(2, 50))
            text = (
                f"the mean moved from {a:.1f} to {b:.1f} "
                f"in {steps} steps."
            )
        else:
            text = " ".join((
                _TEXT_SUBJECTS[int(rng.integers(len(_TEXT_SUBJECTS)))],
                _TEXT_VERBS[int(rng.integers(len(_TEXT_VERBS)))],
                _TEXT_QUALIFIERS[int(rng.integers(len(_TEXT_QUALIFIERS)))],
                _TEXT_TAILS[int(rng.integers(len(_TEXT_TAILS)))],
            )) + "."
        examples.append(make_raw_example([text]))
    return examples
