import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from timefuse.corpus import (
    CLASS_LABELS,
    DEFAULT_MIXTURE,
    CorpusParams,
    InterleavedExample,
    SynthSpec,
    TextSegment,
    TsSegment,
    build_corpus,
    build_text_corpus,
    compute_stats,
    draw_task_tags,
    format_anomaly_spans,
    format_metadata_line,
    format_stats,
    format_values,
    gen_signal,
    generate_example,
    inject_anomalies,
    make_anomaly_example,
    make_classification_example,
    make_forecast_example,
    make_qa_example,
    make_raw_example,
    make_stats_example,
    make_translate_example,
    normalize_spans,
    parse,
    parse_anomaly_spans,
    parse_metadata_line,
    parse_stats,
    parse_values,
    points_to_spans,
    read_corpus,
    serialize,
    spans_to_points,
    write_corpus,
)
from timefuse.errors import ParseError, ValidationError
from timefuse.signal import Series


# ---------------------------------------------------------------------------
# Generators

def test_sine_closed_form_and_period():
    spec = SynthSpec("sine", length=64, seed=0, amplitude=1.0, period=32.0, phase=0.3)
    s = gen_signal(spec)
    assert s.values[0] == pytest.approx(math.sin(0.3))
    # Noise-free periodicity: x[t] == x[t+32]
    np.testing.assert_allclose(s.values[:32], s.values[32:], atol=1e-12)


def test_gen_signal_is_deterministic():
    spec = SynthSpec("composite", length=100, seed=42, noise=0.2, drift=0.01)
    a, b = gen_signal(spec), gen_signal(spec)
    np.testing.assert_array_equal(a.values, b.values)


def test_ar1_with_zero_coefficient_is_white_noise():
    spec = SynthSpec("ar1", length=20_000, seed=7, noise=1.0, ar_coeff=0.0)
    s = gen_signal(spec)
    assert s.values.std() == pytest.approx(1.0, rel=0.1)
    # Lag-1 autocorrelation of white noise is near zero.
    v = s.values - s.values.mean()
    rho = float(np.dot(v[:-1], v[1:]) / np.dot(v, v))
    assert abs(rho) < 0.05


def test_gen_signal_validates_spec():
    with pytest.raises(ValidationError):
        SynthSpec("sawtooth", length=10, seed=0)
    with pytest.raises(ValidationError):
        SynthSpec("sine", length=0, seed=0)
    with pytest.raises(ValidationError):
        SynthSpec("sine", length=10, seed=0, noise=-1.0)


def test_inject_anomalies_marks_what_it_corrupts():
    clean = gen_signal(SynthSpec("sine", length=200, seed=3))
    rng = np.random.default_rng(5)
    corrupted, spans = inject_anomalies(clean, rng, n_spans=2, amplitude=5.0)
    assert spans
    changed = set(np.where(corrupted.values != clean.values)[0].tolist())
    assert changed == spans_to_points(spans)


def test_inject_anomalies_kind_restriction():
    clean = gen_signal(SynthSpec("sine", length=200, seed=3))
    rng = np.random.default_rng(7)
    _, spike_spans = inject_anomalies(clean, rng, n_spans=4, kinds=("spike",))
    assert spike_spans and all(b - a + 1 <= 2 for a, b in spike_spans)
    _, shift_spans = inject_anomalies(clean, rng, n_spans=4, kinds=("shift",))
    assert shift_spans and all(4 <= b - a + 1 <= 12 for a, b in shift_spans)
    with pytest.raises(ValidationError):
        inject_anomalies(clean, rng, n_spans=1, kinds=())
    with pytest.raises(ValidationError):
        inject_anomalies(clean, rng, n_spans=1, kinds=("spike", "dropout"))


# ---------------------------------------------------------------------------
# Task constructors

def test_forecast_example_splits_history_and_future():
    series = gen_signal(SynthSpec("sine", length=96, seed=0, frequency="H"))
    ex = make_forecast_example(series, horizon=32)
    prompt_ts = [s for s in ex.prompt_segments() if isinstance(s, TsSegment)]
    response_ts = [s for s in ex.response_segments() if isinstance(s, TsSegment)]
    assert len(prompt_ts) == 1 and len(prompt_ts[0].series) == 64
    assert len(response_ts) == 1 and len(response_ts[0].series) == 32
    np.testing.assert_array_equal(
        np.concatenate([prompt_ts[0].series.values, response_ts[0].series.values]),
        series.values,
    )
    header = ex.segments[0]
    assert isinstance(header, TextSegment)
    meta = parse_metadata_line(header.text.splitlines()[-1])
    assert meta["sample frequency"] == "H"
    assert meta["length"] == "64 points"


def test_forecast_context_text_precedes_the_signal():
    series = gen_signal(SynthSpec("sine", length=96, seed=0))
    ex = make_forecast_example(series, horizon=32, context_text="Sensor was recalibrated.")
    kinds = [type(s).__name__ for s in ex.prompt_segments()]
    assert kinds == ["TextSegment", "TextSegment", "TsSegment"]
    assert ex.segments[1].text == "Sensor was recalibrated."


def test_forecast_rejects_short_history():
    series = gen_signal(SynthSpec("sine", length=16, seed=0))
    with pytest.raises(ValidationError):
        make_forecast_example(series, horizon=16)


def test_classification_zero_shot_states_label_set_once():
    series = gen_signal(SynthSpec("square", length=64, seed=1))
    ex = make_classification_example(series, "square", CLASS_LABELS)
    prompt_text = " ".join(
        s.text for s in ex.prompt_segments() if isinstance(s, TextSegment)
    )
    assert prompt_text.count(", ".join(CLASS_LABELS)) == 1
    assert ex.response_segments()[0].text == "square"


def test_classification_four_shots_precede_query():
    rng = np.random.default_rng(0)
    shots = [
        (gen_signal(SynthSpec("sine", length=64, seed=i)), "sine") for i in range(4)
    ]
    series = gen_signal(SynthSpec("trend", length=64, seed=9, drift=0.05))
    ex = make_classification_example(
        series, "trend", CLASS_LABELS, k_shot=4, shots=shots, rng=rng
    )
    ts_segments = [s for s in ex.prompt_segments() if isinstance(s, TsSegment)]
    assert len(ts_segments) == 5
    # The query series is the last one.
    np.testing.assert_array_equal(ts_segments[-1].series.values, series.values)


def test_classification_rejects_label_outside_set():
    series = gen_signal(SynthSpec("sine", length=64, seed=0))
    with pytest.raises(ValidationError):
        make_classification_example(series, "sawtooth", CLASS_LABELS)


def test_anomaly_direct_uses_span_text():
    series = gen_signal(SynthSpec("sine", length=256, seed=0))
    ex = make_anomaly_example(series, [(145, 162), (203, 210)], mode="direct")
    assert ex.response_segments()[0].text == (
        "Anomalies detected at timestamps 145-162, 203-210"
    )


def test_anomaly_reconstruction_answers_with_clean_series():
    clean = gen_signal(SynthSpec("sine", length=128, seed=0))
    rng = np.random.default_rng(1)
    corrupted, spans = inject_anomalies(clean, rng, n_spans=1)
    ex = make_anomaly_example(corrupted, spans, mode="reconstruction", clean=clean)
    answer = ex.response_segments()[0]
    assert isinstance(answer, TsSegment)
    np.testing.assert_array_equal(answer.series.values, clean.values)
    with pytest.raises(ValidationError):
        make_anomaly_example(corrupted, spans, mode="reconstruction")


def test_anomaly_span_formatting_hand_cases():
    assert format_anomaly_spans([(145, 162), (203, 210)]) == (
        "Anomalies detected at timestamps 145-162, 203-210"
    )
    assert format_anomaly_spans([]) == "No anomalies detected."
    assert parse_anomaly_spans("No anomalies detected.") == []
    assert parse_anomaly_spans(
        "Anomalies detected at timestamps 145-162, 203-210"
    ) == [(145, 162), (203, 210)]


def test_anomaly_span_parser_rejects_malformed():
    with pytest.raises(ParseError):
        parse_anomaly_spans("Anomalies detected at timestamps 5-3")
    with pytest.raises(ParseError):
        parse_anomaly_spans("anomalies at 3-5")


spans_strategy = st.lists(
    st.tuples(st.integers(0, 400), st.integers(0, 50)).map(lambda ab: (ab[0], ab[0] + ab[1])),
    max_size=6,
)


@given(spans_strategy)
def test_anomaly_span_roundtrip(spans):
    canonical = normalize_spans(spans)
    assert parse_anomaly_spans(format_anomaly_spans(spans)) == canonical


def test_normalize_spans_merges_overlaps_and_touching():
    assert normalize_spans([(5, 9), (1, 3), (8, 12)]) == [(1, 3), (5, 12)]
    assert normalize_spans([(1, 3), (4, 6)]) == [(1, 6)]
    assert normalize_spans([(1, 3), (5, 6)]) == [(1, 3), (5, 6)]


def test_translate_hand_case_and_inverse():
    assert format_values([1.0, 2.5], precision=2) == "1.00, 2.50"
    np.testing.assert_array_equal(parse_values("1.00, 2.50"), [1.0, 2.5])
    with pytest.raises(ParseError):
        parse_values("1.0, zebra")
    with pytest.raises(ParseError):
        parse_values("")


@given(
    st.lists(st.floats(-100, 100), min_size=1, max_size=20),
    st.integers(0, 6),
)
def test_translate_roundtrip_quantization_bound(values, precision):
    text = format_values(values, precision)
    back = parse_values(text)
    np.testing.assert_allclose(back, values, atol=0.5 * 10.0 ** (-precision) + 1e-12)


def test_translate_examples_in_both_directions():
    series = Series(np.array([1.0, 2.5, -3.25]))
    to_text = make_translate_example(series, "ts_to_text", precision=2)
    assert to_text.response_segments()[0].text == "1.00, 2.50, -3.25"
    to_ts = make_translate_example(series, "text_to_ts", precision=2)
    answer = to_ts.response_segments()[0]
    assert isinstance(answer, TsSegment)
    assert "1.00, 2.50, -3.25" in to_ts.segments[0].text


def test_stats_hand_case():
    stats = compute_stats(Series(np.arange(1.0, 6.0)))
    assert stats["median"] == pytest.approx(3.0)
    assert stats["q1"] == pytest.approx(2.0)
    assert stats["q3"] == pytest.approx(4.0)
    assert stats["min"] == 1.0 and stats["max"] == 5.0
    assert stats["mean"] == pytest.approx(3.0)


def test_stats_constant_series():
    stats = compute_stats(Series(np.full(10, 2.0)))
    assert stats["std"] == 0.0
    assert stats["q1"] == stats["median"] == stats["q3"] == 2.0


def test_stats_response_is_parseable_json():
    ex = make_stats_example(Series(np.arange(1.0, 6.0)), kind="seven_stats")
    parsed = parse_stats(ex.response_segments()[0].text)
    assert parsed["median"] == 3.0
    obj = json.loads(ex.response_segments()[0].text)
    assert list(obj) == ["mean", "std", "median", "q1", "q3", "min", "max"]


def test_stats_mean_std_wording():
    ex = make_stats_example(Series(np.arange(1.0, 6.0)), kind="mean_std")
    assert ex.response_segments()[0].text == "mean = 3.0000, std = 1.4142"


def test_parse_stats_rejects_missing_keys():
    with pytest.raises(ParseError):
        parse_stats('{"mean": 1.0}')


def test_qa_examples_have_closed_form_answers():
    up = gen_signal(SynthSpec("trend", length=64, seed=0, drift=0.1))
    assert make_qa_example(up, "trend_direction").response_segments()[0].text == "increasing"
    down = up.with_values(-up.values)
    assert make_qa_example(down, "trend_direction").response_segments()[0].text == "decreasing"
    hi_first = Series(np.concatenate([np.full(32, 5.0), np.zeros(32)]))
    assert make_qa_example(hi_first, "higher_half").response_segments()[0].text == "first"
    flat = Series(np.zeros(16))
    assert make_qa_example(flat, "exceeds", threshold=1.0).response_segments()[0].text == "no"
    assert make_qa_example(flat, "exceeds", threshold=-1.0).response_segments()[0].text == "yes"


def test_metadata_line_roundtrip_tolerates_unknown_fields():
    line = format_metadata_line("synthetic", "Q-DEC", 66)
    parsed = parse_metadata_line(line)
    assert parsed == {
        "dataset": "synthetic",
        "sample frequency": "Q-DEC",
        "length": "66 points",
    }
    extra = ("Time series metadata: dataset = m3, start = 1977-01-01T00:00:00, "
             "sample frequency = Q-DEC, length = 66 points")
    parsed = parse_metadata_line(extra)
    assert parsed["start"] == "1977-01-01T00:00:00"
    assert parsed["sample frequency"] == "Q-DEC"


def test_example_role_ordering_is_enforced():
    with pytest.raises(ValidationError):
        InterleavedExample(
            (
                TextSegment("answer", role="response"),
                TextSegment("question", role="prompt"),
            ),
            "qa",
        )
    with pytest.raises(ValidationError):
        InterleavedExample((TextSegment("prompt-only", role="prompt"),), "qa")
    with pytest.raises(ValidationError):
        InterleavedExample((), "qa")


# ---------------------------------------------------------------------------
# Serialization

def test_forecast_example_roundtrips_bit_exact():
    series = gen_signal(SynthSpec("composite", length=96, seed=11, noise=0.1, frequency="D"))
    ex = make_forecast_example(series, horizon=32)
    line = serialize(ex)
    back = parse(line)
    assert back == ex
    assert serialize(back) == line


def test_thousand_random_examples_roundtrip():
    examples = build_corpus(1000, seed=123)
    for ex in examples:
        assert parse(serialize(ex)) == ex


def test_parse_errors_name_the_offending_field():
    with pytest.raises(ParseError, match="version"):
        parse('{"version": 99, "task": "qa", "segments": []}')
    with pytest.raises(ParseError, match="task"):
        parse('{"version": 1, "task": "juggling", "segments": [{"kind": "text", "text": "x"}]}')
    with pytest.raises(ParseError, match="segments"):
        parse('{"version": 1, "task": "qa", "segments": []}')
    with pytest.raises(ParseError, match="values"):
        parse('{"version": 1, "task": "raw", "segments": [{"kind": "ts", "role": "response"}]}')
    with pytest.raises(ParseError, match="line 7"):
        parse("not json", line_no=7)


def test_corpus_file_roundtrip(tmp_path):
    examples = build_corpus(20, seed=5)
    path = tmp_path / "shard.jsonl"
    write_corpus(path, examples, config_hash="abc123", seed=5)
    header, back = read_corpus(path)
    assert header["config_hash"] == "abc123"
    assert header["seed"] == 5
    assert header["n_examples"] == 20
    assert back == examples


def test_corpus_write_is_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_corpus(a, build_corpus(50, seed=9), config_hash="h", seed=9)
    write_corpus(b, build_corpus(50, seed=9), config_hash="h", seed=9)
    assert a.read_bytes() == b.read_bytes()


def test_corpus_rejects_headerless_file(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(serialize(make_raw_example(["hello"])) + "\n")
    with pytest.raises(ParseError):
        read_corpus(path)


# ---------------------------------------------------------------------------
# Mixture

@settings(deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_generate_example_is_valid_for_every_tag(seed):
    rng = np.random.default_rng(seed)
    params = CorpusParams()
    for tag in DEFAULT_MIXTURE:
        ex = generate_example(tag, rng, params)
        assert ex.task_tag == tag
        assert parse(serialize(ex)) == ex


def test_mixture_proportions_within_one_percent():
    rng = np.random.default_rng(0)
    tags = draw_task_tags(DEFAULT_MIXTURE, 100_000, rng)
    counts = {t: tags.count(t) / len(tags) for t in DEFAULT_MIXTURE}
    for tag, want in DEFAULT_MIXTURE.items():
        assert abs(counts[tag] - want) <= 0.01, (tag, counts[tag], want)


def test_draw_task_tags_validates_proportions():
    rng = np.random.default_rng(0)
    with pytest.raises(ValidationError):
        draw_task_tags({"forecast": -1.0}, 10, rng)
    with pytest.raises(ValidationError):
        draw_task_tags({"juggling": 1.0}, 10, rng)


def test_build_corpus_deterministic_for_seed():
    a = build_corpus(30, seed=77)
    b = build_corpus(30, seed=77)
    assert a == b
    c = build_corpus(30, seed=78)
    assert a != c


class TestTextCorpus:
    def test_deterministic(self):
        a = build_text_corpus(20, seed=7)
        b = build_text_corpus(20, seed=7)
        assert [e.segments[0].text for e in a] == [e.segments[0].text for e in b]

    def test_count_and_shape(self):
        examples = build_text_corpus(30, seed=0)
        assert len(examples) == 30
        for ex in examples:
            assert len(ex.segments) == 1
            seg = ex.segments[0]
            assert isinstance(seg, TextSegment)
            assert seg.text.endswith(".")
            assert seg.role == "response"

    def test_numeric_fraction_extremes(self):
        none = build_text_corpus(40, seed=1, numeric_fraction=0.0)
        assert not any("moved from" in e.segments[0].text for e in none)
        allnum = build_text_corpus(40, seed=1, numeric_fraction=1.0)
        assert all("moved from" in e.segments[0].text for e in allnum)

    def test_shard_roundtrip(self, tmp_path):
        examples = build_text_corpus(10, seed=3)
        path = tmp_path / "text.jsonl"
        write_corpus(path, examples, seed=3)
        _, loaded = read_corpus(path)
        assert [e.segments[0].text for e in loaded] == [
            e.segments[0].text for e in examples
        ]

    def test_rejects_bad_args(self):
        with pytest.raises(ValidationError):
            build_text_corpus(0, seed=0)
        with pytest.raises(ValidationError):
            build_text_corpus(5, seed=0, numeric_fraction=1.5)


class TestPointsToSpans:
    def test_basic_grouping(self):
        assert points_to_spans({1, 2, 3, 7, 9, 10}) == [(1, 3), (7, 7), (9, 10)]

    def test_empty(self):
        assert points_to_spans(set()) == []

    def test_roundtrip_with_spans_to_points(self):
        spans = [(5, 9), (12, 12), (20, 31)]
        assert points_to_spans(spans_to_points(spans)) == spans

    @given(st.sets(st.integers(min_value=0, max_value=200), max_size=40))
    def test_points_roundtrip_exactly(self, points):
        spans = points_to_spans(points)
        assert spans_to_points(spans) == points
        # Spans are sorted, disjoint, and non-adjacent by construction.
        for (a, b), (c, d) in zip(spans, spans[1:]):
            assert b + 1 < c
