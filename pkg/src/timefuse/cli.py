"""Command-line front end: data synthesis, the training curriculum, and
inference over saved checkpoints.

Every command takes ``--config FILE`` plus ``--set section.key=value``
overrides (overrides win) and echoes the fully resolved config into its
output directory, so any artifact can be traced back to the exact settings
that produced it. Artifacts also carry the config hash and master seed.

Exit codes: 0 success, 1 runtime failure, 2 unknown command, 3 bad config
or usage.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import struct
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import (
    MAGIC,
    BUNDLE_FILE,
    collect_rng_state,
    load_checkpoint,
    save_checkpoint,
)
from .codec import pretrain_codec
from .configs import (
    AppConfig,
    ConfigError,
    config_hash,
    config_schema,
    resolve_config,
    write_resolved_config,
)
from .corpus import (
    CLASS_LABELS,
    QA_KINDS,
    TASK_TAGS,
    CorpusParams,
    InterleavedExample,
    TsSegment,
    TextSegment,
    build_corpus,
    build_text_corpus,
    format_anomaly_spans,
    format_values,
    make_classification_example,
    make_forecast_example,
    make_qa_example,
    points_to_spans,
    read_corpus,
    write_corpus,
)
from .errors import ValidationError
from .evaluate import detect_anomalies, run_eval
from .fusion import FusionAdapters, build_token_stream
from .lm import (
    LM,
    ByteTokenizer,
    GenPolicy,
    GenText,
    GenTS,
    ModelBundle,
    generate,
    learn_merges,
)
from .signal import Series
from .training import run_stage, stage_plan

ENV_OUTPUT_ROOT = "TIMEFUSE_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

# A stage may only start from its predecessor's checkpoint.
_STAGE_REQUIRES = {"align": "codec", "pretrain": "align", "sft": "pretrain"}

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_UNKNOWN_COMMAND = 2
EXIT_CONFIG = 3


def _schema_epilog() -> str:
    lines = ["config keys (settable via --set KEY=VALUE):"]
    for key, (tp, default) in config_schema().items():
        lines.append(f"  {key} ({tp.__name__}, default {default!r})")
    return "\n".join(lines)


def _make_parser(command: str, description: str) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=f"timefuse {command}",
        description=description,
        epilog=_schema_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--config", metavar="FILE",
                        help="JSON config file")
    parser.add_argument("--set", metavar="KEY=VALUE", action="append",
                        default=[], dest="overrides",
                        help="override one config value (repeatable)")
    parser.add_argument("--out", metavar="DIR",
                        help=f"output root (default ${ENV_OUTPUT_ROOT} "
                             f"or ./{DEFAULT_OUTPUT_ROOT})")
    return parser


def _out_root(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(ENV_OUTPUT_ROOT, DEFAULT_OUTPUT_ROOT))


def _resolve(args) -> AppConfig:
    return resolve_config(args.config, args.overrides)


def _read_series(path: str, frequency: Optional[str] = None) -> Series:
    """Load a series from JSON ({'values': [...]} or a bare list) or from
    numeric text (whitespace columns; the last column is the value)."""
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"input file not found: {p}")
    if p.suffix == ".json":
        payload = json.loads(p.read_text())
        if isinstance(payload, dict):
            values = payload.get("values")
            frequency = frequency or payload.get("frequency")
        else:
            values = payload
        if not isinstance(values, list) or not values:
            raise ValidationError(f"{p}: expected a non-empty value list")
        return Series(np.asarray(values, dtype=np.float64), frequency)
    data = np.loadtxt(str(p), ndmin=2)
    if data.size == 0:
        raise ValidationError(f"{p}: no numeric data")
    return Series(data[:, -1].astype(np.float64), frequency)


def _load_bundle(path: Path) -> tuple[ModelBundle, dict]:
    bundle, meta, _ = load_checkpoint(path)
    bundle.eval_mode()
    return bundle, meta


def _write_artifact(path: Optional[str], payload: dict) -> None:
    if path is None:
        return
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _corpus_params(cfg: AppConfig) -> CorpusParams:
    d = cfg.data
    return CorpusParams(
        min_length=d.min_length, max_length=d.max_length, horizon=d.horizon,
        noise=d.noise, anomaly_amplitude=d.anomaly_amplitude,
    )


def _mixed_split(
    n: int, text_fraction: float, params: CorpusParams, seeds: Sequence[int]
) -> list[InterleavedExample]:
    """Task mixture plus a slice of pure text, shuffled deterministically."""
    n_text = int(round(n * text_fraction))
    n_ts = n - n_text
    examples: list[InterleavedExample] = []
    if n_ts:
        examples.extend(build_corpus(n_ts, int(seeds[0]), params))
    if n_text:
        examples.extend(build_text_corpus(n_text, int(seeds[1])))
    rng = np.random.default_rng(int(seeds[2]))
    order = rng.permutation(len(examples))
    return [examples[i] for i in order]


# ---------------------------------------------------------------------------
# Commands

def cmd_synth_data(argv: Sequence[str]) -> int:
    parser = _make_parser("synth-data", "Generate train/val corpus shards.")
    args = parser.parse_args(argv)
    cfg = _resolve(args)
    h = config_hash(cfg)
    data_dir = _out_root(args) / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(cfg.seed).generate_state(6)
    params = _corpus_params(cfg)
    train = _mixed_split(cfg.data.n_train, cfg.data.text_fraction,
                         params, seeds[0:3])
    val = _mixed_split(cfg.data.n_val, cfg.data.text_fraction,
                       params, seeds[3:6])
    write_corpus(data_dir / "train.jsonl", train, config_hash=h, seed=cfg.seed)
    write_corpus(data_dir / "val.jsonl", val, config_hash=h, seed=cfg.seed)
    write_resolved_config(cfg, data_dir)
    print(f"wrote {len(train)} train / {len(val)} val examples to {data_dir}")
    return EXIT_OK


def _corpus_series(examples: Sequence[InterleavedExample]) -> list[Series]:
    return [seg.series for ex in examples for seg in ex.segments
            if isinstance(seg, TsSegment)]


def _corpus_texts(examples: Sequence[InterleavedExample]) -> list[str]:
    return [seg.text for ex in examples for seg in ex.segments
            if isinstance(seg, TextSegment) and seg.text]


def cmd_pretrain_codec(argv: Sequence[str]) -> int:
    parser = _make_parser("pretrain-codec",
                          "Train the patch codec and seed a model bundle.")
    parser.add_argument("--data", metavar="FILE",
                        help="training corpus (default OUT/data/train.jsonl)")
    args = parser.parse_args(argv)
    cfg = _resolve(args)
    h = config_hash(cfg)
    root = _out_root(args)
    data_path = Path(args.data) if args.data else root / "data" / "train.jsonl"
    _, examples = read_corpus(data_path)
    series = _corpus_series(examples)
    codec, trace = pretrain_codec(series, cfg.codec, cfg.codec_opt)

    n_merges = cfg.lm.vocab_size - ByteTokenizer().vocab_size
    merges = learn_merges(_corpus_texts(examples), n_merges) if n_merges else []
    bundle = ModelBundle(
        tokenizer=ByteTokenizer(merges),
        codec=codec,
        adapters=FusionAdapters(cfg.fusion),
        lm=LM(cfg.lm),
    )
    ckpt_dir = root / "codec"
    save_checkpoint(
        ckpt_dir, bundle,
        metadata={"stage": "codec", "config_hash": h, "seed": cfg.seed,
                  "steps": trace[-1]["step"] if trace else 0},
        rng_state=collect_rng_state(),
    )
    with open(root / "codec-metrics.jsonl", "w") as fh:
        for row in trace:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    write_resolved_config(cfg, ckpt_dir)
    final = trace[-1] if trace else {}
    print(f"codec checkpoint at {ckpt_dir} "
          f"(final recon mse {final.get('recon_mse', float('nan')):.5f})")
    return EXIT_OK


def _cmd_stage(stage: str, argv: Sequence[str]) -> int:
    parser = _make_parser(stage, f"Run the {stage} training stage.")
    parser.add_argument("--data", metavar="FILE",
                        help="training corpus (default OUT/data/train.jsonl)")
    parser.add_argument("--init", metavar="DIR",
                        help="starting checkpoint (default the previous "
                             "stage under OUT)")
    parser.add_argument("--force", action="store_true",
                        help="skip the stage-ordering check on --init")
    args = parser.parse_args(argv)
    cfg = _resolve(args)
    h = config_hash(cfg)
    root = _out_root(args)

    required = _STAGE_REQUIRES[stage]
    init_dir = Path(args.init) if args.init else root / required
    bundle, meta = _load_bundle(init_dir)
    if not args.force and meta.get("stage") != required:
        raise ConfigError(
            f"{stage} must start from a {required!r} checkpoint, but "
            f"{init_dir} holds stage {meta.get('stage')!r} (use --force "
            f"to override)"
        )

    data_path = Path(args.data) if args.data else root / "data" / "train.jsonl"
    _, examples = read_corpus(data_path)
    plan = stage_plan(stage, getattr(cfg.budget, stage))
    bundle, trace = run_stage(
        plan, examples, bundle, cfg.train, cfg.loss, out_dir=root,
        extra_meta={"config_hash": h, "seed": cfg.seed},
    )
    write_resolved_config(cfg, root / stage)
    final = trace[-1] if trace else {}
    print(f"{stage} checkpoint at {root / stage} "
          f"(steps {final.get('step', 0)}, total {final.get('total', float('nan')):.4f}, "
          f"ce {final.get('ce', float('nan')):.4f})")
    return EXIT_OK


def cmd_align(argv: Sequence[str]) -> int:
    return _cmd_stage("align", argv)


def cmd_pretrain(argv: Sequence[str]) -> int:
    return _cmd_stage("pretrain", argv)


def cmd_sft(argv: Sequence[str]) -> int:
    return _cmd_stage("sft", argv)


def _add_inference_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", metavar="DIR",
                        help="model checkpoint (default OUT/sft)")
    parser.add_argument("--input", metavar="FILE", required=True,
                        help="series file (.json or numeric text)")
    parser.add_argument("--frequency", metavar="F",
                        help="frequency tag for text inputs (e.g. H, D)")
    parser.add_argument("--save", metavar="FILE",
                        help="also write the result as a JSON artifact")


def _inference_setup(args) -> tuple[ModelBundle, Series, AppConfig, str]:
    cfg = _resolve(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else _out_root(args) / "sft"
    bundle, _ = _load_bundle(ckpt)
    series = _read_series(args.input, args.frequency)
    return bundle, series, cfg, config_hash(cfg)


def cmd_forecast(argv: Sequence[str]) -> int:
    parser = _make_parser("forecast", "Forecast the continuation of a series.")
    _add_inference_args(parser)
    parser.add_argument("--horizon", type=int, metavar="N",
                        help="steps to forecast (default data.horizon)")
    args = parser.parse_args(argv)
    bundle, series, cfg, h = _inference_setup(args)
    horizon = args.horizon or cfg.data.horizon
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    # The response slot is a placeholder; only the prompt half is used.
    placeholder = Series(np.full(horizon, series.values[-1]), series.frequency)
    ex = make_forecast_example(series, horizon, future=placeholder,
                               rng=np.random.default_rng(cfg.seed))
    prompt = build_token_stream(ex, bundle.tokenizer, bundle.codec,
                                include_response=False)
    budget = math.ceil(horizon / bundle.codec.cfg.p)
    out = generate(prompt, bundle, GenPolicy(ts_slot_budget=budget),
                   max_new=budget + 8, seed=cfg.seed)
    pred = None
    for seg in out.segments:
        if isinstance(seg, GenTS):
            pred = seg.series.values
            break
    if pred is None:
        pred = np.full(horizon, series.values[-1])
    if len(pred) < horizon:
        pred = np.concatenate([pred, np.full(horizon - len(pred), pred[-1])])
    pred = pred[:horizon]
    print(format_values(pred))
    _write_artifact(args.save, {
        "task": "forecast", "config_hash": h, "seed": cfg.seed,
        "horizon": horizon, "frequency": series.frequency,
        "values": [float(v) for v in pred],
    })
    return EXIT_OK


def cmd_classify(argv: Sequence[str]) -> int:
    parser = _make_parser("classify", "Classify a series over a label set.")
    _add_inference_args(parser)
    parser.add_argument("--labels", metavar="A,B,...",
                        default=",".join(CLASS_LABELS),
                        help="comma-separated label set")
    args = parser.parse_args(argv)
    bundle, series, cfg, h = _inference_setup(args)
    labels = tuple(s.strip() for s in args.labels.split(",") if s.strip())
    if len(labels) < 2:
        raise ConfigError("need at least two labels")
    ex = make_classification_example(series, labels[0], labels,
                                     rng=np.random.default_rng(cfg.seed))
    prompt = build_token_stream(ex, bundle.tokenizer, bundle.codec,
                                include_response=False)
    out = generate(prompt, bundle, GenPolicy(kind="constrained", labels=labels),
                   seed=cfg.seed)
    label = out.segments[0].text
    print(label)
    _write_artifact(args.save, {
        "task": "classify", "config_hash": h, "seed": cfg.seed,
        "labels": list(labels), "label": label,
    })
    return EXIT_OK


def cmd_detect(argv: Sequence[str]) -> int:
    parser = _make_parser("detect", "Flag anomalous points in a series.")
    _add_inference_args(parser)
    args = parser.parse_args(argv)
    bundle, series, cfg, h = _inference_setup(args)
    points, _ = detect_anomalies(series, bundle.codec,
                                 threshold_sigma=cfg.eval.threshold_sigma)
    spans = points_to_spans(points)
    print(format_anomaly_spans(spans))
    _write_artifact(args.save, {
        "task": "anomaly", "config_hash": h, "seed": cfg.seed,
        "threshold_sigma": cfg.eval.threshold_sigma,
        "spans": [list(s) for s in spans],
    })
    return EXIT_OK


def cmd_qa(argv: Sequence[str]) -> int:
    parser = _make_parser("qa", "Answer a templated question about a series.")
    _add_inference_args(parser)
    parser.add_argument("--kind", choices=QA_KINDS, default="trend_direction",
                        help="question template")
    parser.add_argument("--threshold", type=float, metavar="X",
                        help="threshold for 'exceeds' questions")
    args = parser.parse_args(argv)
    bundle, series, cfg, h = _inference_setup(args)
    ex = make_qa_example(series, args.kind, threshold=args.threshold,
                         rng=np.random.default_rng(cfg.seed))
    prompt = build_token_stream(ex, bundle.tokenizer, bundle.codec,
                                include_response=False)
    out = generate(prompt, bundle, GenPolicy(), max_new=16, seed=cfg.seed)
    answer = "".join(
        seg.text for seg in out.segments if isinstance(seg, GenText)
    ).strip()
    print(answer)
    _write_artifact(args.save, {
        "task": "qa", "config_hash": h, "seed": cfg.seed,
        "kind": args.kind, "answer": answer,
    })
    return EXIT_OK


def cmd_eval(argv: Sequence[str]) -> int:
    parser = _make_parser("eval", "Evaluate a checkpoint on a corpus file.")
    parser.add_argument("--task", required=True, choices=sorted(TASK_TAGS),
                        help="task tag to evaluate")
    parser.add_argument("--data", metavar="FILE", required=True,
                        help="evaluation corpus shard")
    parser.add_argument("--checkpoint", metavar="DIR",
                        help="model checkpoint (default OUT/sft)")
    parser.add_argument("--baseline", action="store_true",
                        help="score the seasonal-naive baseline as the model")
    args = parser.parse_args(argv)
    cfg = _resolve(args)
    root = _out_root(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else root / "sft"
    bundle, _ = _load_bundle(ckpt)
    out_dir = root / f"eval-{args.task}"
    report = run_eval(
        args.task, args.data, bundle,
        seed=cfg.seed, config_hash=config_hash(cfg), out_dir=out_dir,
        season_override=cfg.eval.season_override or None,
        baseline_as_model=args.baseline,
        threshold_sigma=cfg.eval.threshold_sigma,
        max_examples=cfg.eval.max_examples or None,
    )
    write_resolved_config(cfg, out_dir)
    metrics = ", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in sorted(report.metrics.items()))
    print(f"{args.task}: {metrics} (n={report.n_examples}, report in {out_dir})")
    return EXIT_OK


def cmd_inspect_checkpoint(argv: Sequence[str]) -> int:
    parser = argparse.ArgumentParser(
        prog="timefuse inspect-checkpoint",
        description="Print checkpoint metadata without loading the model.",
    )
    parser.add_argument("path", help=f"checkpoint directory or {BUNDLE_FILE}")
    args = parser.parse_args(argv)
    path = Path(args.path)
    if path.is_dir():
        path = path / BUNDLE_FILE
    if not path.is_file():
        raise ValidationError(f"no checkpoint at {args.path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
    n_params = sum(
        int(np.prod(entry["shape"])) for entry in header["tensors"]
    )
    print(f"checkpoint: {path}")
    print(f"format version: {header.get('format_version')}")
    for key, value in sorted(header.get("metadata", {}).items()):
        print(f"  {key}: {value}")
    for name in ("codec_config", "fusion_config", "lm_config"):
        print(f"{name}: {json.dumps(header[name], sort_keys=True)}")
    print(f"merges: {len(header.get('merges', []))}")
    print(f"tensors: {len(header['tensors'])} ({n_params} parameters)")
    return EXIT_OK


COMMANDS = {
    "synth-data": (cmd_synth_data, "generate train/val corpus shards"),
    "pretrain-codec": (cmd_pretrain_codec, "train the patch codec"),
    "align": (cmd_align, "stage 1: fit adapters to the frozen backbone"),
    "pretrain": (cmd_pretrain, "stage 2: joint training on the mixture"),
    "sft": (cmd_sft, "stage 3: response-only fine-tuning"),
    "forecast": (cmd_forecast, "forecast a series continuation"),
    "classify": (cmd_classify, "classify a series over a label set"),
    "detect": (cmd_detect, "flag anomalous points in a series"),
    "qa": (cmd_qa, "answer a templated question about a series"),
    "eval": (cmd_eval, "score a checkpoint on a corpus file"),
    "inspect-checkpoint": (cmd_inspect_checkpoint, "print checkpoint metadata"),
}


def _usage() -> str:
    lines = ["usage: timefuse COMMAND [options]", "", "commands:"]
    width = max(len(name) for name in COMMANDS)
    for name, (_, help_text) in COMMANDS.items():
        lines.append(f"  {name:<{width}}  {help_text}")
    lines.append("")
    lines.append("run 'timefuse COMMAND --help' for per-command options")
    return "\n".join(lines)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = list(sys.argv[1:] if argv is None else argv)
    if not args or args[0] in ("-h", "--help"):
        print(_usage())
        return EXIT_OK
    command, rest = args[0], args[1:]
    if command not in COMMANDS:
        print(f"timefuse: unknown command {command!r}\n\n{_usage()}",
              file=sys.stderr)
        return EXIT_UNKNOWN_COMMAND
    handler, _ = COMMANDS[command]
    try:
        return handler(rest)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage errors; fold the
        # latter into the config-error code.
        code = exc.code if isinstance(exc.code, int) else EXIT_RUNTIME
        return EXIT_OK if code == 0 else EXIT_CONFIG
    except ConfigError as exc:
        print(f"timefuse {command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"timefuse {command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
