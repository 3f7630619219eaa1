"""Deterministic checkpointing for model bundles.

A checkpoint is a directory:

    model.tfc       all weights plus configs in a single binary container
    config.json     configs and run metadata, canonical JSON
    tokenizer.json  learned merge table
    rng.json        RNG state captured by the trainer (may be empty)

The ``.tfc`` container is magic bytes, a little-endian uint64 header length,
a canonical-JSON header, then raw tensor bytes concatenated in header order.
Nothing time- or host-dependent is written, so saving a loaded checkpoint
reproduces it byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .codec import Codec, CodecConfig
from .errors import ValidationError
from .fusion import FusionAdapters, FusionConfig
from .lm import LM, ByteTokenizer, LMConfig, ModelBundle

MAGIC = b"TFC1"
FORMAT_VERSION = 1

BUNDLE_FILE = "model.tfc"
CONFIG_FILE = "config.json"
TOKENIZER_FILE = "tokenizer.json"
RNG_FILE = "rng.json"

_TORCH_TO_NP = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.int8: "<i1",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_NP_TO_TORCH = {v: k for k, v in _TORCH_TO_NP.items()}


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _bundle_tensors(bundle: ModelBundle) -> dict[str, torch.Tensor]:
    out: dict[str, torch.Tensor] = {}
    modules = {"codec": bundle.codec, "adapters": bundle.adapters, "lm": bundle.lm}
    for prefix, module in modules.items():
        for key, value in module.state_dict().items():
            out[f"{prefix}.{key}"] = value
    return out


def save_bundle_file(path: Union[str, Path], bundle: ModelBundle,
                     metadata: Optional[dict] = None) -> None:
    """Write the bundle (weights, configs, merges, metadata) to one file."""
    tensors = _bundle_tensors(bundle)
    entries = []
    payload = bytearray()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _TORCH_TO_NP:
            raise ValidationError(f"unsupported tensor dtype {t.dtype} for {name}")
        dtype = _TORCH_TO_NP[t.dtype]
        raw = t.numpy().astype(np.dtype(dtype), copy=False).tobytes()
        entries.append({
            "name": name,
            "dtype": dtype,
            "shape": list(t.shape),
            "offset": len(payload),
            "nbytes": len(raw),
        })
        payload.extend(raw)
    header = _canonical({
        "format_version": FORMAT_VERSION,
        "codec_config": asdict(bundle.codec.cfg),
        "fusion_config": asdict(bundle.adapters.cfg),
        "lm_config": asdict(bundle.lm.cfg),
        "merges": [list(pair) for pair in bundle.tokenizer.merges],
        "metadata": metadata or {},
        "tensors": entries,
    })
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def load_bundle_file(path: Union[str, Path]) -> tuple[ModelBundle, dict]:
    """Reconstruct a bundle from a container file; returns (bundle, metadata)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    if header.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"{path}: unsupported format version {header.get('format_version')}"
        )
    tokenizer = ByteTokenizer([tuple(p) for p in header["merges"]])
    bundle = ModelBundle(
        tokenizer=tokenizer,
        codec=Codec(CodecConfig(**header["codec_config"])),
        adapters=FusionAdapters(FusionConfig(**header["fusion_config"])),
        lm=LM(LMConfig(**header["lm_config"])),
    )
    states: dict[str, dict[str, torch.Tensor]] = {"codec": {}, "adapters": {}, "lm": {}}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        arr = arr.reshape(entry["shape"]).copy()
        tensor = torch.from_numpy(arr).to(_NP_TO_TORCH[entry["dtype"]])
        prefix, key = entry["name"].split(".", 1)
        if prefix not in states:
            raise ValidationError(f"{path}: unknown tensor group {prefix!r}")
        states[prefix][key] = tensor
    bundle.codec.load_state_dict(states["codec"])
    bundle.adapters.load_state_dict(states["adapters"])
    bundle.lm.load_state_dict(states["lm"])
    bundle.eval_mode()
    return bundle, header["metadata"]


def save_checkpoint(dir_path: Union[str, Path], bundle: ModelBundle,
                    metadata: Optional[dict] = None,
                    rng_state: Optional[dict] = None) -> Path:
    """Write the full checkpoint directory; returns its path."""
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    meta = metadata or {}
    save_bundle_file(out / BUNDLE_FILE, bundle, meta)
    (out / CONFIG_FILE).write_bytes(_canonical({
        "format_version": FORMAT_VERSION,
        "codec_config": asdict(bundle.codec.cfg),
        "fusion_config": asdict(bundle.adapters.cfg),
        "lm_config": asdict(bundle.lm.cfg),
        "metadata": meta,
    }) + b"\n")
    (out / TOKENIZER_FILE).write_bytes(_canonical({
        "merges": [list(pair) for pair in bundle.tokenizer.merges],
    }) + b"\n")
    (out / RNG_FILE).write_bytes(_canonical(rng_state or {}) + b"\n")
    return out


def load_checkpoint(dir_path: Union[str, Path]) -> tuple[ModelBundle, dict, dict]:
    """Read a checkpoint directory; returns (bundle, metadata, rng_state)."""
    root = Path(dir_path)
    bundle_path = root / BUNDLE_FILE
    if not bundle_path.is_file():
        raise ValidationError(f"{root}: missing {BUNDLE_FILE}")
    bundle, metadata = load_bundle_file(bundle_path)
    rng_path = root / RNG_FILE
    rng_state = json.loads(rng_path.read_text()) if rng_path.is_file() else {}
    return bundle, metadata, rng_state


def collect_rng_state(numpy_rng: Optional[np.random.Generator] = None) -> dict:
    """Snapshot the global torch RNG (and optionally a numpy generator)."""
    state = {"torch": torch.get_rng_state().numpy().tobytes().hex()}
    if numpy_rng is not None:
        state["numpy"] = numpy_rng.bit_generator.state
    return state


def restore_rng_state(state: dict,
                      numpy_rng: Optional[np.random.Generator] = None) -> None:
    """Restore RNG state captured by collect_rng_state."""
    if "torch" in state:
        raw = np.frombuffer(bytes.fromhex(state["torch"]), dtype=np.uint8)
        torch.set_rng_state(torch.from_numpy(raw.copy()))
    if numpy_rng is not None and "numpy" in state:
        numpy_rng.bit_generator.state = state["numpy"]
