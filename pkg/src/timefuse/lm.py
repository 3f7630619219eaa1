"""A small decoder-only language model with slot-aware generation.

The tokenizer is byte-level with optional learned merges, so any UTF-8 text
(numeric strings included) roundtrips exactly. Generation runs the full
forward pass each step; when the model emits the slot token, the hidden state
that predicted it is decoded into a patch and re-embedded before continuing.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import torch
from torch import nn

from .codec import Codec
from .errors import ShapeError, ValidationError
from .fusion import (
    FusionAdapters,
    TokenStream,
    embed_stream,
    scale_features,
    stats_from_prediction,
)
from .layers import TransformerBlock
from .signal import NormStats, Series

PAD_TOKEN = "<|pad|>"
EOS_TOKEN = "<|eos|>"
BOS_TOKEN = "<|bos|>"
TS_TOKEN = "<|ts|>"
SPECIAL_TOKENS = (PAD_TOKEN, EOS_TOKEN, BOS_TOKEN, TS_TOKEN)

_N_BYTES = 256
_SPECIAL_RE = re.compile("|".join(re.escape(t) for t in SPECIAL_TOKENS))


class ByteTokenizer:
    """Byte-level tokenizer with reserved specials and optional BPE merges.

    Ids 0..255 are raw bytes, the four specials follow, and merge ids come
    after that. Byte fallback guarantees detokenize(tokenize(s)) == s.
    """

    def __init__(self, merges: Sequence[tuple[int, int]] = ()):
        self.pad_token_id = _N_BYTES
        self.eos_token_id = _N_BYTES + 1
        self.bos_token_id = _N_BYTES + 2
        self.ts_token_id = _N_BYTES + 3
        self._special_ids = {
            PAD_TOKEN: self.pad_token_id,
            EOS_TOKEN: self.eos_token_id,
            BOS_TOKEN: self.bos_token_id,
            TS_TOKEN: self.ts_token_id,
        }
        first_merge_id = _N_BYTES + len(SPECIAL_TOKENS)
        self.merges: list[tuple[int, int]] = []
        for a, b in merges:
            new_id = first_merge_id + len(self.merges)
            for part in (a, b):
                if not (0 <= part < new_id) or part in self._special_ids.values():
                    raise ValidationError(f"merge pair ({a}, {b}) references id {part}")
            self.merges.append((int(a), int(b)))
        self._merge_ranks = {
            pair: first_merge_id + i for i, pair in enumerate(self.merges)
        }

    @property
    def vocab_size(self) -> int:
        return _N_BYTES + len(SPECIAL_TOKENS) + len(self.merges)

    def _apply_merges(self, ids: list[int]) -> list[int]:
        for pair, new_id in self._merge_ranks.items():
            if len(ids) < 2:
                break
            out = []
            i = 0
            while i < len(ids):
                if i + 1 < len(ids) and (ids[i], ids[i + 1]) == pair:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        return ids

    def tokenize(self, text: str, allow_special: bool = True) -> list[int]:
        """Encode text; specials map to their reserved ids unless disabled.

        With ``allow_special=False`` special literals are byte-encoded like
        any other text, which is what keeps payload text from minting slots.
        """
        if not isinstance(text, str):
            raise ValidationError("tokenize expects a string")
        ids: list[int] = []
        if allow_special:
            pos = 0
            for m in _SPECIAL_RE.finditer(text):
                ids.extend(self._apply_merges(list(text[pos: m.start()].encode("utf-8"))))
                ids.append(self._special_ids[m.group()])
                pos = m.end()
            ids.extend(self._apply_merges(list(text[pos:].encode("utf-8"))))
        else:
            ids = self._apply_merges(list(text.encode("utf-8")))
        return ids

    def _expand(self, idx: int, out: bytearray) -> None:
        if idx < _N_BYTES:
            out.append(idx)
        else:
            a, b = self.merges[idx - _N_BYTES - len(SPECIAL_TOKENS)]
            self._expand(a, out)
            self._expand(b, out)

    def detokenize(self, ids: Sequence[int]) -> str:
        """Inverse of tokenize; raises on ids outside the vocabulary."""
        parts: list[str] = []
        buf = bytearray()
        special_names = {v: k for k, v in self._special_ids.items()}
        for idx in ids:
            idx = int(idx)
            if idx < 0 or idx >= self.vocab_size:
                raise ValidationError(f"unknown token id {idx}")
            if idx in special_names:
                if buf:
                    parts.append(buf.decode("utf-8", errors="replace"))
                    buf = bytearray()
                parts.append(special_names[idx])
            else:
                self._expand(idx, buf)
        if buf:
            parts.append(buf.decode("utf-8", errors="replace"))
        return "".join(parts)


def learn_merges(texts: Sequence[str], n_merges: int) -> list[tuple[int, int]]:
    """Greedy byte-pair merge learning over a text sample."""
    if n_merges < 0:
        raise ValidationError("n_merges must be >= 0")
    seqs = [list(t.encode("utf-8")) for t in texts if t]
    merges: list[tuple[int, int]] = []
    next_id = _N_BYTES + len(SPECIAL_TOKENS)
    for _ in range(n_merges):
        counts: dict[tuple[int, int], int] = {}
        for seq in seqs:
            for pair in zip(seq, seq[1:]):
                counts[pair] = counts.get(pair, 0) + 1
        if not counts:
            break
        best = max(counts, key=lambda p: (counts[p], -p[0], -p[1]))
        if counts[best] < 2:
            break
        merges.append(best)
        new_seqs = []
        for seq in seqs:
            out = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and (seq[i], seq[i + 1]) == best:
                    out.append(next_id)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            new_seqs.append(out)
        seqs = new_seqs
        next_id += 1
    return merges


# ---------------------------------------------------------------------------
# Model

@dataclass(frozen=True)
class LMConfig:
    d_lm: int = 96
    n_layers: int = 4
    heads: int = 4
    vocab_size: int = _N_BYTES + len(SPECIAL_TOKENS)
    max_seq_len: int = 512
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_lm % self.heads != 0:
            raise ValidationError(
                f"d_lm {self.d_lm} not divisible by heads {self.heads}"
            )
        if self.vocab_size < _N_BYTES + len(SPECIAL_TOKENS):
            raise ValidationError("vocab must cover all bytes plus specials")
        if not (0.0 <= self.dropout < 1.0):
            raise ValidationError("dropout must be in [0, 1)")


class LM(nn.Module):
    """Decoder-only transformer over externally supplied embeddings."""

    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_lm)
        self.pos_embed = nn.Embedding(cfg.max_seq_len, cfg.d_lm)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d_lm, cfg.heads) for _ in range(cfg.n_layers)
        )
        self.norm = nn.LayerNorm(cfg.d_lm)
        self.head = nn.Linear(cfg.d_lm, cfg.vocab_size)

    def forward(self, embeddings: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(b, n, d_lm) -> (hidden (b, n, d_lm), logits (b, n, vocab))."""
        if embeddings.ndim != 3 or embeddings.shape[-1] != self.cfg.d_lm:
            raise ShapeError(
                f"expected (b, n, {self.cfg.d_lm}) embeddings, "
                f"got {tuple(embeddings.shape)}"
            )
        n = embeddings.shape[1]
        if n > self.cfg.max_seq_len:
            raise ValidationError(
                f"sequence length {n} exceeds max_seq_len {self.cfg.max_seq_len}"
            )
        pos = torch.arange(n, device=embeddings.device)
        h = self.drop(embeddings + self.pos_embed(pos))
        for block in self.blocks:
            h = block(h)
        h = self.norm(h)
        return h, self.head(h)


@dataclass
class ModelBundle:
    """Everything inference needs: tokenizer, codec, adapters, and the LM."""

    tokenizer: ByteTokenizer
    codec: Codec
    adapters: FusionAdapters
    lm: LM

    def parts(self) -> dict[str, nn.Module]:
        """Named trainable parts; stage freeze contracts select from these."""
        return {
            "codec": self.codec,
            "lm": self.lm,
            "adapter_in": self.adapters.adapter_in,
            "adapter_out": self.adapters.adapter_out,
            "scale_encoder": self.adapters.scale_encoder,
            "scale_head": self.adapters.scale_head,
        }

    def eval_mode(self) -> "ModelBundle":
        for m in (self.codec, self.adapters, self.lm):
            m.eval()
        return self


# ---------------------------------------------------------------------------
# Generation

@dataclass(frozen=True)
class GenPolicy:
    """Decoding policy: greedy, temperature sampling, or label-constrained.

    ``ts_slot_budget`` drives slot emission: while the budget has remaining
    slots the next token is forced to be a slot, and once spent the slot token
    is masked out. None leaves slot emission to the model.
    """

    kind: str = "greedy"
    temperature: float = 1.0
    labels: Optional[tuple[str, ...]] = None
    ts_slot_budget: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("greedy", "temperature", "constrained"):
            raise ValidationError(f"unknown policy kind {self.kind!r}")
        if self.kind == "temperature" and self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if self.kind == "constrained":
            if not self.labels:
                raise ValidationError("constrained policy needs labels")
            object.__setattr__(self, "labels", tuple(self.labels))
        if self.ts_slot_budget is not None and self.ts_slot_budget < 0:
            raise ValidationError("ts_slot_budget must be >= 0")


@dataclass(frozen=True)
class GenText:
    text: str


@dataclass(frozen=True)
class GenTS:
    series: Series
    stats: NormStats


@dataclass(frozen=True)
class GenOutput:
    """Generated segments in emission order plus raw decoding details."""

    segments: tuple[Union[GenText, GenTS], ...]
    token_ids: tuple[int, ...]
    logprobs: tuple[float, ...]
    truncated: bool = False


def _select(
    logits: torch.Tensor,
    policy: GenPolicy,
    generator: Optional[torch.Generator],
) -> int:
    if policy.kind == "temperature" and policy.temperature > 0:
        probs = torch.softmax(logits / policy.temperature, dim=-1)
        return int(torch.multinomial(probs, 1, generator=generator).item())
    return int(torch.argmax(logits).item())


def generate(
    prompt: TokenStream,
    bundle: ModelBundle,
    policy: GenPolicy = GenPolicy(),
    max_new: int = 128,
    seed: int = 0,
) -> GenOutput:
    """Interleaved autoregressive decoding from a prompt stream.

    Each step reruns the full forward pass (no cache). A sampled slot token is
    decoded from the hidden state that predicted it: adapter-out to latent,
    codec to patch; the patch is re-embedded through adapter-in plus the scale
    embedding predicted at the first slot of the run. Hitting ``max_new`` or
    the context limit without an end token sets ``truncated``.
    """
    if max_new < 1:
        raise ValidationError("max_new must be >= 1")
    if policy.kind == "constrained":
        label, ids, lps = _constrained(prompt, bundle, policy.labels)
        return GenOutput(
            segments=(GenText(label),),
            token_ids=tuple(ids),
            logprobs=tuple(lps),
            truncated=False,
        )
    bundle.eval_mode()
    tok = bundle.tokenizer
    lm, codec, adapters = bundle.lm, bundle.codec, bundle.adapters
    generator = torch.Generator().manual_seed(seed)
    ts_remaining = policy.ts_slot_budget

    new_ids: list[int] = []
    logprobs: list[float] = []
    # Emission-ordered pieces: ("text", [ids]) or ("ts", [patches], stats).
    pieces: list = []
    run_stats: Optional[NormStats] = None
    truncated = True

    with torch.no_grad():
        emb = embed_stream(prompt, lm.embed, adapters)
        for _ in range(max_new):
            if emb.shape[0] >= lm.cfg.max_seq_len:
                break
            hidden, logits = lm(emb.unsqueeze(0))
            row = logits[0, -1]
            hid = hidden[0, -1]
            masked = row
            if ts_remaining is not None:
                masked = row.clone()
                if ts_remaining > 0:
                    keep = masked[tok.ts_token_id].item()
                    masked.fill_(-1e9)
                    masked[tok.ts_token_id] = keep
                else:
                    masked[tok.ts_token_id] = -1e9
            next_id = _select(masked, policy, generator)
            logprobs.append(
                float(torch.log_softmax(row, dim=-1)[next_id].item())
            )
            new_ids.append(next_id)
            if next_id == tok.eos_token_id:
                truncated = False
                break
            if next_id == tok.ts_token_id:
                mu_hat = adapters.adapt_out(hid)
                patch = codec.decode_tensor(mu_hat)
                if run_stats is None:
                    run_stats = stats_from_prediction(adapters.predict_scale(hid))
                    pieces.append(("ts", [], run_stats))
                pieces[-1][1].append(patch)
                if ts_remaining is not None:
                    ts_remaining -= 1
                next_emb = adapters.adapt_in(mu_hat) + adapters.scale_encoder(
                    scale_features(run_stats)
                )
            else:
                run_stats = None
                if not pieces or pieces[-1][0] != "text":
                    pieces.append(("text", []))
                pieces[-1][1].append(next_id)
                next_emb = lm.embed(torch.tensor(next_id))
            emb = torch.cat([emb, next_emb.unsqueeze(0)], dim=0)

    segments: list[Union[GenText, GenTS]] = []
    for piece in pieces:
        if piece[0] == "text":
            segments.append(GenText(tok.detokenize(piece[1])))
        else:
            patches = torch.stack(piece[1]).cpu().double().numpy()
            stats = piece[2]
            values = patches.reshape(-1) * stats.sigma + stats.mu
            segments.append(GenTS(Series(values), stats))
    return GenOutput(
        segments=tuple(segments),
        token_ids=tuple(new_ids),
        logprobs=tuple(logprobs),
        truncated=truncated,
    )


class _TrieNode:
    __slots__ = ("children", "terminal")

    def __init__(self):
        self.children: dict[int, "_TrieNode"] = {}
        self.terminal: Optional[str] = None


def _build_trie(tokenizer: ByteTokenizer, labels: Sequence[str]) -> _TrieNode:
    root = _TrieNode()
    for label in labels:
        if not label:
            raise ValidationError("labels must be non-empty strings")
        node = root
        for idx in tokenizer.tokenize(label, allow_special=False):
            node = node.children.setdefault(idx, _TrieNode())
        node.terminal = label
    return root


def _constrained(
    prompt: TokenStream, bundle: ModelBundle, labels: Sequence[str]
) -> tuple[str, list[int], list[float]]:
    if not labels:
        raise ValidationError("constrained decoding needs at least one label")
    bundle.eval_mode()
    tok = bundle.tokenizer
    lm, adapters = bundle.lm, bundle.adapters
    root = _build_trie(tok, labels)
    node = root
    ids: list[int] = []
    lps: list[float] = []
    with torch.no_grad():
        emb = embed_stream(prompt, lm.embed, adapters)
        while True:
            if node.terminal is not None and not node.children:
                return node.terminal, ids, lps
            if emb.shape[0] >= lm.cfg.max_seq_len:
                # Out of context: fall back to the nearest completed label.
                return _nearest_terminal(node), ids, lps
            _, logits = lm(emb.unsqueeze(0))
            row = torch.log_softmax(logits[0, -1], dim=-1)
            allowed = list(node.children)
            if node.terminal is not None:
                allowed.append(tok.eos_token_id)
            masked = torch.full_like(row, -1e9)
            masked[allowed] = row[allowed]
            next_id = int(torch.argmax(masked).item())
            ids.append(next_id)
            lps.append(float(row[next_id].item()))
            if next_id == tok.eos_token_id:
                return node.terminal, ids, lps
            node = node.children[next_id]
            emb = torch.cat(
                [emb, lm.embed(torch.tensor(next_id)).unsqueeze(0)], dim=0
            )


def _nearest_terminal(node: _TrieNode) -> str:
    while node.terminal is None:
        node = next(iter(node.children.values()))
    return node.terminal


def constrained_decode(
    prompt: TokenStream, bundle: ModelBundle, labels: Sequence[str]
) -> str:
    """Pick exactly one of ``labels`` by masking logits to the label trie."""
    label, _, _ = _constrained(prompt, bundle, labels)
    return label
