"""Tiny autoregressive token model over the item-title vocabulary.

One causal self-attention block (default) or a gated-recurrent cell,
selected by config. The token-embedding table doubles as the semantic
space for grounding: ``embed_sequence`` mean-pools its rows.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ContractError, LengthError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
N_RESERVED = 4
RESERVED_NAMES = ("<pad>", "<bos>", "<eos>", "<unk>")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on anything that is not a letter or digit."""
    return re.findall(r"[a-z0-9]+", text.lower())


@dataclass(frozen=True)
class Vocab:
    """Bijective token<->id map; ids 0..3 are PAD/BOS/EOS/UNK."""

    tokens: tuple[str, ...]
    index: dict[str, int] = field(repr=False)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        seen = set()
        for text in texts:
            seen.update(tokenize(text))
        tokens = tuple(sorted(seen))
        index = {tok: i + N_RESERVED for i, tok in enumerate(tokens)}
        return cls(tokens=tokens, index=index)

    @property
    def size(self) -> int:
        return len(self.tokens) + N_RESERVED

    def encode_tokens(self, words: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.index.get(w, UNK) for w in words)

    def encode_text(self, text: str) -> tuple[int, ...]:
        return self.encode_tokens(tokenize(text))

    def decode(self, ids: Sequence[int]) -> list[str]:
        """Token strings for non-reserved ids; reserved ids are dropped."""
        out = []
        for i in ids:
            if i >= N_RESERVED:
                out.append(self.tokens[i - N_RESERVED])
        return out


@dataclass(frozen=True)
class TokenSeq:
    """An ordered run of token ids tagged as prompt or label."""

    ids: tuple[int, ...]
    role: str

    def __post_init__(self):
        if self.role not in ("prompt", "label"):
            raise ContractError(f"TokenSeq role must be prompt or label, got {self.role!r}")
        seen_non_pad = False
        for i in reversed(self.ids):
            if i != PAD:
                seen_non_pad = True
            elif seen_non_pad:
                raise ContractError("TokenSeq: PAD before a non-PAD token")

    def __len__(self) -> int:
        return len(self.ids)


def label_is_empty(label: TokenSeq) -> bool:
    """True when a label carries no non-reserved content (e.g. bare EOS)."""
    return all(i < N_RESERVED for i in label.ids)


@dataclass
class ModelConfig:
    d_emb: int = 32
    l_max: int = 128
    block: str = "attention"  # attention | gru
    tie_output: bool = True
    init_scale: float = 0.1
    precision: str = "double"  # double | single

    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32


_ATTN_KEYS = ("wq", "wk", "wv", "wo", "ln1_g", "ln1_b")
_GRU_KEYS = ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh")


@dataclass
class ModelState:
    """All learnable parameters plus the shape config they were built with.

    ``version`` is bumped on every optimizer step; index builders tag
    themselves with it so stale embedding indexes are detectable.
    """

    vocab_size: int
    config: ModelConfig
    params: dict[str, T.Tensor]
    version: int = 0

    def parameters(self) -> dict[str, T.Tensor]:
        return self.params

    def embedding(self) -> np.ndarray:
        return self.params["emb"].values

    def bump_version(self) -> None:
        self.version += 1

    def copy(self) -> "ModelState":
        params = {
            k: T.Tensor(np.array(v.values, copy=True), requires_grad=True)
            for k, v in self.params.items()
        }
        return ModelState(self.vocab_size, self.config, params, self.version)

    def apply_sgd(self, lr: float) -> None:
        T.sgd_step(self.params, lr)
        self.bump_version()

    def apply_adam(self, opt: T.Adam) -> None:
        opt.step(self.params)
        self.bump_version()


def init_model(vocab_size: int, config: ModelConfig, seed: int) -> ModelState:
    """Seed-deterministic initialization; zero seed-independent structure."""
    if config.block not in ("attention", "gru"):
        raise ContractError(f"unknown block kind {config.block!r}")
    rng = np.random.default_rng(seed)
    d = config.d_emb
    dt = config.dtype()

    def normal(shape, scl):
        return T.param(rng.normal(0.0, scl, size=shape), dtype=dt)

    params: dict[str, T.Tensor] = {
        "emb": normal((vocab_size, d), config.init_scale),
        "pos": normal((config.l_max, d), config.init_scale),
        "ln2_g": T.param(np.ones(d), dtype=dt),
        "ln2_b": T.param(np.zeros(d), dtype=dt),
    }
    proj_scale = 1.0 / np.sqrt(d)
    if config.block == "attention":
        for k in ("wq", "wk", "wv", "wo"):
            params[k] = normal((d, d), proj_scale)
        params["ln1_g"] = T.param(np.ones(d), dtype=dt)
        params["ln1_b"] = T.param(np.zeros(d), dtype=dt)
    else:
        for k in ("wz", "uz", "wr", "ur", "wh", "uh"):
            params[k] = normal((d, d), proj_scale)
        for k in ("bz", "br", "bh"):
            params[k] = T.param(np.zeros(d), dtype=dt)
    if not config.tie_output:
        params["out"] = normal((vocab_size, d), proj_scale)
    return ModelState(vocab_size, config, params)


def _token_ids(tokens) -> tuple[int, ...]:
    if isinstance(tokens, TokenSeq):
        return tokens.ids
    return tuple(int(i) for i in tokens)


def logits(model: ModelState, tokens) -> T.Tensor:
    """Next-token logit rows, shape [len(tokens), vocab_size].

    Position k depends only on tokens 0..k (causal). Raises LengthError
    beyond l_max.
    """
    ids = _token_ids(tokens)
    if not ids:
        raise ContractError("logits: empty token sequence")
    if len(ids) > model.config.l_max:
        raise LengthError(f"sequence of {len(ids)} tokens exceeds l_max={model.config.l_max}")
    p = model.params
    e = T.add(T.embedding_lookup(p["emb"], ids), T.embedding_lookup(p["pos"], range(len(ids))))
    if model.config.block == "attention":
        x = _attention_block(model, e)
    else:
        x = _gru_block(model, e)
    h = T.layer_norm(x, p["ln2_g"], p["ln2_b"])
    out_table = p["emb"] if model.config.tie_output else p["out"]
    return T.matmul(h, T.transpose(out_table))


def _attention_block(model: ModelState, e: T.Tensor) -> T.Tensor:
    p = model.params
    d = model.config.d_emb
    h = T.layer_norm(e, p["ln1_g"], p["ln1_b"])
    q = T.matmul(h, p["wq"])
    k = T.matmul(h, p["wk"])
    v = T.matmul(h, p["wv"])
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(d))
    attn = T.causal_softmax(scores)
    a = T.matmul(T.matmul(attn, v), p["wo"])
    return T.add(e, a)


def _gru_block(model: ModelState, e: T.Tensor) -> T.Tensor:
    p = model.params
    n = e.shape[0]
    dt = e.values.dtype
    # Input projections for all positions at once; recurrence done per step.
    xz = T.matmul(e, p["wz"])
    xr = T.matmul(e, p["wr"])
    xh = T.matmul(e, p["wh"])
    one = T.Tensor(np.ones(model.config.d_emb, dtype=dt))
    h_prev = T.Tensor(np.zeros(model.config.d_emb, dtype=dt))
    hs = []
    for t in range(n):
        z = T.sigmoid(T.add(T.add(T.row(xz, t), T.matmul(h_prev, p["uz"])), p["bz"]))
        r = T.sigmoid(T.add(T.add(T.row(xr, t), T.matmul(h_prev, p["ur"])), p["br"]))
        cand = T.tanh(T.add(T.add(T.row(xh, t), T.matmul(T.mul(r, h_prev), p["uh"])), p["bh"]))
        keep = T.add(one, T.scale(z, -1.0))
        h_prev = T.add(T.mul(keep, h_prev), T.mul(z, cand))
        hs.append(h_prev)
    return T.stack_rows(hs)


def nll_loss(model: ModelState, prompt: TokenSeq, label: TokenSeq) -> T.Tensor:
    """-sum_k log p(label_k | prompt, label_<k), summed over label tokens.

    Prompt positions contribute zero loss; PAD targets are masked out.
    The label must be nonempty and end with EOS.
    """
    if len(label) == 0:
        raise ContractError("nll_loss: empty label")
    if label.ids[-1] != EOS:
        raise ContractError("nll_loss: label must end with EOS")
    if len(prompt) == 0:
        raise ContractError("nll_loss: empty prompt")
    full = prompt.ids + label.ids
    lg = logits(model, full[:-1])
    targets = full[1:]
    weights = [0.0] * (len(prompt) - 1) + [0.0 if t == PAD else 1.0 for t in label.ids]
    return T.softmax_cross_entropy(lg, targets, weights)


def generate(model: ModelState, prompt: TokenSeq, max_len: int) -> TokenSeq:
    """Greedy decode up to max_len tokens; deterministic, ties to smallest id.

    Reserved ids other than EOS are suppressed, so the output contains only
    vocabulary tokens plus a terminal EOS (appended if the budget runs out
    before EOS is produced naturally).
    """
    if max_len <= 0:
        raise ContractError("generate: max_len must be positive")
    if len(prompt) + max_len > model.config.l_max:
        raise LengthError(
            f"prompt of {len(prompt)} + max_len {max_len} exceeds l_max={model.config.l_max}"
        )
    ids = list(prompt.ids)
    out: list[int] = []
    with T.no_grad():
        for _ in range(max_len):
            last = logits(model, ids).values[-1].copy()
            last[PAD] = -np.inf
            last[BOS] = -np.inf
            last[UNK] = -np.inf
            nxt = int(np.argmax(last))
            if nxt == EOS:
                break
            out.append(nxt)
            ids.append(nxt)
    return TokenSeq(tuple(out) + (EOS,), "label")


def embed_sequence(model: ModelState, tokens) -> np.ndarray:
    """Mean of embedding rows over non-reserved tokens; zero vector if none."""
    ids = [i for i in _token_ids(tokens) if i >= N_RESERVED]
    emb = model.embedding()
    if not ids:
        return np.zeros(emb.shape[1], dtype=emb.dtype)
    return emb[np.asarray(ids, dtype=np.intp)].mean(axis=0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = 1


def save_checkpoint(model: ModelState, path) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "vocab_size": model.vocab_size,
        "version": model.version,
        "config": {
            "d_emb": model.config.d_emb,
            "l_max": model.config.l_max,
            "block": model.config.block,
            "tie_output": model.config.tie_output,
            "init_scale": model.config.init_scale,
            "precision": model.config.precision,
        },
    }
    arrays = {f"param_{k}": v.values for k, v in model.params.items()}
    np.savez(path, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path, expected_vocab_size: Optional[int] = None) -> ModelState:
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            arrays = {k[len("param_"):]: np.array(data[k]) for k in data.files if k.startswith("param_")}
    except FileNotFoundError:
        raise
    except Exception as exc:  # corrupt archive, bad json
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")
    vocab_size = int(meta["vocab_size"])
    if expected_vocab_size is not None and vocab_size != expected_vocab_size:
        raise CheckpointError(
            f"checkpoint vocab size {vocab_size} does not match expected {expected_vocab_size}"
        )
    cfg = ModelConfig(**meta["config"])
    params = {k: T.Tensor(v, requires_grad=True) for k, v in arrays.items()}
    model = ModelState(vocab_size, cfg, params, version=int(meta.get("version", 0)))
    if model.embedding().shape[0] != vocab_size:
        raise CheckpointError("checkpoint embedding rows disagree with recorded vocab size")
    return model
