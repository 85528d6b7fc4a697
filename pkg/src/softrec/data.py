"""Interaction data: ingest or synthesize, filter, split, and render pairs.

The external formats are flat event rows (TSV with a fixed header, or JSONL
with the same five keys): user_id, item_id, title, category, timestamp.
Every event carries its item's title and category; the catalog is the
deduplicated union of those definitions.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import ContractError, FilterError, IngestError, SpecError, SplitError
from .model import BOS, EOS, N_RESERVED, TokenSeq, Vocab, tokenize

log = logging.getLogger(__name__)

TSV_COLUMNS = ("user_id", "item_id", "title", "category", "timestamp")


@dataclass(frozen=True)
class Item:
    item_id: str
    title: str
    category: str


class ItemCatalog:
    """Items keyed by id, iterated in sorted-id order for determinism."""

    def __init__(self, items: Iterable[Item]):
        self._items: dict[str, Item] = {}
        for it in items:
            if not it.title:
                raise ContractError(f"item {it.item_id!r} has an empty title")
            prev = self._items.get(it.item_id)
            if prev is not None and prev != it:
                raise ContractError(f"conflicting definitions for item {it.item_id!r}")
            self._items[it.item_id] = it

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._items

    def __getitem__(self, item_id: str) -> Item:
        return self._items[item_id]

    def __iter__(self):
        for item_id in sorted(self._items):
            yield self._items[item_id]

    def item_ids(self) -> list[str]:
        return sorted(self._items)

    def restrict(self, keep_ids) -> "ItemCatalog":
        keep = set(keep_ids)
        return ItemCatalog(it for it in self if it.item_id in keep)

    def max_title_tokens(self) -> int:
        return max(len(tokenize(it.title)) for it in self)


@dataclass(frozen=True)
class InteractionSequence:
    """One user's chronologically ordered (item_id, timestamp) events."""

    user_id: str
    events: tuple[tuple[str, float], ...]

    def __post_init__(self):
        for (a, ta), (b, tb) in zip(self.events, self.events[1:]):
            if tb < ta:
                raise ContractError(f"user {self.user_id!r}: timestamps decrease")

    def __len__(self) -> int:
        return len(self.events)


# ---------------------------------------------------------------------------
# Ingest
# ---------------------------------------------------------------------------


def _finish_corpus(rows, origin: str):
    """Rows of (line_no, user, item_id, title, category, ts) -> catalog + sequences."""
    items: dict[str, tuple[int, Item]] = {}
    per_user: dict[str, list[tuple[float, int, str]]] = {}
    for line_no, user, item_id, title, category, ts in rows:
        if not title or not tokenize(title):
            raise IngestError(f"{origin}:{line_no}: item {item_id!r} has an unusable title")
        if not category:
            raise IngestError(f"{origin}:{line_no}: item {item_id!r} has no category")
        item = Item(item_id, title, category)
        prev = items.get(item_id)
        if prev is not None and prev[1] != item:
            raise IngestError(
                f"{origin}:{line_no}: item {item_id!r} conflicts with definition at line {prev[0]}"
            )
        items.setdefault(item_id, (line_no, item))
        per_user.setdefault(user, []).append((ts, line_no, item_id))
    catalog = ItemCatalog(it for _, it in items.values())
    sequences = []
    for user in sorted(per_user):
        events = sorted(per_user[user], key=lambda e: e[0])  # stable: input order on ties
        sequences.append(
            InteractionSequence(user, tuple((item_id, ts) for ts, _, item_id in events))
        )
    return catalog, sequences


def load_interactions(path, fmt: str = "tsv"):
    """Parse a TSV or JSONL event file into (ItemCatalog, sequences).

    The catalog is deduplicated; conflicting item definitions and malformed
    rows raise IngestError with the offending line number. Sequences come
    out sorted by timestamp regardless of input order.
    """
    path = Path(path)
    if fmt not in ("tsv", "jsonl"):
        raise ContractError(f"unknown format {fmt!r}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        if fmt == "tsv":
            header = fh.readline().rstrip("\n")
            if tuple(header.split("\t")) != TSV_COLUMNS:
                raise IngestError(f"{path}:1: expected tab-separated header {TSV_COLUMNS}")
            for line_no, line in enumerate(fh, start=2):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 5:
                    raise IngestError(f"{path}:{line_no}: expected 5 tab-separated fields")
                user, item_id, title, category, ts_raw = parts
                try:
                    ts = float(ts_raw)
                except ValueError:
                    raise IngestError(f"{path}:{line_no}: bad timestamp {ts_raw!r}") from None
                rows.append((line_no, user, item_id, title, category, ts))
        else:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise IngestError(f"{path}:{line_no}: invalid JSON ({exc.msg})") from None
                if not isinstance(obj, dict) or set(obj) != set(TSV_COLUMNS):
                    raise IngestError(f"{path}:{line_no}: expected exactly keys {TSV_COLUMNS}")
                try:
                    ts = float(obj["timestamp"])
                except (TypeError, ValueError):
                    raise IngestError(f"{path}:{line_no}: bad timestamp {obj['timestamp']!r}") from None
                rows.append(
                    (line_no, str(obj["user_id"]), str(obj["item_id"]),
                     str(obj["title"]), str(obj["category"]), ts)
                )
    if not rows:
        raise IngestError(f"{path}: no events")
    return _finish_corpus(rows, str(path))


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


@dataclass
class FilterResult:
    catalog: ItemCatalog
    sequences: list[InteractionSequence]
    n_passes: int


def filter_min_interactions(catalog: ItemCatalog, sequences: Sequence[InteractionSequence],
                            k: int = 10) -> FilterResult:
    """Iteratively drop users and items with fewer than k interactions.

    Each pass marks offenders from the pre-pass counts and removes both at
    once; passes repeat until a fixed point. n_passes counts the passes
    that changed something.
    """
    if k < 1:
        raise ContractError("filter_min_interactions: k must be positive")
    seqs = {s.user_id: list(s.events) for s in sequences}
    item_ids = set(catalog.item_ids())
    n_passes = 0
    while True:
        item_counts: dict[str, int] = {i: 0 for i in item_ids}
        for events in seqs.values():
            for item_id, _ in events:
                item_counts[item_id] += 1
        bad_users = {u for u, events in seqs.items() if len(events) < k}
        bad_items = {i for i, c in item_counts.items() if c < k}
        if not bad_users and not bad_items:
            break
        n_passes += 1
        for u in bad_users:
            del seqs[u]
        item_ids -= bad_items
        for u in list(seqs):
            seqs[u] = [(i, ts) for i, ts in seqs[u] if i in item_ids]
    if not seqs or not item_ids:
        raise FilterError(f"filtering at k={k} removed the whole dataset")
    log.info("min-interaction filter: fixed point after %d pass(es)", n_passes)
    out_seqs = [
        InteractionSequence(u, tuple(seqs[u])) for u in sorted(seqs) if seqs[u]
    ]
    return FilterResult(catalog.restrict(item_ids), out_seqs, n_passes)


# ---------------------------------------------------------------------------
# Prompt rendering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptConfig:
    template: str = "{instruction} {history}"
    instruction: str = "given the items a user interacted with in order, name the next item"
    history_window: int = 10
    history_sep: str = " ; "


def render_prompt(history: Sequence[Item], prompt_cfg: PromptConfig, vocab: Vocab,
                  max_prompt_tokens: Optional[int] = None) -> tuple[TokenSeq, bool]:
    """Deterministically render a history into a BOS-prefixed prompt.

    Keeps the most recent ``history_window`` items (oldest first in the
    rendered text). Returns (tokens, truncated); truncated is set when the
    token budget forced dropping history beyond the window.
    """
    if not history:
        raise ContractError("render_prompt: empty history")
    window = list(history[-prompt_cfg.history_window:])
    truncated = False
    while True:
        text = prompt_cfg.template.format(
            instruction=prompt_cfg.instruction,
            history=prompt_cfg.history_sep.join(it.title for it in window),
        )
        ids = (BOS,) + vocab.encode_tokens(tokenize(text))
        if max_prompt_tokens is None or len(ids) <= max_prompt_tokens:
            break
        if len(window) > 1:
            window.pop(0)
            truncated = True
        else:
            ids = (BOS,) + ids[1:][-(max_prompt_tokens - 1):]
            truncated = True
            break
    return TokenSeq(ids, "prompt"), truncated


# ---------------------------------------------------------------------------
# Pairs and splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTargetPair:
    pair_id: str
    user_id: str
    x: TokenSeq
    y: TokenSeq
    target_item_id: str
    target_category: str
    target_ts: float
    history_item_ids: tuple[str, ...]
    truncated: bool = False


@dataclass
class SplitDataset:
    train: list[PromptTargetPair]
    valid: list[PromptTargetPair]
    test: list[PromptTargetPair]
    catalog: ItemCatalog
    vocab: Vocab
    prompt_cfg: PromptConfig

    def fingerprint(self) -> str:
        blob = {
            "catalog": [[it.item_id, it.title, it.category] for it in self.catalog],
            "vocab": list(self.vocab.tokens),
            "splits": {
                name: [
                    [p.pair_id, list(p.x.ids), list(p.y.ids), p.target_item_id]
                    for p in pairs
                ]
                for name, pairs in (("train", self.train), ("valid", self.valid), ("test", self.test))
            },
        }
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class SplitLimits:
    max_train: Optional[int] = None
    max_valid: Optional[int] = None
    max_test: Optional[int] = None


def label_tokens(vocab: Vocab, title: str) -> TokenSeq:
    return TokenSeq(vocab.encode_tokens(tokenize(title)) + (EOS,), "label")


def _ratio_counts(n: int, ratios: Sequence[float]) -> list[int]:
    total = float(sum(ratios))
    if total <= 0 or any(r < 0 for r in ratios):
        raise ContractError(f"ratios must be nonnegative with positive sum, got {ratios}")
    exact = [n * r / total for r in ratios]
    base = [int(x) for x in exact]
    rem = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:rem]:
        base[i] += 1
    return base


def split_chronological(catalog: ItemCatalog, sequences: Sequence[InteractionSequence],
                        vocab: Vocab, prompt_cfg: PromptConfig,
                        ratios: Sequence[float] = (8, 1, 1),
                        limits: Optional[SplitLimits] = None,
                        sample_seed: int = 13,
                        max_prompt_tokens: Optional[int] = None) -> SplitDataset:
    """Partition target events globally by timestamp into train/valid/test.

    A target event is any interaction with at least one preceding event for
    the same user; its prompt history is exactly the events strictly before
    it, so no pair can see the future. When per-split limits are set, that
    many targets are sampled uniformly (seeded) after partitioning.
    """
    targets = []
    for seq in sequences:
        for idx in range(1, len(seq.events)):
            item_id, ts = seq.events[idx]
            targets.append((ts, seq.user_id, idx, seq))
    targets.sort(key=lambda t: (t[0], t[1], t[2]))
    if not targets:
        raise SplitError("no target events (every user has fewer than 2 interactions)")
    counts = _ratio_counts(len(targets), list(ratios))
    if any(c == 0 for c in counts):
        raise SplitError(f"split of {len(targets)} targets by {tuple(ratios)} leaves a part empty")
    bounds = [counts[0], counts[0] + counts[1], len(targets)]
    parts = [targets[: bounds[0]], targets[bounds[0]: bounds[1]], targets[bounds[1]:]]

    caps = (limits.max_train, limits.max_valid, limits.max_test) if limits else (None,) * 3
    splits: list[list[PromptTargetPair]] = []
    for split_idx, (part, cap) in enumerate(zip(parts, caps)):
        if cap is not None and cap < len(part):
            rng = random.Random(sample_seed * 1000003 + split_idx)
            chosen = sorted(rng.sample(range(len(part)), cap))
            part = [part[i] for i in chosen]
        pairs = []
        for ts, user_id, idx, seq in part:
            history_ids = tuple(item_id for item_id, _ in seq.events[:idx])
            history_items = [catalog[i] for i in history_ids]
            x, truncated = render_prompt(history_items, prompt_cfg, vocab, max_prompt_tokens)
            target = catalog[seq.events[idx][0]]
            pairs.append(PromptTargetPair(
                pair_id=f"{user_id}:{idx}",
                user_id=user_id,
                x=x,
                y=label_tokens(vocab, target.title),
                target_item_id=target.item_id,
                target_category=target.category,
                target_ts=ts,
                history_item_ids=history_ids,
                truncated=truncated,
            ))
        if not pairs:
            raise SplitError("a split became empty after sampling")
        splits.append(pairs)
    return SplitDataset(splits[0], splits[1], splits[2], catalog, vocab, prompt_cfg)


def build_vocab(catalog: ItemCatalog, prompt_cfg: PromptConfig) -> Vocab:
    texts = [it.title for it in catalog]
    texts.append(prompt_cfg.template.format(instruction=prompt_cfg.instruction, history=""))
    return Vocab.build(texts)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

_ADJECTIVES = (
    "amber", "brisk", "crimson", "dusty", "ebony", "frosted", "gilded", "hollow",
    "ivory", "jade", "keen", "lunar", "misty", "noble", "ochre", "pale",
    "quiet", "ruby", "sable", "tidal", "umber", "velvet", "wild", "young",
    "zesty", "bold", "calm", "deep", "early", "fabled",
)
_NOUNS = (
    "falcon", "garden", "harbor", "island", "jungle", "keep", "lagoon", "meadow",
    "nexus", "orchard", "prairie", "quarry", "ridge", "summit", "temple", "valley",
    "willow", "yard", "zephyr", "atlas", "beacon", "canyon", "delta", "ember",
    "fjord", "grove", "haven", "inlet", "knoll", "mesa",
)
_CATEGORY_WORDS = (
    "arcade", "puzzle", "racing", "strategy", "sports", "fantasy", "mystery",
    "survival", "trivia", "rhythm", "sandbox", "tactics", "platformer", "roguelike",
    "simulation", "adventure",
)


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 200
    n_items: int = 100
    n_categories: int = 5
    stickiness: float = 0.8
    seq_len_min: int = 12
    seq_len_max: int = 18


def synthesize_dataset(spec: SyntheticSpec, seed: int):
    """Seed-deterministic synthetic corpus with latent per-user categories.

    Each user prefers one category; every next item comes from it with
    probability ``stickiness``, otherwise uniformly from the whole catalog.
    Titles are distinct multi-token strings that embed the category word.
    """
    if spec.n_items < spec.n_categories:
        raise SpecError(f"n_items={spec.n_items} < n_categories={spec.n_categories}")
    if not (0.0 <= spec.stickiness <= 1.0):
        raise SpecError(f"stickiness must be in [0,1], got {spec.stickiness}")
    if spec.seq_len_min < 1 or spec.seq_len_max < spec.seq_len_min:
        raise SpecError("bad sequence-length bounds")
    rng = random.Random(seed)

    cat_names = [
        _CATEGORY_WORDS[c] if c < len(_CATEGORY_WORDS) else f"genre{c}"
        for c in range(spec.n_categories)
    ]
    word_pairs = [(a, n) for a in _ADJECTIVES for n in _NOUNS]
    rng.shuffle(word_pairs)

    items = []
    for j in range(spec.n_items):
        cat = cat_names[j % spec.n_categories]
        adj, noun = word_pairs[j % len(word_pairs)]
        title = f"{adj} {noun} {cat}"
        if j >= len(word_pairs):
            title = f"{title} mark {j // len(word_pairs) + 1}"
        items.append(Item(f"i{j:04d}", title, cat))
    catalog = ItemCatalog(items)
    by_category = {c: [it.item_id for it in items if it.category == c] for c in cat_names}
    all_ids = [it.item_id for it in items]

    sequences = []
    for u in range(spec.n_users):
        pref = cat_names[rng.randrange(spec.n_categories)]
        length = rng.randint(spec.seq_len_min, spec.seq_len_max)
        stamps = sorted(rng.sample(range(1, 10**9), length))
        events = []
        for ts in stamps:
            if rng.random() < spec.stickiness:
                item_id = by_category[pref][rng.randrange(len(by_category[pref]))]
            else:
                item_id = all_ids[rng.randrange(len(all_ids))]
            events.append((item_id, float(ts)))
        sequences.append(InteractionSequence(f"u{u:04d}", tuple(events)))
    return catalog, sequences


# ---------------------------------------------------------------------------
# Persistence (pipeline artifacts)
# ---------------------------------------------------------------------------


def save_split(ds: SplitDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "catalog.json", "w", encoding="utf-8") as fh:
        json.dump([[it.item_id, it.title, it.category] for it in ds.catalog], fh)
    with open(out / "vocab.json", "w", encoding="utf-8") as fh:
        json.dump(list(ds.vocab.tokens), fh)
    with open(out / "prompt.json", "w", encoding="utf-8") as fh:
        json.dump({
            "template": ds.prompt_cfg.template,
            "instruction": ds.prompt_cfg.instruction,
            "history_window": ds.prompt_cfg.history_window,
            "history_sep": ds.prompt_cfg.history_sep,
        }, fh)
    for name, pairs in (("train", ds.train), ("valid", ds.valid), ("test", ds.test)):
        with open(out / f"{name}.jsonl", "w", encoding="utf-8") as fh:
            for p in pairs:
                fh.write(json.dumps({
                    "pair_id": p.pair_id,
                    "user_id": p.user_id,
                    "x": list(p.x.ids),
                    "y": list(p.y.ids),
                    "target_item_id": p.target_item_id,
                    "target_category": p.target_category,
                    "target_ts": p.target_ts,
                    "history_item_ids": list(p.history_item_ids),
                    "truncated": p.truncated,
                }) + "\n")


def load_split(out_dir) -> SplitDataset:
    out = Path(out_dir)
    with open(out / "catalog.json", encoding="utf-8") as fh:
        catalog = ItemCatalog(Item(*row) for row in json.load(fh))
    with open(out / "vocab.json", encoding="utf-8") as fh:
        tokens = tuple(json.load(fh))
    vocab = Vocab(tokens=tokens, index={t: i + N_RESERVED for i, t in enumerate(tokens)})
    with open(out / "prompt.json", encoding="utf-8") as fh:
        prompt_cfg = PromptConfig(**json.load(fh))
    splits = {}
    for name in ("train", "valid", "test"):
        pairs = []
        with open(out / f"{name}.jsonl", encoding="utf-8") as fh:
            for line in fh:
                d = json.loads(line)
                pairs.append(PromptTargetPair(
                    pair_id=d["pair_id"],
                    user_id=d["user_id"],
                    x=TokenSeq(tuple(d["x"]), "prompt"),
                    y=TokenSeq(tuple(d["y"]), "label"),
                    target_item_id=d["target_item_id"],
                    target_category=d["target_category"],
                    target_ts=d["target_ts"],
                    history_item_ids=tuple(d["history_item_ids"]),
                    truncated=d["truncated"],
                ))
        splits[name] = pairs
    return SplitDataset(splits["train"], splits["valid"], splits["test"], catalog, vocab, prompt_cfg)
