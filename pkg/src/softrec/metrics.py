"""All-ranking evaluation: HR@K, NDCG@K, and category hit ratio at rank 1.

Candidates are every catalog item the user has not interacted with before
the target event, with the target always retained. Ranks are exact (linear
scan over the candidate set), so HR/NDCG at any cutoff are exact too.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import ItemCatalog, PromptTargetPair
from .errors import ContractError
from .grounding import ItemEmbeddingIndex, ground_query, is_empty_generation
from .model import ModelState, generate


@dataclass(frozen=True)
class RankedPrediction:
    pair_id: str
    target_item_id: str
    target_category: str
    target_rank: int                    # 1-based, always resolved exactly
    n_candidates: int
    rank1_item_id: str
    rank1_category: str
    top: tuple[tuple[str, float], ...]  # best items kept for audit
    empty_generation: bool


def rank_candidates(model: ModelState, index: ItemEmbeddingIndex, pair: PromptTargetPair,
                    catalog: ItemCatalog, max_gen_len: int,
                    keep_top: int = 20) -> RankedPrediction:
    """Generate from the pair's prompt and rank the candidate set around it."""
    if index.model_version != model.version:
        raise ContractError(
            f"stale index: built at model version {index.model_version}, "
            f"model is at {model.version}"
        )
    history = set(pair.history_item_ids)
    history.discard(pair.target_item_id)  # target retained even if re-interacted
    candidate_rows = [i for i, item_id in enumerate(index.item_ids) if item_id not in history]
    candidate_ids = [index.item_ids[i] for i in candidate_rows]
    if pair.target_item_id not in set(candidate_ids):
        raise ContractError(f"target {pair.target_item_id!r} excluded by history mask")

    generated = generate(model, pair.x, max_gen_len)
    query = index.embed_tokens(generated)
    vecs = index.vectors[candidate_rows]
    diffs = vecs - query
    dists = np.einsum("ij,ij->i", diffs, diffs)

    t_pos = candidate_ids.index(pair.target_item_id)
    t_dist = dists[t_pos]
    ids_arr = np.asarray(candidate_ids)
    rank = 1 + int(np.sum((dists < t_dist) | ((dists == t_dist) & (ids_arr < pair.target_item_id))))

    k = min(keep_top, len(candidate_ids))
    order = np.lexsort((ids_arr, dists))[:k]
    top = tuple((candidate_ids[i], float(dists[i])) for i in order)
    return RankedPrediction(
        pair_id=pair.pair_id,
        target_item_id=pair.target_item_id,
        target_category=pair.target_category,
        target_rank=rank,
        n_candidates=len(candidate_ids),
        rank1_item_id=top[0][0],
        rank1_category=catalog[top[0][0]].category,
        top=top,
        empty_generation=is_empty_generation(generated),
    )


def hit_ratio(preds: Sequence[RankedPrediction], k: int) -> float:
    if not preds:
        raise ContractError("hit_ratio: no predictions")
    return sum(1 for p in preds if p.target_rank <= k) / len(preds)


def ndcg(preds: Sequence[RankedPrediction], k: int) -> float:
    """Single-relevant-item NDCG: gain 1/log2(rank+1) inside the cutoff."""
    if not preds:
        raise ContractError("ndcg: no predictions")
    total = 0.0
    for p in preds:
        if p.target_rank <= k:
            total += 1.0 / math.log2(p.target_rank + 1)
    return total / len(preds)


def category_hit(preds: Sequence[RankedPrediction], catalog: ItemCatalog) -> float:
    """Fraction of predictions whose top-ranked item shares the target's category."""
    if not preds:
        raise ContractError("category_hit: no predictions")
    hits = 0
    for p in preds:
        if catalog[p.rank1_item_id].category == p.target_category:
            hits += 1
    return hits / len(preds)


@dataclass
class MetricsReport:
    metrics: dict[str, float]
    n_examples: int
    n_empty_generations: int
    metadata: dict = field(default_factory=dict)

    @classmethod
    def build(cls, preds: Sequence[RankedPrediction], catalog: ItemCatalog,
              k_list: Sequence[int] = (5, 20), metadata: Optional[dict] = None) -> "MetricsReport":
        if not preds:
            raise ContractError("MetricsReport: no predictions")
        ks = sorted(set(k_list) | {1, 5, 20})
        metrics: dict[str, float] = {}
        for k in ks:
            metrics[f"h@{k}"] = hit_ratio(preds, k)
            metrics[f"ng@{k}"] = ndcg(preds, k)
        metrics["hc@1"] = category_hit(preds, catalog)
        # Structural sanity: these hold by construction of exact ranks.
        for lo, hi in zip(ks, ks[1:]):
            assert metrics[f"h@{lo}"] <= metrics[f"h@{hi}"]
            assert metrics[f"ng@{lo}"] <= metrics[f"ng@{hi}"]
        for k in ks:
            assert metrics[f"ng@{k}"] <= metrics[f"h@{k}"] + 1e-12
        assert metrics["hc@1"] >= metrics["h@1"] - 1e-12
        return cls(
            metrics=metrics,
            n_examples=len(preds),
            n_empty_generations=sum(1 for p in preds if p.empty_generation),
            metadata=dict(metadata or {}),
        )

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "n_examples": self.n_examples,
            "n_empty_generations": self.n_empty_generations,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(dict(d["metrics"]), d["n_examples"], d["n_empty_generations"],
                   dict(d.get("metadata", {})))


def evaluate_pairs(model: ModelState, index: ItemEmbeddingIndex, pairs: Sequence[PromptTargetPair],
                   catalog: ItemCatalog, max_gen_len: int, k_list: Sequence[int] = (5, 20),
                   keep_top: int = 20, metadata: Optional[dict] = None
                   ) -> tuple[MetricsReport, list[RankedPrediction]]:
    preds = [rank_candidates(model, index, p, catalog, max_gen_len, keep_top) for p in pairs]
    return MetricsReport.build(preds, catalog, k_list, metadata), preds


def category_baseline(train_pairs: Sequence[PromptTargetPair],
                      test_pairs: Sequence[PromptTargetPair]) -> float:
    """Hit rate of always predicting the most common training target category."""
    counts: dict[str, int] = {}
    for p in train_pairs:
        counts[p.target_category] = counts.get(p.target_category, 0) + 1
    top_cat = max(sorted(counts), key=lambda c: counts[c])
    return sum(1 for p in test_pairs if p.target_category == top_cat) / len(test_pairs)


# ---------------------------------------------------------------------------
# Prediction persistence (audit trail; reports recompute bit-exactly)
# ---------------------------------------------------------------------------


def save_predictions(preds: Sequence[RankedPrediction], path) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps({
                "pair_id": p.pair_id,
                "target_item_id": p.target_item_id,
                "target_category": p.target_category,
                "target_rank": p.target_rank,
                "n_candidates": p.n_candidates,
                "rank1_item_id": p.rank1_item_id,
                "rank1_category": p.rank1_category,
                "top": [[i, d] for i, d in p.top],
                "empty_generation": p.empty_generation,
            }) + "\n")


def load_predictions(path) -> list[RankedPrediction]:
    preds = []
    with open(Path(path), encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            preds.append(RankedPrediction(
                pair_id=d["pair_id"],
                target_item_id=d["target_item_id"],
                target_category=d["target_category"],
                target_rank=d["target_rank"],
                n_candidates=d["n_candidates"],
                rank1_item_id=d["rank1_item_id"],
                rank1_category=d["rank1_category"],
                top=tuple((i, float(dd)) for i, dd in d["top"]),
                empty_generation=d["empty_generation"],
            ))
    return preds
