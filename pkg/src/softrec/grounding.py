"""Map generated token sequences to catalog items by embedding distance.

The index snapshots the model's token-embedding table, so queries are pure
functions of the snapshot: d(y, i) = ||z_y - z_i||^2 with mean-pooled token
embeddings, exhaustive scan, ties broken by item id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ItemCatalog
from .errors import ContractError
from .model import N_RESERVED, ModelState, Vocab, tokenize


@dataclass
class ItemEmbeddingIndex:
    item_ids: list[str]          # sorted
    vectors: np.ndarray          # [n_items, d_emb]
    emb_table: np.ndarray        # snapshot of the model's embedding table
    model_version: int

    def __len__(self) -> int:
        return len(self.item_ids)

    def embed_tokens(self, tokens) -> np.ndarray:
        """Mean-pool non-reserved token rows of the snapshot; zeros if none."""
        ids = [i for i in (tokens.ids if hasattr(tokens, "ids") else tokens) if i >= N_RESERVED]
        if not ids:
            return np.zeros(self.emb_table.shape[1], dtype=self.emb_table.dtype)
        return self.emb_table[np.asarray(ids, dtype=np.intp)].mean(axis=0)


def build_index(model: ModelState, catalog: ItemCatalog, vocab: Vocab) -> ItemEmbeddingIndex:
    """One pooled title embedding per catalog item, tagged with model.version."""
    if len(catalog) == 0:
        raise ContractError("build_index: empty catalog")
    emb = np.array(model.embedding(), copy=True)
    item_ids = catalog.item_ids()
    vectors = np.empty((len(item_ids), emb.shape[1]), dtype=emb.dtype)
    index = ItemEmbeddingIndex(item_ids, vectors, emb, model.version)
    for row_i, item_id in enumerate(item_ids):
        vectors[row_i] = index.embed_tokens(vocab.encode_tokens(tokenize(catalog[item_id].title)))
    return index


def is_empty_generation(tokens) -> bool:
    ids = tokens.ids if hasattr(tokens, "ids") else tokens
    return all(i < N_RESERVED for i in ids)


def ground_query(index: ItemEmbeddingIndex, query: np.ndarray, k: int,
                 candidate_rows=None) -> list[tuple[str, float]]:
    """k nearest items to a raw query vector, ascending squared L2 distance."""
    if k < 1 or k > len(index):
        raise ContractError(f"ground: k={k} out of range for {len(index)} items")
    if candidate_rows is None:
        vecs = index.vectors
        ids = index.item_ids
    else:
        vecs = index.vectors[candidate_rows]
        ids = [index.item_ids[r] for r in candidate_rows]
    diffs = vecs - query
    dists = np.einsum("ij,ij->i", diffs, diffs)
    order = np.lexsort((np.asarray(ids), dists))
    return [(ids[i], float(dists[i])) for i in order[:k]]


def ground(index: ItemEmbeddingIndex, generated, k: int) -> list[tuple[str, float]]:
    """k closest catalog items for a generated token sequence.

    An all-reserved generation grounds against the zero vector; callers can
    detect that case with is_empty_generation.
    """
    return ground_query(index, index.embed_tokens(generated), k)


def dump_index(index: ItemEmbeddingIndex, path) -> None:
    """Lossless textual dump: one JSON row per item plus a version header."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"model_version": index.model_version,
                             "d_emb": int(index.vectors.shape[1])}) + "\n")
        for item_id, vec in zip(index.item_ids, index.vectors):
            fh.write(json.dumps({"item_id": item_id, "vector": [float(v) for v in vec]}) + "\n")
