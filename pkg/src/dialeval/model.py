"""Batched forward passes joining the encoder and the scoring head.

A Batch pre-tokenizes a list of quads once; training then only slices id
matrices. Post, response, and reference rows are stacked into a single
LSTM call since the cell is shared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node
from .corpus import Quad, Vocabulary, preprocess
from .encoder import encode_batch
from .scorer import normalize_label, regression_loss_graph, score_batch_graph


@dataclass
class Batch:
    post_ids: np.ndarray
    post_len: np.ndarray
    resp_ids: np.ndarray
    resp_len: np.ndarray
    ref_ids: np.ndarray
    ref_len: np.ndarray
    labels: np.ndarray  # normalized to {0, 0.5, 1}
    grades: np.ndarray  # raw {0, 1, 2}

    def __len__(self) -> int:
        return self.labels.shape[0]

    def take(self, idx: np.ndarray) -> "Batch":
        return Batch(
            self.post_ids[idx],
            self.post_len[idx],
            self.resp_ids[idx],
            self.resp_len[idx],
            self.ref_ids[idx],
            self.ref_len[idx],
            self.labels[idx],
            self.grades[idx],
        )


def make_batch(quads: list[Quad], vocab: Vocabulary, l_max: int = 50) -> Batch:
    def pack(token_lists):
        seqs = [preprocess(toks, vocab, l_max) for toks in token_lists]
        return np.stack([s.ids for s in seqs]), np.asarray([s.true_len for s in seqs])

    post_ids, post_len = pack([q.post for q in quads])
    resp_ids, resp_len = pack([q.response for q in quads])
    ref_ids, ref_len = pack([q.reference for q in quads])
    grades = np.asarray([q.label for q in quads], dtype=np.float64)
    labels = np.asarray([normalize_label(q.label) for q in quads])
    return Batch(post_ids, post_len, resp_ids, resp_len, ref_ids, ref_len, labels, grades)


def scores_graph(g: Graph, params: dict[str, Node], batch: Batch) -> Node:
    """Scores for every example in the batch as a (B,) node."""
    n = len(batch)
    ids = np.concatenate([batch.post_ids, batch.resp_ids, batch.ref_ids])
    lengths = np.concatenate([batch.post_len, batch.resp_len, batch.ref_len])
    enc = encode_batch(g, ids, lengths, params)
    c = g.slice(enc, 0, 0, n)
    r = g.slice(enc, 0, n, 2 * n)
    ref = g.slice(enc, 0, 2 * n, 3 * n)
    return score_batch_graph(g, c, r, ref, params)


def loss_graph(g: Graph, params: dict[str, Node], batch: Batch) -> Node:
    """Regression loss node over the batch."""
    return regression_loss_graph(g, scores_graph(g, params, batch), batch.labels)


def forward_scores(params: dict[str, np.ndarray], batch: Batch) -> np.ndarray:
    """Scores without gradients (evaluation path)."""
    g = Graph()
    nodes = {k: g.param(k, v) for k, v in params.items()}
    return scores_graph(g, nodes, batch).value.copy()
