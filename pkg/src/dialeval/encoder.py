"""Token embedding plus a single-layer LSTM; the last hidden state is the
sequence representation shared by post, response, and reference."""

from __future__ import annotations

import numpy as np

from .autodiff import Graph, Node
from .corpus import TokenSeq
from .optim import Adam, clip_global_norm

# Gate blocks inside the fused 4H dimension, in order: input, forget,
# candidate, output.
N_GATES = 4


class EmptySequenceError(ValueError):
    pass


class CorpusTooSmallError(ValueError):
    pass


def init_encoder_params(
    rng: np.random.Generator, vocab_size: int, embed_dim: int, hidden_dim: int, init_scale: float = 0.08
) -> dict[str, np.ndarray]:
    """Fresh encoder weights, uniform in [-init_scale, init_scale]."""
    if vocab_size < 2:
        raise ValueError("vocabulary must reserve pad and unknown ids")
    u = lambda *shape: rng.uniform(-init_scale, init_scale, size=shape)
    return {
        "emb": u(vocab_size, embed_dim),
        "w_x": u(embed_dim, N_GATES * hidden_dim),
        "w_h": u(hidden_dim, N_GATES * hidden_dim),
        "b": np.zeros(N_GATES * hidden_dim),
    }


def lstm_step(g: Graph, x: Node, h: Node, c: Node, params: dict[str, Node]) -> tuple[Node, Node]:
    """One LSTM recurrence. Works on single vectors (E,)/(H,) or batches
    (B,E)/(B,H); gate weights are fused along the last axis."""
    z = g.add(g.add(g.matmul(x, params["w_x"]), g.matmul(h, params["w_h"])), params["b"])
    hid = z.shape[-1] // N_GATES
    axis = z.value.ndim - 1
    gate = lambda k: g.slice(z, axis=axis, start=k * hid, stop=(k + 1) * hid)
    i = g.sigmoid(gate(0))
    f = g.sigmoid(gate(1))
    cand = g.tanh(gate(2))
    o = g.sigmoid(gate(3))
    c_new = g.add(g.mul(f, c), g.mul(i, cand))
    h_new = g.mul(o, g.tanh(c_new))
    return h_new, c_new


def encode(g: Graph, seq: TokenSeq, params: dict[str, Node]) -> Node:
    """Run the LSTM over exactly seq.true_len tokens; pads are never consumed."""
    if seq.true_len == 0:
        raise EmptySequenceError("cannot encode an empty sequence")
    hid = params["w_h"].shape[0]
    h = g.constant(np.zeros(hid))
    c = g.constant(np.zeros(hid))
    for t in range(seq.true_len):
        x = g.gather(params["emb"], seq.ids[t])
        h, c = lstm_step(g, x, h, c, params)
    return h


def encode_batch(g: Graph, ids: np.ndarray, lengths: np.ndarray, params: dict[str, Node]) -> Node:
    """Encode B sequences at once. Rows past their true length are frozen by
    masking, so the result matches per-sequence encode exactly."""
    if ids.ndim != 2:
        raise ValueError(f"ids must be (B, L), got {ids.shape}")
    if np.any(lengths <= 0):
        raise EmptySequenceError("cannot encode an empty sequence")
    batch, _ = ids.shape
    hid = params["w_h"].shape[0]
    h = g.constant(np.zeros((batch, hid)))
    c = g.constant(np.zeros((batch, hid)))
    for t in range(int(lengths.max())):
        x = g.gather(params["emb"], ids[:, t])
        h_new, c_new = lstm_step(g, x, h, c, params)
        alive = (lengths > t).astype(np.float64)[:, None]
        if alive.all():
            h, c = h_new, c_new
        else:
            keep = g.constant(alive)
            drop = g.constant(1.0 - alive)
            h = g.add(g.mul(keep, h_new), g.mul(drop, h))
            c = g.add(g.mul(keep, c_new), g.mul(drop, c))
    return h


# --- matching-model pretraining ------------------------------------------------


def _roll_rows(g: Graph, mat: Node) -> Node:
    n = mat.shape[0]
    return g.concat([g.slice(mat, 0, 1, n), g.slice(mat, 0, 0, 1)], axis=0)


def _matching_loss(g: Graph, params: dict[str, Node], posts, resps) -> Node:
    """Binary matching objective: true (post, response) pairs against in-batch
    negatives, scored by the sigmoid of the encoding dot product (plus a
    trained offset that sets the operating point; it is dropped afterwards)."""
    batch = len(posts)
    ids = np.concatenate([np.stack([s.ids for s in posts]), np.stack([s.ids for s in resps])])
    lengths = np.asarray([s.true_len for s in posts] + [s.true_len for s in resps])
    enc = encode_batch(g, ids, lengths, params)
    p_enc = g.slice(enc, 0, 0, batch)
    r_enc = g.slice(enc, 0, batch, 2 * batch)
    pos = g.add(g.sum(g.mul(p_enc, r_enc), axis=1), params["match_bias"])
    neg = g.add(g.sum(g.mul(p_enc, _roll_rows(g, r_enc)), axis=1), params["match_bias"])
    # -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
    return g.scale(g.add(g.mean(g.softplus(g.scale(pos, -1.0))), g.mean(g.softplus(neg))), 0.5)


def pretrain_encoder(
    pairs: list[tuple[TokenSeq, TokenSeq]],
    params: dict[str, np.ndarray],
    epochs: int,
    rng: np.random.Generator,
    batch_size: int = 32,
    lr: float = 1e-3,
    clip_norm: float = 5.0,
) -> dict[str, np.ndarray]:
    """Train the encoder as a matching model over (post, response) pairs.

    Returns a new parameter dict; the input is left untouched. Fully seeded:
    the same rng state yields bit-identical weights.
    """
    params = {k: v.copy() for k, v in params.items()}
    if epochs == 0:
        return params
    if len(pairs) < batch_size:
        raise CorpusTooSmallError(f"{len(pairs)} pairs is smaller than one batch of {batch_size}")
    opt = Adam(lr=lr)
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), batch_size):
            chunk = order[start : start + batch_size]
            if len(chunk) < 2:
                continue  # a single pair has no in-batch negative
            g = Graph()
            nodes = {k: g.param(k, v) for k, v in params.items()}
            loss = _matching_loss(g, nodes, [pairs[i][0] for i in chunk], [pairs[i][1] for i in chunk])
            grads = g.backward(loss)
            clip_global_norm(grads, clip_norm)
            opt.step(params, grads)
    return params


def matching_accuracy(
    pairs: list[tuple[TokenSeq, TokenSeq]], params: dict[str, np.ndarray], rng: np.random.Generator
) -> float:
    """Fraction of pairs whose true response outscores a random other response."""
    g = Graph()
    nodes = {k: g.param(k, v) for k, v in params.items()}
    posts = [p for p, _ in pairs]
    resps = [r for _, r in pairs]
    ids = np.concatenate([np.stack([s.ids for s in posts]), np.stack([s.ids for s in resps])])
    lengths = np.asarray([s.true_len for s in posts] + [s.true_len for s in resps])
    enc = encode_batch(g, ids, lengths, nodes).value
    p_enc, r_enc = enc[: len(pairs)], enc[len(pairs) :]
    neg_idx = np.array([(i + 1 + rng.integers(len(pairs) - 1)) % len(pairs) for i in range(len(pairs))])
    pos = np.sum(p_enc * r_enc, axis=1)
    neg = np.sum(p_enc * r_enc[neg_idx], axis=1)
    return float(np.mean(pos > neg))
