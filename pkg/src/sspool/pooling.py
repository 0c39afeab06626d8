"""Boundary prediction and Gaussian-kernel soft pooling.

A small conv net scores each frame with a boundary probability b_n. The
running sum a_n = b_1 + ... + b_n acts as a soft segment index: it advances
by one every time a boundary's worth of probability mass accumulates. Head m
(m = 1..M) attends to frames whose a_n is near m through a Gaussian kernel
exp(-(a_n - m)^2 / (2 sigma^2)), normalized over frames, and pools frame
vectors under those weights. With hard 0/1 boundaries and sigma -> 0 this
degenerates to averaging each segment, which is the sanity anchor the tests
pin down. Kernels are evaluated in log space; a head whose best frame is
below exp(-60) has no usable mass and raising that is a hard error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import conv1d_forward, sigmoid
from .errors import ContractError, DegeneratePoolingError

LOG_KERNEL_FLOOR = -60.0


@dataclass
class AttentionConfig:
    sigma: float = 0.5
    head_divisor: int = 4  # M = ceil(N / this)

    def __post_init__(self):
        if self.sigma <= 0:
            raise ContractError("sigma must be positive")
        if self.head_divisor < 1:
            raise ContractError("head_divisor must be >= 1")


@dataclass
class BoundarySequence:
    probs: np.ndarray  # (N,) in (0, 1)
    cum: np.ndarray    # (N,) running sum of probs

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.cum = np.asarray(self.cum, dtype=np.float64)
        if self.probs.ndim != 1 or self.probs.shape != self.cum.shape:
            raise ContractError("probs and cum must be matching 1-D arrays")


def n_heads(n_frames, config: AttentionConfig) -> int:
    if n_frames < 1:
        raise ContractError("need at least one frame")
    return -(-n_frames // config.head_divisor)  # ceil


def _edge_pad_indices(n, kernel):
    """Frame indices that repeat the first and last frame so a width-k conv
    returns one score per frame without seeing phantom silence at the edges."""
    left, right = (kernel - 1) // 2, kernel // 2
    return np.concatenate(
        [np.zeros(left, dtype=np.int64), np.arange(n), np.full(right, n - 1)]
    )


def predict_boundaries(z, model) -> BoundarySequence:
    """Frame-wise boundary probabilities from a conv scorer over z."""
    v = np.asarray(getattr(z, "values", z), dtype=np.float32)
    if v.ndim != 2:
        raise ContractError(f"z must be (N, dim), got {v.shape}")
    if v.shape[0] < 2:
        raise ContractError("need at least two frames to score boundaries")
    p = model.params
    k = p["bnd.conv.w"].shape[0]
    h = conv1d_forward(v[_edge_pad_indices(v.shape[0], k)][None], p["bnd.conv.w"], 1, (0, 0))
    h = np.tanh(h + p["bnd.conv.b"])
    score = h[0] @ p["bnd.out.w"] + p["bnd.out.b"]
    probs = sigmoid(score[:, 0].astype(np.float64))
    return BoundarySequence(probs=probs, cum=np.cumsum(probs))


def log_kernels(cum, m, sigma):
    """Unnormalized log attention, shape (M, N): -(a_n - m)^2 / (2 sigma^2)."""
    cum = np.asarray(cum, dtype=np.float64)
    centers = np.arange(1, m + 1, dtype=np.float64)[:, None]
    d = cum[None, :] - centers
    return -0.5 * d * d / (sigma * sigma)


def attention_weights(boundaries, config=None, heads=None):
    """Normalized attention matrix alpha (M, N); rows sum to one.

    heads overrides the head count derived from the frame count (used when an
    augmented sequence must share M with its original). Raises
    DegeneratePoolingError naming the first head whose best frame falls below
    the log-kernel floor.
    """
    config = config or AttentionConfig()
    cum = boundaries.cum if isinstance(boundaries, BoundarySequence) else np.asarray(boundaries)
    n = cum.shape[0]
    m = n_heads(n, config) if heads is None else int(heads)
    lk = log_kernels(cum, m, config.sigma)
    rowmax = lk.max(axis=1)
    bad = np.flatnonzero(rowmax < LOG_KERNEL_FLOOR)
    if bad.size:
        head = int(bad[0]) + 1  # heads are 1-indexed
        raise DegeneratePoolingError(head, float(rowmax[bad[0]]))
    w = np.exp(lk - rowmax[:, None])
    return w / w.sum(axis=1, keepdims=True)


def soft_pool(z, boundaries, config=None, heads=None):
    """Pool frame vectors under boundary-driven attention; returns (M, dim)."""
    v = np.asarray(getattr(z, "values", z), dtype=np.float64)
    if v.ndim != 2:
        raise ContractError(f"z must be (N, dim), got {v.shape}")
    cum = boundaries.cum if isinstance(boundaries, BoundarySequence) else np.asarray(boundaries)
    if cum.shape[0] != v.shape[0]:
        raise ContractError(
            f"boundaries cover {cum.shape[0]} frames but z has {v.shape[0]}"
        )
    alpha = attention_weights(cum, config=config, heads=heads)
    return alpha @ v


def extract_hard_boundaries(probs, threshold=0.5, min_gap=4):
    """Frame indices of boundary peaks.

    A candidate frame is at or above threshold, rises from its left neighbor
    (plateaus count only their first frame), and does not rise further to the
    right. Candidates are kept greedily by descending probability; anything
    within min_gap frames of a kept peak is suppressed. Returns sorted indices.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ContractError("probs must be 1-D")
    if not 0.0 < threshold < 1.0:
        raise ContractError("threshold must be in (0, 1)")
    if min_gap < 1:
        raise ContractError("min_gap must be >= 1")
    n = p.size
    cand = [
        i
        for i in range(n)
        if p[i] >= threshold
        and (i == 0 or p[i] > p[i - 1])
        and (i == n - 1 or p[i] >= p[i + 1])
    ]
    kept = []
    for i in sorted(cand, key=lambda i: (-p[i], i)):
        if all(abs(i - j) >= min_gap for j in kept):
            kept.append(i)
    return sorted(kept)


def boundary_times(indices, frame_rate=100.0):
    """Frame index i corresponds to time i / frame_rate seconds."""
    return [i / frame_rate for i in indices]


# ---- graph builders (training) ----------------------------------------------


def build_boundary_probs(g, z_node, config, pnodes):
    """Batched boundary probabilities (B, N) from frame node (B, N, d)."""
    k = g.nodes[pnodes["bnd.conv.w"]].shape[0]
    n_in = g.nodes[z_node].shape[1]
    padded = g.take(z_node, g.constant(_edge_pad_indices(n_in, k)))
    h = g.conv1d(padded, pnodes["bnd.conv.w"], stride=1, pad=(0, 0))
    h = g.tanh(g.add(h, pnodes["bnd.conv.b"]))
    score = g.affine(h, pnodes["bnd.out.w"], pnodes["bnd.out.b"])  # (B,N,1)
    bsz, n, _ = g.nodes[score].shape
    return g.sigmoid(g.reshape(score, (bsz, n)))


def build_soft_pool(g, z_node, b_node, m, sigma, mask_node=None):
    """Soft pooling inside a graph; returns (pooled, rowmax) nodes.

    mask_node (B, N) zeroes padded frames: their probabilities drop out of
    the running sum and their kernels are pushed far below the floor.
    rowmax (B, M, 1) is the per-head max log-kernel, read by the trainer to
    enforce the degenerate-head floor.
    """
    bsz, n, d = g.nodes[z_node].shape
    b_eff = g.mul(b_node, mask_node) if mask_node is not None else b_node
    a = g.cumsum(b_eff, axis=1)                                    # (B,N)
    centers = np.arange(1, m + 1, dtype=np.float64).reshape(1, m, 1)
    diff = g.sub(g.reshape(a, (bsz, 1, n)), g.constant(centers))
    lk = g.mul(g.square(diff), -0.5 / (sigma * sigma))             # (B,M,N)
    if mask_node is not None:
        off = g.reshape(g.mul(g.sub(mask_node, 1.0), 1e9), (bsz, 1, n))
        lk = g.add(lk, off)
    rowmax = g.reduce_max(lk, axis=2, keepdims=True)               # (B,M,1)
    w = g.exp(g.sub(lk, rowmax))
    alpha = g.div(w, g.reduce_sum(w, axis=2, keepdims=True))
    pooled = g.matmul(alpha, z_node)                               # (B,M,d)
    return pooled, rowmax
