"""Contrastive loss tying pooled original and augmented sequences together.

Head m of the original stream should match head m of the augmented stream
(same content, different rendering) and mismatch every other head. Scores
are exp(cos/tau). The denominator sums over the original pooled sequence,
self-similarity term included; with include_positive_in_denominator the
positive pair replaces that self term, which is the conventional softmax
form (loss reaches 0 when the positive dominates). Loss is the mean over
heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

_EPS = 1e-12


@dataclass
class AlignLossConfig:
    tau: float = 0.1
    include_positive_in_denominator: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError("tau must be positive")


def _unit_rows(x):
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return np.where(n > _EPS, x / np.maximum(n, _EPS), 0.0)


def alignment_contrastive_loss(pooled_orig, pooled_aug, config=None) -> float:
    """Mean over heads of -log[ exp(cos(s_m, s'_m)/tau) / sum_j exp(cos(s_m, s_j)/tau) ]."""
    config = config or AlignLossConfig()
    s = np.asarray(pooled_orig, dtype=np.float64)
    sp = np.asarray(pooled_aug, dtype=np.float64)
    if s.ndim != 2 or s.shape != sp.shape:
        raise ContractError(f"pooled shapes must match and be 2-D, got {s.shape}, {sp.shape}")
    if s.shape[0] < 1:
        raise ContractError("need at least one pooled vector")
    us, usp = _unit_rows(s), _unit_rows(sp)
    pos = np.sum(us * usp, axis=1) / config.tau              # (M,)
    grid = (us @ us.T) / config.tau                          # (M,M) over originals
    if config.include_positive_in_denominator:
        np.fill_diagonal(grid, pos)
    m = grid.max(axis=1)
    lse = np.log(np.exp(grid - m[:, None]).sum(axis=1)) + m
    return float(np.mean(lse - pos))


def build_alignment_loss(g, pooled_orig, pooled_aug, config: AlignLossConfig):
    """Graph version over batched pooled nodes (B, M, d); returns scalar node."""
    bsz, m, _ = g.nodes[pooled_orig].shape
    pos = g.div(g.cosine(pooled_orig, pooled_aug), config.tau)             # (B,M)
    grid = g.div(g.cosine(pooled_orig, pooled_orig, pairwise=True), config.tau)
    if config.include_positive_in_denominator:
        # knock the self term out of the grid, then append the positive
        grid = g.add(grid, np.where(np.eye(m, dtype=bool), -1e9, 0.0))
        grid = g.concat([grid, g.reshape(pos, (bsz, m, 1))], axis=2)
    lse = g.logsumexp(grid, axis=2)                                        # (B,M)
    return g.div(g.reduce_sum(g.sub(lse, pos)), float(bsz * m))
