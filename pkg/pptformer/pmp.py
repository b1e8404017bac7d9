import math
from contextlib import contextmanager

import torch
import torch.nn as nn

from pptformer.errors import ConfigError, ShapeError
from pptformer.numerics import softmax_rows

_recorders = []


@contextmanager
def record_attention():
    """Collect every attention matrix computed inside the block (detached copies)."""
    weights = []
    _recorders.append(weights)
    try:
        yield weights
    finally:
        _recorders.remove(weights)


def attention_weights(q, k):
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"channel mismatch: queries have {q.shape[-1]} channels, keys {k.shape[-1]}")
    scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    weights = softmax_rows(scores.reshape(-1, scores.shape[-1])).reshape(scores.shape)
    for recorder in _recorders:
        recorder.append(weights.detach())
    return weights


def attention_step(a, b):
    """softmax(a b^T / sqrt(C)) b over token sequences of shape (..., Nt, C)."""
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"channel mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    return torch.matmul(attention_weights(a, b), b)


def self_attention(x):
    return attention_step(x, x)


def pmp_chain(x, x_pseudo, M, step=attention_step):
    """Iterative cross-attention between the original and the pseudo-perspective tokens.

    F1 = step(F, F'), F2 = step(F', F1), and F_k = step(F_{k-2}, F_{k-1}) from
    there on; returns F_M.
    """
    if M < 1:
        raise ConfigError(f"PMP chain length M must be >= 1, got {M}")
    if x.shape != x_pseudo.shape:
        raise ShapeError(f"original {tuple(x.shape)} and pseudo {tuple(x_pseudo.shape)} tokens differ in shape")
    previous, current = x_pseudo, step(x, x_pseudo)
    for _ in range(M - 1):
        previous, current = current, step(previous, current)
    return current


def calibrate(block_input, fused, L_cal, step=attention_step):
    """Re-anchor fused tokens on the block input with an L_cal long chain; L_cal = 0 returns fused."""
    if L_cal < 0:
        raise ConfigError(f"calibration length must be >= 0, got {L_cal}")
    if block_input.shape != fused.shape:
        raise ShapeError(f"block input {tuple(block_input.shape)} and fused {tuple(fused.shape)} differ in shape")
    if L_cal == 0:
        return fused
    return pmp_chain(block_input, fused, L_cal, step=step)


def to_tokens(x):
    """(B, C, H, W) map to (B, H*W, C) row-major tokens."""
    return x.flatten(2).transpose(1, 2)


def from_tokens(tokens, size):
    h, w = size
    return tokens.transpose(1, 2).reshape(tokens.shape[0], tokens.shape[2], h, w)


class ProjectedAttentionStep(nn.Module):
    """Attention step with learned query/key/value projections, for comparison with the projection-free chain."""

    def __init__(self, dim):
        super().__init__()
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)

    def forward(self, a, b):
        weights = attention_weights(self.q_proj(a), self.k_proj(b))
        return torch.matmul(weights, self.v_proj(b))
