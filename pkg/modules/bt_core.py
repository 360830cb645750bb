#!/usr/bin/env python3
"""
Barlow Twins kernels - batch normalization, cross-correlation, the loss itself,
the lambda rule and the combined segmentation objective.

All functions are pure and differentiable through torch autograd.
"""

from dataclasses import dataclass

import torch

SOURCE = "source"
TARGET = "target"


@dataclass(frozen=True)
class LossWeights:
    lambda_bt: float
    alpha: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        if not self.lambda_bt > 0:
            raise ValueError(f"lambda_bt must be > 0, got {self.lambda_bt}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")

    @classmethod
    def for_dim(cls, p, alpha=0.1, epsilon=1e-5, rule="inverse_dim"):
        return cls(lambda_bt=default_lambda(p, rule), alpha=alpha, epsilon=epsilon)


def _check_embedding(z, name="z"):
    if z.dim() != 2:
        raise ValueError(f"{name} must be a (batch, dim) matrix, got shape {tuple(z.shape)}")
    if z.shape[0] < 2:
        raise ValueError(f"{name} needs a batch of at least 2 rows, got {z.shape[0]}")
    if not torch.isfinite(z).all():
        raise ValueError(f"{name} contains non-finite values")


def batch_normalize(z, epsilon=1e-5):
    """Per-dimension normalization across the batch: (z - mean) / sqrt(var + eps).

    Uses the population variance; constant columns map to zero.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    _check_embedding(z)
    mean = z.mean(dim=0, keepdim=True)
    centered = z - mean
    var = centered.pow(2).mean(dim=0, keepdim=True)
    return centered / torch.sqrt(var + epsilon)


def cross_correlation(z_a, z_b):
    """C[i, j] = (1/b) * sum_k z_a[k, i] * z_b[k, j]"""
    if z_a.shape != z_b.shape or z_a.dim() != 2:
        raise ValueError(f"embedding shapes differ: {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
    return z_a.transpose(0, 1) @ z_b / z_a.shape[0]


def bt_loss(c, lambda_bt):
    """Invariance term on the diagonal plus lambda-weighted redundancy term off it"""
    if c.dim() != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cross-correlation must be square, got shape {tuple(c.shape)}")
    diag = torch.diagonal(c)
    on_diag = (1.0 - diag).pow(2).sum()
    off_mask = ~torch.eye(c.shape[0], dtype=torch.bool, device=c.device)
    off_diag = c[off_mask].pow(2).sum()
    return on_diag + lambda_bt * off_diag


def default_lambda(p, rule="inverse_dim"):
    """Off-diagonal weight from the embedding width.

    ``inverse_dim`` is the 1/p approximation, ``exact_ratio`` the ratio of
    diagonal to off-diagonal entries, p / (p (p - 1)).
    """
    if isinstance(p, bool) or int(p) != p or p < 2:
        raise ValueError(f"embedding dimension must be an integer >= 2, got {p}")
    if rule == "inverse_dim":
        return 1.0 / p
    if rule == "exact_ratio":
        return 1.0 / (p - 1)
    raise ValueError(f"unknown lambda rule '{rule}'")


def combined_loss(l_ce, l_bt, alpha):
    """L = L_ce + alpha * L_bt"""
    for name, value in (("l_ce", l_ce), ("l_bt", l_bt), ("alpha", alpha)):
        scalar = float(value.detach()) if torch.is_tensor(value) else float(value)
        if scalar != scalar or scalar in (float("inf"), float("-inf")):
            raise ValueError(f"{name} is not finite")
        if scalar < 0:
            raise ValueError(f"{name} must be >= 0, got {scalar}")
    return l_ce + alpha * l_bt


def bt_loss_from_raw(z_a, z_b, weights):
    """Normalize both embeddings, correlate them and score the result"""
    if z_a.shape != z_b.shape:
        raise ValueError(f"embedding shapes differ: {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
    n_a = batch_normalize(z_a, weights.epsilon)
    n_b = batch_normalize(z_b, weights.epsilon)
    return bt_loss(cross_correlation(n_a, n_b), weights.lambda_bt)
