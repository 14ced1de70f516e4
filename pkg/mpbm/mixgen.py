"""
Parametric batch-wise mixup generator.

For every feature j the query and keys are projected through diag(c_j), so each
feature gets its own attention distribution over the N_b base instances while
the generator only owns three d x d matrices. All functions accept an optional
leading query dimension: z_q is (..., d), z_b is (..., N_b, d).
"""
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from mpbm.correlation import CorrelationMatrix
from mpbm.modeling import FeatureExtractor, extract
from mpbm.numerics import DTYPE, DimensionError, softmax


@dataclass
class MixupSample:
    z_mix: torch.Tensor
    y_mix: torch.Tensor


class MixupGenerator(nn.Module):
    """Holds W^Q, W^K, W^V (each d x d)."""

    def __init__(self, feature_dim: int, generator: torch.Generator = None, label_softmax: bool = True):
        super().__init__()
        self.feature_dim = feature_dim
        self.label_softmax = label_softmax
        std = 1.0 / math.sqrt(feature_dim)
        self.w_q = nn.Parameter(torch.randn(feature_dim, feature_dim, generator=generator, dtype=DTYPE) * std)
        self.w_k = nn.Parameter(torch.randn(feature_dim, feature_dim, generator=generator, dtype=DTYPE) * std)
        self.w_v = nn.Parameter(torch.randn(feature_dim, feature_dim, generator=generator, dtype=DTYPE) * std)

    def forward(self, z_q, z_b, y_b, correlation: CorrelationMatrix) -> MixupSample:
        return synthesize(z_q, z_b, y_b, correlation, self)


def _check_dims(z_q, z_b, correlation: CorrelationMatrix, params: MixupGenerator):
    d = params.feature_dim
    if z_q.shape[-1] != d or z_b.shape[-1] != d or correlation.d != d:
        raise DimensionError(
            f"Feature dimensions disagree: query {z_q.shape[-1]}, batch {z_b.shape[-1]}, "
            f"correlation {correlation.d}, generator {d}"
        )
    if z_b.dim() < 2 or z_b.shape[-2] < 1:
        raise DimensionError(f"Base batch must be (..., N_b, d) with N_b >= 1, got {tuple(z_b.shape)}")
    if z_q.shape[:-1] != z_b.shape[:-2]:
        raise DimensionError(f"Query batch {tuple(z_q.shape[:-1])} and base batches {tuple(z_b.shape[:-2])} differ")


def attention(z_q: torch.Tensor, z_b: torch.Tensor, correlation: CorrelationMatrix, params: MixupGenerator) -> torch.Tensor:
    """
    Per-feature attention scores, shape (..., d, N_b); row j is a_j.

    q_j = z_q diag(c_j) W^Q and K_j = Z_b diag(c_j) W^K, so
    q_j K_j^T [n] = sum_k Z_b[n, k] c_j[k] (W^K q_j^T)[k], which avoids building the d x N_b x d keys.
    """
    _check_dims(z_q, z_b, correlation, params)
    c = correlation.c
    d = params.feature_dim

    queries = torch.einsum("...k,jk,kl->...jl", z_q, c, params.w_q)
    projected = queries @ params.w_k.T
    scores = torch.einsum("...nk,jk,...jk->...jn", z_b, c, projected) / math.sqrt(d)
    return softmax(scores, axis=-1)


def synthesize(
    z_q: torch.Tensor,
    z_b: torch.Tensor,
    y_b: torch.Tensor,
    correlation: CorrelationMatrix,
    params: MixupGenerator,
    scores: torch.Tensor = None,
) -> MixupSample:
    """
    z_mix[j] = a_j . (Z_b W^V)[:, j]
    y_mix = softmax(mean_j a_j) Y_b   (plain mean when label_softmax is off)
    """
    if y_b.shape[:-1] != z_b.shape[:-1]:
        raise DimensionError(f"Labels {tuple(y_b.shape)} do not match base batch {tuple(z_b.shape)}")
    if scores is None:
        scores = attention(z_q, z_b, correlation, params)

    values = z_b @ params.w_v
    z_mix = torch.einsum("...jn,...nj->...j", scores, values)

    weights = scores.mean(dim=-2)
    if params.label_softmax:
        weights = softmax(weights, axis=-1)
    y_mix = (weights.unsqueeze(-2) @ y_b).squeeze(-2)
    return MixupSample(z_mix=z_mix, y_mix=y_mix)


def generate(
    x_q_hat: torch.Tensor,
    x_b: torch.Tensor,
    y_b: torch.Tensor,
    f: FeatureExtractor,
    correlation: CorrelationMatrix,
    params: MixupGenerator,
    features_only: bool = False,
):
    """
    Mixes base batches around queries in feature space.

    Args:
        x_q_hat: m x (input shape) query inputs
        x_b: m x N_b x (input shape) base inputs
        y_b: m x N_b x K one-hot labels
        features_only: return z_mix alone

    Features are extracted with a stop-gradient extractor, so only the generator receives gradients.
    """
    m, n_b = x_b.shape[:2]
    if x_q_hat.shape[0] != m:
        raise DimensionError(f"{x_q_hat.shape[0]} queries for {m} base batches")

    z_q = extract(f, x_q_hat, stop_grad=True)
    z_b = extract(f, x_b.reshape(m * n_b, *x_b.shape[2:]), stop_grad=True).reshape(m, n_b, -1)
    sample = synthesize(z_q, z_b, y_b.to(DTYPE), correlation, params)
    if features_only:
        return sample.z_mix
    return sample


def sample_base_batches(num_examples: int, m: int, n_b: int, generator: torch.Generator) -> torch.Tensor:
    """m index batches of size n_b, each drawn without replacement."""
    if n_b > num_examples:
        raise ValueError(f"Cannot draw {n_b} distinct instances from {num_examples}")
    keys = torch.rand(m, num_examples, generator=generator)
    return keys.argsort(dim=1)[:, :n_b]
