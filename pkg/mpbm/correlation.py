from dataclasses import dataclass

import torch
from torch.utils.data import DataLoader

from loguru import logger

from mpbm.numerics import DTYPE, DimensionError


MAX_ROWS = 10_000


@dataclass(frozen=True)
class CorrelationMatrix:
    """Row-normalized absolute Pearson correlations; row j is the scaler c_j."""
    c: torch.Tensor

    @property
    def d(self) -> int:
        return self.c.shape[0]

    def row(self, j: int) -> torch.Tensor:
        if not 0 <= j < self.d:
            raise IndexError(f"Feature index {j} out of range for d={self.d}")
        return self.c[j]


def pearson_matrix(features: torch.Tensor, max_rows: int = MAX_ROWS, generator: torch.Generator = None) -> torch.Tensor:
    """
    Pearson coefficients between the columns of an N x d feature matrix.

    Zero-variance columns correlate 0 with every other column and 1 with themselves.
    When N exceeds `max_rows` a uniform subsample of rows is used.
    """
    if features.dim() != 2:
        raise DimensionError(f"Expected an N x d matrix, got shape {tuple(features.shape)}")
    n, d = features.shape
    if n < 2:
        raise ValueError(f"Pearson correlation needs at least 2 rows, got {n}")

    features = features.detach().to(DTYPE)
    if max_rows is not None and n > max_rows:
        index = torch.randperm(n, generator=generator)[:max_rows]
        features = features[index]

    centered = features - features.mean(dim=0, keepdim=True)
    scale = features.abs().amax(dim=0).clamp_min(1.0)
    dead = centered.norm(dim=0) <= 1e-12 * scale * features.shape[0] ** 0.5

    raw = torch.corrcoef(features.T)
    raw = torch.where(dead[:, None] | dead[None, :], torch.zeros_like(raw), raw)
    raw = raw.clamp(-1.0, 1.0)
    raw = 0.5 * (raw + raw.T)
    raw.fill_diagonal_(1.0)

    if dead.any():
        logger.debug(f"{int(dead.sum())} of {d} feature columns are constant")
    return raw


def normalize_rows(raw: torch.Tensor) -> CorrelationMatrix:
    if raw.dim() != 2 or raw.shape[0] != raw.shape[1]:
        raise DimensionError(f"Expected a square matrix, got shape {tuple(raw.shape)}")
    magnitude = raw.abs()
    return CorrelationMatrix(c=magnitude / magnitude.sum(dim=1, keepdim=True))


def diag_scale(c: CorrelationMatrix, j: int, m: torch.Tensor) -> torch.Tensor:
    """m @ diag(c_j), computed as a broadcast over the last dimension."""
    row = c.row(j)
    if m.shape[-1] != row.shape[0]:
        raise DimensionError(f"Last dimension {m.shape[-1]} does not match d={row.shape[0]}")
    return m * row


@torch.no_grad()
def extract_features(extractor: torch.nn.Module, dataset, batch_size: int = 256) -> torch.Tensor:
    was_training = extractor.training
    extractor.eval()
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    features = torch.cat([extractor(x) for x, _ in loader], dim=0)
    if was_training: extractor.train()
    return features


def compute_correlation(
    extractor: torch.nn.Module,
    dataset,
    *,
    max_rows: int = MAX_ROWS,
    generator: torch.Generator = None,
    batch_size: int = 256,
) -> CorrelationMatrix:
    """Correlation matrix of the training-set features under a frozen extractor."""
    if max_rows is not None and len(dataset) > max_rows:
        index = torch.randperm(len(dataset), generator=generator)[:max_rows]
        dataset = dataset.subset(index)
    features = extract_features(extractor, dataset, batch_size=batch_size)
    return normalize_rows(pearson_matrix(features, max_rows=None))
