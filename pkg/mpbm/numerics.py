"""
Tensor arithmetic used by every loss in the package.

Tensors are float64 `torch.Tensor`s, the gradient tape is the torch autograd graph
and random streams are seeded `torch.Generator`s. The helpers below validate shapes
and values before handing off to torch so that the domain modules get descriptive
errors instead of broadcasting surprises.
"""
import math
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from loguru import logger


DTYPE = torch.float64
SIMPLEX_TOL = 1e-6


class DimensionError(ValueError):
    pass


class InvariantError(ValueError):
    pass


def as_tensor(data, shape: Sequence[int] = None) -> torch.Tensor:
    """Builds a float64 tensor, rejecting NaN/Inf entries and inconsistent shapes."""
    tensor = torch.as_tensor(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(shape)
        if math.prod(shape) != tensor.numel():
            raise DimensionError(f"Cannot view {tensor.numel()} values as shape {shape}")
        tensor = tensor.reshape(shape)
    if not torch.isfinite(tensor).all():
        raise InvariantError("Tensor contains non-finite entries")
    return tensor


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions disagree: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax(v: torch.Tensor, axis: int = -1) -> torch.Tensor:
    # torch subtracts the running max before exponentiating
    return torch.softmax(v, dim=axis)


def check_simplex(p: torch.Tensor, tol: float = SIMPLEX_TOL, name: str = "target"):
    if (p < -tol).any():
        raise InvariantError(f"{name} has negative entries (min {p.min().item():.3e})")
    deviation = (p.sum(dim=-1) - 1).abs().max().item()
    if deviation > tol:
        raise InvariantError(f"{name} rows are off the probability simplex (max |sum - 1| = {deviation:.3e})")


def cross_entropy(pred_logits: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """
    Cross-entropy against probability-vector targets.

    Args:
        pred_logits: N x K logits
        target: N x K rows on the probability simplex (one-hot or soft)
        reduction: "mean" over rows (the supervised loss) or "sum" (per-instance input gradients)
    """
    if pred_logits.shape != target.shape:
        raise DimensionError(f"logits {tuple(pred_logits.shape)} and target {tuple(target.shape)} differ")
    check_simplex(target.detach())
    # differentiable in the target as well, the generated labels depend on the generator
    per_row = -(target * F.log_softmax(pred_logits, dim=-1)).sum(dim=-1)
    if reduction == "mean":
        return per_row.mean()
    if reduction == "sum":
        return per_row.sum()
    raise ValueError(f"Unknown reduction {reduction}")


def grad(loss: torch.Tensor, wrt: Sequence[torch.Tensor], retain_graph: bool = False) -> list[torch.Tensor]:
    """
    Reverse-mode gradients of a scalar loss.

    Tensors in `wrt` that do not take part in the graph get an exact zero gradient
    and are reported with a warning.
    """
    if loss.numel() != 1:
        raise DimensionError(f"grad expects a scalar loss, got shape {tuple(loss.shape)}")

    wrt = list(wrt)
    grads = [torch.zeros_like(t) for t in wrt]
    attached = [i for i, t in enumerate(wrt) if t.requires_grad] if loss.requires_grad else []
    unused = [i for i in range(len(wrt)) if i not in attached]
    if attached:
        computed = torch.autograd.grad(
            loss, [wrt[i] for i in attached], retain_graph=retain_graph, allow_unused=True,
        )
        for i, g in zip(attached, computed):
            if g is None:
                unused.append(i)
            else:
                grads[i] = g

    if unused:
        logger.warning(f"Inputs {sorted(unused)} are detached from the loss, returning zero gradients")
    return grads


def derive_seed(seed: int, *keys: int) -> int:
    """Stable child seed for an independent random stream."""
    state = np.random.SeedSequence([seed, *keys]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def make_generator(seed: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def gaussian(shape: Iterable[int], generator: torch.Generator) -> torch.Tensor:
    return torch.randn(tuple(shape), generator=generator, dtype=DTYPE)
