import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import torch

from loguru import logger

from mpbm.modeling import PredictionModel, input_gradient
from mpbm.numerics import gaussian


@dataclass
class SgldConfig:
    steps: int = 5
    eta: float = 0.01
    noise_scale: Optional[float] = None  # defaults to sqrt(2 * eta)
    clamp: Optional[Sequence[float]] = (0.0, 1.0)
    seed: Optional[int] = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"SGLD needs at least one step, got {self.steps}")
        if self.eta <= 0:
            raise ValueError(f"SGLD step size must be positive, got {self.eta}")
        if self.noise_scale is not None and self.noise_scale < 0:
            raise ValueError(f"noise_scale must be non-negative, got {self.noise_scale}")

    def step_size(self, t: int) -> float:
        # constant schedule
        return self.eta

    def noise_std(self, t: int) -> float:
        if self.noise_scale is not None:
            return self.noise_scale
        return math.sqrt(2 * self.step_size(t))


class QueryResult(NamedTuple):
    x: torch.Tensor
    steps: int
    diverged: bool


@torch.no_grad()
def sgld_query(
    x_seed: torch.Tensor,
    y_seed: torch.Tensor,
    model: PredictionModel,
    cfg: SgldConfig,
    generator: torch.Generator,
) -> QueryResult:
    """
    Langevin chain that ascends the prediction model's cross-entropy from the seeds:

        x^{t+1} = x^t + eta(t) * grad_x ce(h(f(x^t)), y) + sqrt(2 eta(t)) * eps^t,  eps^t ~ N(0, I)

    Rows are independent chains. The model parameters are never modified. If a gradient
    becomes non-finite the chain stops and the last finite iterate is returned with
    `diverged=True`.
    """
    x = x_seed.detach().clone()
    for t in range(1, cfg.steps + 1):
        gradient = input_gradient(model, x, y_seed)
        if not torch.isfinite(gradient).all():
            logger.warning(f"Non-finite input gradient at SGLD step {t}, returning the last finite iterate")
            return QueryResult(x=x, steps=t - 1, diverged=True)

        x_next = x + cfg.step_size(t) * gradient
        noise_std = cfg.noise_std(t)
        if noise_std > 0:
            x_next = x_next + noise_std * gaussian(x.shape, generator)
        if cfg.clamp is not None:
            x_next = x_next.clamp(cfg.clamp[0], cfg.clamp[1])

        if not torch.isfinite(x_next).all():
            logger.warning(f"Non-finite SGLD iterate at step {t}, returning the last finite iterate")
            return QueryResult(x=x, steps=t - 1, diverged=True)
        x = x_next

    return QueryResult(x=x, steps=cfg.steps, diverged=False)
