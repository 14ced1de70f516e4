"""
Pairwise input-space MixUp, kept as a reference baseline:
x_mix = lam * x_i + (1 - lam) * x_j, y_mix = lam * y_i + (1 - lam) * y_j with lam ~ Beta(alpha, alpha).
"""
import numpy as np
import torch


class PairwiseMixup:
    def __init__(self, alpha: float = 1.0, seed: int = 0):
        if alpha <= 0:
            raise ValueError(f"alpha must be positive, got {alpha}")
        self.alpha = alpha
        self.rng = np.random.default_rng(seed)

    def __call__(self, x: torch.Tensor, y: torch.Tensor):
        """
        Args:
            x: (B, ...) inputs
            y: (B, K) one-hot or soft labels
        """
        lam = float(self.rng.beta(self.alpha, self.alpha))
        # pair each instance with its mirror in the batch
        x_mix = lam * x + (1.0 - lam) * x.flip(0)
        y_mix = lam * y + (1.0 - lam) * y.flip(0)
        return x_mix, y_mix, lam
