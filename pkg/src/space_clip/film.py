"""Feature-wise linear modulation of semantic patch tokens.

One small generator per semantic level maps the global class vector to a
per-channel scale and shift. The output layer starts at zero and the scale
is parameterized as ``1 + delta``, so modulation is the identity at init.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class FilmParams:
    gamma: torch.Tensor  # (..., hidden_dim)
    beta: torch.Tensor  # (..., hidden_dim)


def apply_film(tokens: torch.Tensor, params: FilmParams) -> torch.Tensor:
    """``gamma * tokens + beta`` broadcast over the token axis.

    ``tokens`` is ``(N, C)`` or ``(B, N, C)``; gamma/beta are ``(C,)`` or ``(B, C)``.
    """
    width, glen = tokens.shape[-1], params.gamma.shape[-1]
    if width != glen or params.beta.shape[-1] != glen:
        raise ValueError(
            f"token width {width} does not match FiLM width {glen} (beta {params.beta.shape[-1]})"
        )
    gamma, beta = params.gamma, params.beta
    if tokens.dim() == 3 and gamma.dim() == 2:
        gamma, beta = gamma.unsqueeze(1), beta.unsqueeze(1)
    return gamma * tokens + beta


class FilmGenerator(nn.Module):
    def __init__(self, cond_dim: int, feature_dim: int, hidden_width: int | None = None):
        super().__init__()
        hidden_width = hidden_width or cond_dim
        self.feature_dim = feature_dim
        self.hidden = nn.Linear(cond_dim, hidden_width)
        self.act = nn.GELU()
        self.out = nn.Linear(hidden_width, 2 * feature_dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, cls_vector: torch.Tensor) -> FilmParams:
        delta_gamma, beta = self.out(self.act(self.hidden(cls_vector))).chunk(2, dim=-1)
        return FilmParams(gamma=1.0 + delta_gamma, beta=beta)


class FilmBank(nn.Module):
    """Independent generators, one per semantic level."""

    def __init__(self, hidden_dim: int, num_levels: int, hidden_width: int | None = None):
        super().__init__()
        self.generators = nn.ModuleList(
            FilmGenerator(hidden_dim, hidden_dim, hidden_width) for _ in range(num_levels)
        )

    @property
    def num_levels(self) -> int:
        return len(self.generators)

    def generate_film_params(self, cls_vector: torch.Tensor, level: int) -> FilmParams:
        if not 0 <= level < self.num_levels:
            raise ValueError(f"FiLM level {level} out of range [0, {self.num_levels})")
        return self.generators[level](cls_vector)

    def forward(self, tokens: torch.Tensor, cls_vector: torch.Tensor, level: int) -> torch.Tensor:
        return apply_film(tokens, self.generate_film_params(cls_vector, level))
