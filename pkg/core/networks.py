"""
core/networks.py — The ε-prediction network used for every trained model.

The layer vocabulary is deliberately closed: sinusoidal timestep embedding,
dense layers, SiLU/ReLU, concatenation.  `bind(params)` evaluates the module
at an arbitrary ParamVector without touching its registered parameters, which
is how perturbed, averaged and quantized weights are evaluated.
"""
from __future__ import annotations

import math
from collections.abc import Callable

import torch
from torch import nn
from torch.func import functional_call

from core.numerics import ParamVector, Rng
from models.run_config import Activation, ModelConfig

EpsPredictor = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    """[cos(t·f_k), sin(t·f_k)] with geometric frequencies f_k = max_period^(−k/half)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64).reshape(-1, 1) * freqs.reshape(1, -1)
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class EpsModel(nn.Module):
    """MLP ε_θ(x_t, t): concat(x_t, e_t) → hidden layers → d outputs."""

    def __init__(self, spec: ModelConfig) -> None:
        super().__init__()
        self.spec = spec
        widths = [spec.dim + spec.embed_dim, *spec.hidden]
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths, widths[1:]))
        self.out = nn.Linear(widths[-1], spec.dim)
        self.act: nn.Module = nn.SiLU() if spec.activation == Activation.silu else nn.ReLU()

    @classmethod
    def initialised(cls, spec: ModelConfig, rng: Rng, dtype: torch.dtype = torch.float32) -> "EpsModel":
        """Build with default torch initialisation drawn from `rng`'s seed."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(rng.seed)
            model = cls(spec)
        return model.to(dtype)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = sinusoidal_embedding(t, self.spec.embed_dim).to(x.dtype)
        h = torch.cat([x, emb], dim=-1)
        for layer in self.hidden:
            h = self.act(layer(h))
        return self.out(h)

    def activation_pattern(self, params: ParamVector, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Sign of every hidden pre-activation at `params`, flattened.

        Two parameter vectors with equal patterns lie on the same linear piece
        of a ReLU network for these inputs.
        """
        weights = params.as_dict()
        h = torch.cat([x, sinusoidal_embedding(t, self.spec.embed_dim).to(x.dtype)], dim=-1)
        signs = []
        with torch.no_grad():
            for i in range(len(self.hidden)):
                pre = h @ weights[f"hidden.{i}.weight"].T + weights[f"hidden.{i}.bias"]
                signs.append((pre > 0).reshape(-1))
                h = self.act(pre)
        return torch.cat(signs)

    def params(self) -> ParamVector:
        return ParamVector.from_module(self)

    def bind(self, params: ParamVector) -> EpsPredictor:
        """Predictor evaluating this architecture at `params` (differentiable in params)."""
        weights = params.as_dict()

        def predict(x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
            return functional_call(self, weights, (x, t))

        return predict
