"""
core/optim.py — Training-step algorithms: base descent, SAM, SWA/EMA averaging
and post-hoc EMA over a checkpoint series.

The base step is a real torch optimizer (SGD or Adam) driving a single flat
`nn.Parameter` that mirrors the live ParamVector.  SAM wraps it with one extra
gradient evaluation at the ascent point; with ρ = 0 it calls the base step on
the very same gradient, so the two paths are bitwise identical.

Averager accumulators are float64 and never alias the live parameters.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import torch
from torch import nn

from core.errors import ConfigurationError, NumericFailureError
from core.numerics import LossFn, ParamVector, grad, param_axpy
from models.run_config import EmaConfig, OptimConfig, OptimizerKind, SwaConfig

logger = logging.getLogger(__name__)


# ─── Base optimizer ───────────────────────────────────────────────────────────

class OptimizerState:
    """Owns the torch optimizer, its flat parameter and the SAM skip counter."""

    def __init__(self, cfg: OptimConfig, template: ParamVector) -> None:
        self.cfg = cfg
        self.weight = nn.Parameter(template.values.detach().clone())
        self.optimizer = self._build(cfg)
        self.steps = 0
        self.sam_skips = 0
        self.last_loss: Optional[float] = None

    def _build(self, cfg: OptimConfig) -> torch.optim.Optimizer:
        if cfg.kind == OptimizerKind.sgd:
            return torch.optim.SGD([self.weight], lr=cfg.lr, foreach=False)
        return torch.optim.Adam(
            [self.weight],
            lr=cfg.lr,
            betas=(cfg.adam.beta1, cfg.adam.beta2),
            eps=cfg.adam.eps,
            foreach=False,
        )

    def apply(self, params: ParamVector, gradient: ParamVector, lr: float) -> ParamVector:
        with torch.no_grad():
            self.weight.copy_(params.values)
        self.weight.grad = gradient.values.detach().to(self.weight.dtype).clone()
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        self.steps += 1
        return params.like(self.weight.detach().clone())

    # ── Adam moments, for bitwise resume ──────────────────────────────────────

    def adam_moments(self) -> Optional[dict]:
        state = self.optimizer.state.get(self.weight)
        if self.cfg.kind != OptimizerKind.adam or not state:
            return None
        return {
            "step": int(state["step"]),
            "exp_avg": state["exp_avg"].detach().clone(),
            "exp_avg_sq": state["exp_avg_sq"].detach().clone(),
        }

    def load_adam_moments(self, step: int, exp_avg: torch.Tensor, exp_avg_sq: torch.Tensor) -> None:
        if self.cfg.kind != OptimizerKind.adam:
            raise ConfigurationError("Adam moments given for a non-Adam optimizer.")
        self.optimizer.state[self.weight] = {
            "step": torch.tensor(float(step), dtype=torch.float32),
            "exp_avg": exp_avg.to(self.weight.dtype).clone(),
            "exp_avg_sq": exp_avg_sq.to(self.weight.dtype).clone(),
        }


def learning_rate(cfg: OptimConfig, step: int) -> float:
    """Per-iteration learning rate. Constant; cyclic schedules would plug in here."""
    return cfg.lr


def base_step(
    params: ParamVector,
    gradient: ParamVector,
    cfg: OptimConfig,
    state: OptimizerState,
    step: int = 0,
) -> ParamVector:
    params.check_layout(gradient)
    bad = gradient.first_nonfinite_segment()
    if bad is not None:
        raise NumericFailureError(f"Non-finite gradient in segment '{bad}'.", segment=bad)
    return state.apply(params, gradient, learning_rate(cfg, step))


def sam_step(
    loss_fn: LossFn,
    params: ParamVector,
    cfg: OptimConfig,
    state: OptimizerState,
    step: int = 0,
) -> ParamVector:
    """
    ŵ = w + ρ·∇L(w)/‖∇L(w)‖, then a base step at w using ∇L(ŵ).

    The loss at w is kept in `state.last_loss`.  A zero gradient with ρ > 0
    skips the ascent and is counted in `state.sam_skips`.
    """
    loss, g = grad(loss_fn, params)
    state.last_loss = loss
    rho = cfg.sam.rho
    if rho == 0:
        return base_step(params, g, cfg, state, step)

    norm = g.norm()
    if norm == 0.0:
        state.sam_skips += 1
        logger.debug("SAM ascent skipped at step %d: zero gradient", step)
        return base_step(params, g, cfg, state, step)

    ascent_point = param_axpy(rho / norm, g, params)
    _, g_ascent = grad(loss_fn, ascent_point)
    return base_step(params, g_ascent, cfg, state, step)


# ─── Averaging ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class AveragerState:
    swa: ParamVector            # float64 running mean
    n_models: int
    ema: ParamVector            # float64

    @classmethod
    def start(cls, params: ParamVector) -> "AveragerState":
        return cls(swa=params.to(torch.float64), n_models=0, ema=params.to(torch.float64))

    def swa_params(self, dtype: torch.dtype = torch.float32) -> ParamVector:
        return self.swa.to(dtype)

    def ema_params(self, dtype: torch.dtype = torch.float32) -> ParamVector:
        return self.ema.to(dtype)


def swa_update(state: AveragerState, w: ParamVector, step: int, cfg: SwaConfig) -> AveragerState:
    """Absorb w into the running mean when step ≥ start and step is a multiple of the cycle."""
    if step < cfg.start or step % cfg.cycle:
        return state
    state.swa.check_layout(w)
    n = state.n_models
    mean = (state.swa.values * n + w.values.detach().to(torch.float64)) / (n + 1)
    return replace(state, swa=state.swa.like(mean), n_models=n + 1)


def ema_update(state: AveragerState, w: ParamVector, cfg: EmaConfig) -> AveragerState:
    """w_EMA ← (1−λ)·w_EMA + λ·w; λ weights the new parameters."""
    state.ema.check_layout(w)
    lam = cfg.momentum
    blended = (1.0 - lam) * state.ema.values + lam * w.values.detach().to(torch.float64)
    return replace(state, ema=state.ema.like(blended))


# ─── Post-hoc EMA ─────────────────────────────────────────────────────────────

@dataclass
class CheckpointSeries:
    entries: list[tuple[int, ParamVector]] = field(default_factory=list)

    def append(self, step: int, params: ParamVector) -> None:
        if self.entries:
            last_step, first = self.entries[-1][0], self.entries[0][1]
            if step <= last_step:
                raise ConfigurationError(f"Checkpoint steps must increase: {step} after {last_step}.")
            first.check_layout(params)
        self.entries.append((step, params))

    @property
    def steps(self) -> list[int]:
        return [s for s, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def posthoc_ema(series: CheckpointSeries, gamma: float) -> ParamVector:
    """
    Power-function EMA rebuilt from saved checkpoints:
    θ̂(t) = β(t)·θ̂(t−1) + (1−β(t))·θ(t), β(t) = (1 − 1/t)^(γ+1), t = 1, 2, … over the series.
    """
    if not series.entries:
        raise ConfigurationError("Post-hoc EMA needs at least one checkpoint.")
    if gamma < 0:
        raise ConfigurationError(f"gamma must be ≥ 0, got {gamma}.")
    template = series.entries[0][1]
    acc = torch.zeros(template.numel, dtype=torch.float64)
    for t, (_, params) in enumerate(series.entries, start=1):
        beta = (1.0 - 1.0 / t) ** (gamma + 1.0)
        acc = beta * acc + (1.0 - beta) * params.values.detach().to(torch.float64)
    return template.like(acc)
