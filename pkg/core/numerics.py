"""
core/numerics.py — Seeded randomness, flat parameter vectors and gradients.

Every trainable model in the package is handled through a `ParamVector`: one
flat tensor plus an ordered segment table.  Perturbations, averaging,
quantization and checkpointing all operate on that flat view, while
`torch.func.functional_call` maps it back onto the module for evaluation.

Gradients come from torch autograd; `gradient_check` certifies them against
central finite differences in float64.
"""
from __future__ import annotations

import hashlib
import math
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass
from typing import Optional, Union

import torch
from torch import nn

from core.errors import LayoutMismatchError, NumericFailureError

Label = Union[str, int]


# ─── Randomness ───────────────────────────────────────────────────────────────

class Rng:
    """
    A seeded CPU generator plus deterministic, label-addressed sub-streams.

    `child("step", 17, "noise")` always yields the same stream for the same
    parent seed, no matter how much the parent has been consumed, so
    experiments do not depend on evaluation order.
    """

    ALGORITHM = "torch-mt19937/blake2b-substreams"

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.generator = torch.Generator(device="cpu")
        self.generator.manual_seed(self.seed)

    def child(self, *labels: Label) -> "Rng":
        h = hashlib.blake2b(digest_size=8)
        h.update(str(self.seed).encode())
        for label in labels:
            h.update(b"\x1f" + str(label).encode())
        return Rng(int.from_bytes(h.digest(), "little"))

    def normal(self, shape: Sequence[int], dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.randn(tuple(shape), generator=self.generator, dtype=dtype)

    def uniform(self, shape: Sequence[int], dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.rand(tuple(shape), generator=self.generator, dtype=dtype)

    def integers(self, low: int, high: int, shape: Sequence[int]) -> torch.Tensor:
        """Uniform integers in [low, high)."""
        return torch.randint(low, high, tuple(shape), generator=self.generator)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, algorithm={self.ALGORITHM!r})"


def gaussian_sample(rng: Rng, shape: Sequence[int], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """I.i.d. standard normal tensor drawn from (and advancing) `rng`."""
    return rng.normal(shape, dtype=dtype)


# ─── Flat parameter vectors ───────────────────────────────────────────────────

@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def stop(self) -> int:
        return self.offset + self.numel


class ParamVector:
    """
    Flat, ordered view of a model's trainable parameters.

    Segment order follows `nn.Module.named_parameters()` and is therefore
    fixed per architecture.  Arithmetic never mutates `values` in place;
    every operation returns a new vector sharing the segment table.
    """

    __slots__ = ("segments", "values")

    def __init__(self, segments: Sequence[Segment], values: torch.Tensor) -> None:
        segments = tuple(segments)
        expected = 0
        for seg in segments:
            if seg.offset != expected:
                raise LayoutMismatchError(
                    f"Segment '{seg.name}' starts at {seg.offset}, expected {expected}."
                )
            expected = seg.stop
        if values.dim() != 1 or values.numel() != expected:
            raise LayoutMismatchError(
                f"Value array of shape {tuple(values.shape)} does not match a "
                f"segment table covering {expected} entries."
            )
        self.segments = segments
        self.values = values

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamVector":
        segments: list[Segment] = []
        chunks: list[torch.Tensor] = []
        offset = 0
        for name, p in module.named_parameters():
            if not p.requires_grad:
                continue
            segments.append(Segment(name, tuple(p.shape), offset))
            chunks.append(p.detach().reshape(-1))
            offset += p.numel()
        values = torch.cat(chunks).clone() if chunks else torch.zeros(0)
        return cls(segments, values)

    @classmethod
    def from_table(cls, table: Sequence[dict], values: torch.Tensor) -> "ParamVector":
        """Rebuild from the JSON segment table written into checkpoints."""
        return cls([Segment(t["name"], tuple(t["shape"]), int(t["offset"])) for t in table], values)

    # ── Layout ────────────────────────────────────────────────────────────────

    @property
    def numel(self) -> int:
        return self.values.numel()

    @property
    def dtype(self) -> torch.dtype:
        return self.values.dtype

    def __len__(self) -> int:
        return self.numel

    def same_layout(self, other: "ParamVector") -> bool:
        return self.segments == other.segments

    def check_layout(self, other: "ParamVector") -> None:
        if not self.same_layout(other):
            raise LayoutMismatchError("ParamVector layouts differ.")

    def table(self) -> list[dict]:
        return [{"name": s.name, "shape": list(s.shape), "offset": s.offset} for s in self.segments]

    def iter_segments(self) -> Iterator[tuple[Segment, torch.Tensor]]:
        for seg in self.segments:
            yield seg, self.values[seg.offset:seg.stop]

    def segment(self, name: str) -> torch.Tensor:
        for seg in self.segments:
            if seg.name == name:
                return self.values[seg.offset:seg.stop].view(seg.shape)
        raise KeyError(name)

    def as_dict(self) -> dict[str, torch.Tensor]:
        """Per-segment views, shaped for `torch.func.functional_call`."""
        return {s.name: self.values[s.offset:s.stop].view(s.shape) for s in self.segments}

    # ── Construction helpers ──────────────────────────────────────────────────

    def like(self, values: torch.Tensor) -> "ParamVector":
        return ParamVector(self.segments, values)

    def copy(self) -> "ParamVector":
        return self.like(self.values.detach().clone())

    def to(self, dtype: torch.dtype) -> "ParamVector":
        return self.like(self.values.detach().to(dtype).clone())

    def zeros(self) -> "ParamVector":
        return self.like(torch.zeros_like(self.values))

    def load_into(self, module: nn.Module) -> None:
        views = self.as_dict()
        with torch.no_grad():
            for name, p in module.named_parameters():
                if name in views:
                    p.copy_(views[name])

    # ── Reductions (64-bit accumulation) ─────────────────────────────────────

    def norm(self) -> float:
        return float(torch.linalg.vector_norm(self.values.detach().double()))

    def rms(self) -> float:
        if self.numel == 0:
            return 0.0
        return self.norm() / math.sqrt(self.numel)

    def first_nonfinite_segment(self) -> Optional[str]:
        for seg, chunk in self.iter_segments():
            if not torch.isfinite(chunk).all():
                return seg.name
        return None

    def __repr__(self) -> str:
        names = ", ".join(s.name for s in self.segments[:4])
        more = "…" if len(self.segments) > 4 else ""
        return f"ParamVector(n={self.numel}, dtype={self.dtype}, segments=[{names}{more}])"


def param_axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return a·x + y elementwise."""
    x.check_layout(y)
    return y.like(torch.add(y.values.detach(), x.values.detach(), alpha=a))


# ─── Gradients ────────────────────────────────────────────────────────────────

LossFn = Callable[[ParamVector], torch.Tensor]


def grad(loss_fn: LossFn, params: ParamVector) -> tuple[float, ParamVector]:
    """
    Evaluate `loss_fn` at `params` and its reverse-mode gradient.

    The closure receives a ParamVector whose values require grad; it must
    return a scalar tensor.  Raises NumericFailureError naming the first
    segment with a non-finite value or gradient.
    """
    values = params.values.detach().clone().requires_grad_(True)
    loss = torch.as_tensor(loss_fn(params.like(values)))
    loss_finite = bool(torch.isfinite(loss).all())

    if loss.requires_grad:
        (g,) = torch.autograd.grad(loss, values, allow_unused=True)
    else:
        g = None
    if g is None:
        g = torch.zeros_like(values)
    gradient = params.like(g.detach())

    if not loss_finite:
        segment = params.first_nonfinite_segment() or gradient.first_nonfinite_segment()
        raise NumericFailureError(
            f"Non-finite loss ({float(loss.detach())}); first offending segment: {segment or 'loss'}.",
            segment=segment,
        )
    bad = gradient.first_nonfinite_segment()
    if bad is not None:
        raise NumericFailureError(f"Non-finite gradient in segment '{bad}'.", segment=bad)
    return float(loss.detach()), gradient


SameBranch = Callable[[ParamVector, ParamVector], bool]


def finite_difference_grad(
    loss_fn: LossFn,
    params: ParamVector,
    h: float = 1e-3,
    same_branch: Optional[SameBranch] = None,
) -> ParamVector:
    """Central differences (L(w+h·e_i) − L(w−h·e_i)) / 2h, evaluated in float64.

    When `same_branch(upper, lower)` is False the pair straddles a kink of a
    piecewise-smooth loss and coordinate i is left as NaN.
    """
    base = params.values.detach().to(torch.float64)
    out = torch.empty_like(base)
    with torch.no_grad():
        for i in range(base.numel()):
            up, down = base.clone(), base.clone()
            up[i] += h
            down[i] -= h
            upper, lower = params.like(up), params.like(down)
            if same_branch is not None and not same_branch(upper, lower):
                out[i] = math.nan
                continue
            out[i] = (float(loss_fn(upper)) - float(loss_fn(lower))) / (2 * h)
    return params.like(out)


def gradient_check(
    loss_fn: LossFn,
    params: ParamVector,
    h: float = 1e-3,
    same_branch: Optional[SameBranch] = None,
) -> float:
    """Relative ℓ2 error between autodiff and central finite differences (float64).

    Coordinates skipped by `same_branch` are dropped from both gradients.
    """
    params64 = params.to(torch.float64)
    _, analytic = grad(loss_fn, params64)
    numeric = finite_difference_grad(loss_fn, params64, h, same_branch)
    kept = torch.isfinite(numeric.values)
    if not bool(kept.any()):
        raise NumericFailureError("Every coordinate straddles a kink; nothing left to compare.")
    a, n = analytic.values[kept], numeric.values[kept]
    scale = max(float(torch.linalg.vector_norm(n)), float(torch.linalg.vector_norm(a)), 1e-12)
    return float(torch.linalg.vector_norm(a - n)) / scale
