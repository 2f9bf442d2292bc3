"""Reverse-mode gradients of a recorded scalar.

Recording and differentiation are delegated to ``torch.autograd`` in
float64. This module adds the contract on top: a ``DiffScalar`` remembers
which inputs it was recorded from and their version counters, ``grad``
refuses stale recordings and non-finite results, and repeated calls on the
same recording return identical values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import NonFiniteGradient, StaleRecording

DTYPE = torch.float64
NORM_EPS = 1e-12


def as_leaf(x) -> torch.Tensor:
    """Fresh float64 leaf tensor that records gradients."""
    return torch.tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE, requires_grad=True)


def norm_eps(v: torch.Tensor, dim: int = -1, keepdim: bool = False) -> torch.Tensor:
    """``sqrt(sum v^2 + 1e-12)``: smooth at v = 0, unlike the plain norm."""
    return torch.sqrt((v * v).sum(dim=dim, keepdim=keepdim) + NORM_EPS)


@dataclass(eq=False)
class DiffScalar:
    """A scalar (or per-sample batch of scalars, summed by ``grad``) plus its inputs."""

    tensor: torch.Tensor
    positions: torch.Tensor | None = None
    params: tuple[torch.Tensor, ...] = ()
    _versions: tuple[int, ...] = field(default=(), repr=False)

    def __post_init__(self):
        self.params = tuple(self.params)
        self._versions = tuple(t._version for t in self._inputs())

    def _inputs(self):
        if self.positions is not None:
            yield self.positions
        yield from self.params

    @property
    def value(self) -> float:
        return float(self.tensor.detach().sum())

    def is_stale(self) -> bool:
        return tuple(t._version for t in self._inputs()) != self._versions


@dataclass(frozen=True, eq=False)
class GradientResult:
    d_positions: np.ndarray | None
    d_params: np.ndarray | None


def _check_finite(arr: np.ndarray, what: str):
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = int(np.flatnonzero(bad.reshape(-1))[0])
        raise NonFiniteGradient(f"non-finite gradient w.r.t. {what} at flat index {idx}", idx)


def grad_tensors(
    scalar: DiffScalar, inputs: Sequence[torch.Tensor], create_graph: bool = False
) -> tuple[torch.Tensor, ...]:
    """Raw tensor gradients, optionally differentiable (for force-matching losses)."""
    if scalar.is_stale():
        raise StaleRecording("an input was modified in place after the forward pass")
    out = torch.autograd.grad(
        scalar.tensor.sum(),
        list(inputs),
        retain_graph=True,
        create_graph=create_graph,
        allow_unused=True,
    )
    return tuple(torch.zeros_like(t) if g is None else g for t, g in zip(inputs, out))


def grad(scalar: DiffScalar, wrt: str = "both") -> GradientResult:
    """Exact gradients of ``scalar`` w.r.t. ``positions``, ``params`` or ``both``."""
    if wrt not in ("positions", "params", "both"):
        raise ValueError(f"wrt must be positions, params or both, not {wrt!r}")
    want_pos = wrt in ("positions", "both")
    want_par = wrt in ("params", "both")
    if want_pos and scalar.positions is None:
        raise ValueError("scalar was not recorded with positions")
    inputs = []
    if want_pos:
        inputs.append(scalar.positions)
    if want_par:
        inputs.extend(scalar.params)
    if not inputs:
        return GradientResult(None, np.zeros(0) if want_par else None)
    gs = grad_tensors(scalar, inputs)
    d_pos = d_par = None
    if want_pos:
        d_pos = gs[0].detach().numpy().copy()
        _check_finite(d_pos, "positions")
        gs = gs[1:]
    if want_par:
        d_par = (
            torch.cat([g.detach().reshape(-1) for g in gs]).numpy().copy()
            if gs
            else np.zeros(0)
        )
        _check_finite(d_par, "params")
    return GradientResult(d_pos, d_par)


def flat_params(params: Sequence[torch.Tensor]) -> np.ndarray:
    return torch.cat([p.detach().reshape(-1) for p in params]).numpy().copy()
