"""Zero-parameter temporal shift operators.

Channels ``[0, n_back)`` take their value from the previous frame and
channels ``[D - n_forth, D)`` from the next frame; the middle block is copied.
Frames past either clip boundary read as zeros.  Inputs are never modified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .tensor import Function, Tensor

VARIANTS = ("none", "temporal", "patch", "token")
PLACEMENTS = ("prior_residual", "prior_layernorm", "prior_branch", "post_branch")


@dataclass(frozen=True)
class ShiftSpec:
    variant: str = "token"
    frac_back: Fraction = Fraction(1, 4)
    frac_forth: Fraction = Fraction(1, 4)
    placement: str = "prior_residual"

    def __post_init__(self):
        object.__setattr__(self, "frac_back", Fraction(self.frac_back))
        object.__setattr__(self, "frac_forth", Fraction(self.frac_forth))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown shift variant {self.variant!r}; expected one of {VARIANTS}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}; expected one of {PLACEMENTS}")
        if self.frac_back < 0 or self.frac_forth < 0:
            raise ValueError("shift fractions must be non-negative")
        if self.frac_back + self.frac_forth > 1:
            raise ValueError(
                f"frac_back + frac_forth = {self.frac_back + self.frac_forth} exceeds 1"
            )

    def counts(self, dim: int) -> tuple[int, int]:
        """Channel counts ``(n_back, n_forth)`` for embedding width ``dim``."""
        if self.variant == "none":
            return 0, 0
        return math.floor(self.frac_back * dim), math.floor(self.frac_forth * dim)


def _check_counts(dim: int, n_back: int, n_forth: int) -> None:
    if n_back < 0 or n_forth < 0:
        raise ValueError(f"shift counts must be non-negative, got {n_back}, {n_forth}")
    if n_back + n_forth > dim:
        raise ValueError(f"n_back + n_forth = {n_back + n_forth} exceeds channel width {dim}")


def _shift_array(x: np.ndarray, n_back: int, n_forth: int, time_axis: int, words=None) -> np.ndarray:
    """Core data movement.  Negative counts swap directions (used by backward).

    ``words`` optionally restricts the move to a slice of the axis right after
    ``time_axis``.
    """
    out = x.copy()
    ax = time_axis % x.ndim
    dim = x.shape[-1]

    def index(t_slice, chan):
        idx = [slice(None)] * x.ndim
        idx[ax] = t_slice
        if words is not None:
            idx[ax + 1] = words
        idx[-1] = chan
        return tuple(idx)

    def move(chan, step):
        # out[t] = x[t - step]; out-of-range frames become zero
        if chan.start == chan.stop:
            return
        out[index(slice(None), chan)] = 0.0
        if step > 0:
            out[index(slice(step, None), chan)] = x[index(slice(None, -step), chan)]
        else:
            out[index(slice(None, step), chan)] = x[index(slice(-step, None), chan)]

    lo, hi = abs(n_back), abs(n_forth)
    move(slice(0, lo), 1 if n_back >= 0 else -1)
    move(slice(dim - hi, dim), -1 if n_forth >= 0 else 1)
    return out


class _Shift(Function):
    @staticmethod
    def forward(ctx, x, n_back=0, n_forth=0, time_axis=-2, words=None):
        ctx.update(n_back=n_back, n_forth=n_forth, time_axis=time_axis, words=words)
        return _shift_array(x, n_back, n_forth, time_axis, words)

    @staticmethod
    def backward(ctx, g):
        # transpose of a shift is the opposite shift on the same channel blocks
        return (_shift_array(g, -ctx["n_back"], -ctx["n_forth"], ctx["time_axis"], ctx["words"]),)


def token_shift(c: Tensor, n_back: int, n_forth: int) -> Tensor:
    """Shift channel blocks of a ``[..., T, D]`` token sequence across frames."""
    _check_counts(c.shape[-1], n_back, n_forth)
    if c.ndim < 2:
        raise ValueError(f"token_shift expects [..., T, D], got {c.shape}")
    return _Shift.apply(c, n_back=n_back, n_forth=n_forth, time_axis=-2)


def temporal_shift(z: Tensor, n_back: int, n_forth: int) -> Tensor:
    """Shift every word of a ``[..., T, N+1, D]`` embedding."""
    _check_counts(z.shape[-1], n_back, n_forth)
    if z.ndim < 3:
        raise ValueError(f"temporal_shift expects [..., T, N+1, D], got {z.shape}")
    return _Shift.apply(z, n_back=n_back, n_forth=n_forth, time_axis=-3)


def patch_shift(z: Tensor, n_back: int, n_forth: int) -> Tensor:
    """Like :func:`temporal_shift` but word 0 (the class token) is left alone."""
    _check_counts(z.shape[-1], n_back, n_forth)
    if z.ndim < 3:
        raise ValueError(f"patch_shift expects [..., T, N+1, D], got {z.shape}")
    return _Shift.apply(z, n_back=n_back, n_forth=n_forth, time_axis=-3, words=slice(1, None))


def _token_only(z: Tensor, n_back: int, n_forth: int) -> Tensor:
    _check_counts(z.shape[-1], n_back, n_forth)
    return _Shift.apply(z, n_back=n_back, n_forth=n_forth, time_axis=-3, words=slice(0, 1))


_DISPATCH = {"temporal": temporal_shift, "patch": patch_shift, "token": _token_only}


def apply_shift(z: Tensor, spec: ShiftSpec) -> Tensor:
    """Dispatch on ``spec.variant``; ``token`` touches word 0 only."""
    if not isinstance(spec, ShiftSpec):
        raise TypeError(f"expected ShiftSpec, got {type(spec).__name__}")
    if spec.variant == "none":
        return z
    n_back, n_forth = spec.counts(z.shape[-1])
    if n_back == 0 and n_forth == 0:
        return z
    return _DISPATCH[spec.variant](z, n_back, n_forth)
