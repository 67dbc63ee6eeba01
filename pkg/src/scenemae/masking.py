"""Foreground-aware masking with background-patch dropping.

Stage 1 drops a share ``r_d`` of background patches so they never reach the
network. Stage 2 masks a share ``r_f`` of the foreground patches and fills the
rest of the overall ``r_w`` budget with background patches. The random number
generator only decides *which* patches land in each state; the counts follow
a closed form (see :func:`plan_counts`).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class DegenerateInputError(ValueError):
    """No patches would be left to feed the network."""


class PatchState(enum.IntEnum):
    VISIBLE = 0
    MASKED = 1
    DROPPED = 2


def round_ratio(ratio: float, n: int) -> int:
    """``round(ratio * n)`` with halves away from zero, evaluated in exact decimal arithmetic.

    ``0.7 * 5`` is 3.4999... in binary floating point; reading the ratio through
    its shortest repr keeps the result at 4.
    """
    q = Fraction(repr(float(ratio))) * n
    return int(q.numerator * 2 + q.denominator) // (2 * q.denominator) if q >= 0 else -round_ratio(-ratio, n)


@dataclass(frozen=True)
class PlanCounts:
    n_total: int
    n_dropped: int
    n_masked_fg: int
    n_masked_bg: int
    n_visible: int


def plan_counts(n_fg: int, n_bg: int, r_w: float, r_f: float, r_d: float, ratio_over: str = "remaining") -> PlanCounts:
    """Closed-form per-category counts of a masking plan.

    ``ratio_over="remaining"`` applies ``r_w`` to the patches left after
    dropping; ``"all"`` applies it to the full patch count (clamped to what is
    left).
    """
    n_total = n_fg + n_bg
    n_dropped = round_ratio(r_d, n_bg)
    remaining = n_total - n_dropped
    remaining_bg = n_bg - n_dropped
    n_masked_fg = round_ratio(r_f, n_fg)
    if ratio_over == "remaining":
        target = round_ratio(r_w, remaining)
    elif ratio_over == "all":
        target = min(round_ratio(r_w, n_total), remaining)
    else:
        raise ValueError(f"unknown ratio_over {ratio_over!r}")
    n_masked_bg = min(max(target - n_masked_fg, 0), remaining_bg)
    return PlanCounts(
        n_total=n_total,
        n_dropped=n_dropped,
        n_masked_fg=n_masked_fg,
        n_masked_bg=n_masked_bg,
        n_visible=remaining - n_masked_fg - n_masked_bg,
    )


@dataclass
class MaskingPlan:
    state: np.ndarray  # (M,) int8 of PatchState
    is_foreground: np.ndarray
    r_w: float
    r_f: float
    r_d: float
    counts: PlanCounts

    def indices(self, state: PatchState) -> np.ndarray:
        return np.flatnonzero(self.state == state)

    @property
    def visible(self) -> np.ndarray:
        return self.indices(PatchState.VISIBLE)

    @property
    def masked(self) -> np.ndarray:
        return self.indices(PatchState.MASKED)

    @property
    def dropped(self) -> np.ndarray:
        return self.indices(PatchState.DROPPED)

    def realized_counts(self) -> PlanCounts:
        s, fg = self.state, self.is_foreground
        return PlanCounts(
            n_total=len(s),
            n_dropped=int(np.sum(s == PatchState.DROPPED)),
            n_masked_fg=int(np.sum((s == PatchState.MASKED) & fg)),
            n_masked_bg=int(np.sum((s == PatchState.MASKED) & ~fg)),
            n_visible=int(np.sum(s == PatchState.VISIBLE)),
        )


def build_masking_plan(semantics, r_w: float = 0.7, r_f: float = 0.8, r_d: float = 0.4,
                       rng_seed=0, ratio_over: str = "remaining") -> MaskingPlan:
    """Draw a masking plan for one scene.

    ``semantics`` is a :class:`~scenemae.correspondence.PatchSemantics` or a
    boolean foreground array. ``rng_seed`` is anything accepted by
    :func:`numpy.random.default_rng`.
    """
    if not 0 <= r_d < 1:
        raise ValueError(f"r_d must lie in [0, 1), got {r_d}")
    if not 0 <= r_w <= 1:
        raise ValueError(f"r_w must lie in [0, 1], got {r_w}")
    if not r_w <= r_f <= 1:
        raise ValueError(f"r_f must lie in [r_w, 1], got r_f={r_f}, r_w={r_w}")

    fg = np.asarray(getattr(semantics, "is_foreground", semantics), dtype=bool)
    fg_idx = np.flatnonzero(fg)
    bg_idx = np.flatnonzero(~fg)
    counts = plan_counts(len(fg_idx), len(bg_idx), r_w, r_f, r_d, ratio_over)
    if counts.n_total - counts.n_dropped <= 0:
        raise DegenerateInputError("no patches remain after dropping")

    rng = np.random.default_rng(rng_seed)
    state = np.full(len(fg), PatchState.VISIBLE, dtype=np.int8)
    bg_perm = rng.permutation(bg_idx)
    state[bg_perm[: counts.n_dropped]] = PatchState.DROPPED
    bg_left = bg_perm[counts.n_dropped:]
    state[rng.permutation(fg_idx)[: counts.n_masked_fg]] = PatchState.MASKED
    state[rng.permutation(bg_left)[: counts.n_masked_bg]] = PatchState.MASKED
    return MaskingPlan(state=state, is_foreground=fg, r_w=r_w, r_f=r_f, r_d=r_d, counts=counts)
