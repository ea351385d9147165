"""Compliance minimization with an optimality-criteria update.

The design variable is a per-element void fraction: 0 is solid, 1 is
empty. Each iteration smooths the complementary solid field, applies
the milling projections when directions are given, solves equilibrium,
and rescales the multiplicative update until the projected volume
meets the target.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .fea import (
    FeaProblem,
    SolveResult,
    compliance_sensitivity,
    solve,
    volume_fraction,
    volume_sensitivity,
)
from .filters import FilterKernel, apply_filter, filter_backprop
from .machining import (
    HeavisideParams,
    MillingDirection,
    ProjectionCache,
    combine_directions,
    project_all,
    projection_backprop,
)

MODES = ("reference", "machining")

# per-iteration cap on relative volume change while the iterate is away from
# the volume limit; on the limit the update reduces to plain bisection
_VOLUME_RATE = 0.1


class OptimizationError(RuntimeError):
    """Raised when the volume search cannot be completed."""


@dataclass(frozen=True)
class OptimizationConfig:
    """Knobs for the optimization loop.

    ``max_iterations=None`` picks 300 on 2D grids and 200 on 3D grids.
    ``mode="reference"`` skips the milling projections so the run reduces
    to plain filtered density optimization.
    """

    volume_limit: float
    mode: str = "machining"
    max_iterations: int | None = None
    change_tolerance: float = 0.01
    move_limit: float = 0.2
    damping: float = 0.5
    initial_void: float = 0.7
    sensitivity_floor: float = 1e-10
    volume_tolerance: float = 1e-4
    lagrange_min: float = 1e-9
    lagrange_max: float = 1e9

    def __post_init__(self) -> None:
        if not 0.0 < self.volume_limit < 1.0:
            raise ValueError(f"volume_limit must be in (0, 1), got {self.volume_limit}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.move_limit <= 1.0:
            raise ValueError(f"move_limit must be in (0, 1], got {self.move_limit}")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError(f"damping must be in (0, 1], got {self.damping}")
        if not 0.0 <= self.initial_void <= 1.0:
            raise ValueError(f"initial_void must be in [0, 1], got {self.initial_void}")
        if self.change_tolerance <= 0.0:
            raise ValueError("change_tolerance must be positive")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not 0.0 < self.lagrange_min < self.lagrange_max:
            raise ValueError("lagrange bounds must satisfy 0 < min < max")
        if self.volume_tolerance <= 0.0:
            raise ValueError("volume_tolerance must be positive")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    compliance: float
    volume: float
    change: float
    # seconds since the run started; excluded from equality so identical
    # runs still compare bitwise-equal on the numerics
    wall_time: float = field(default=0.0, compare=False)


@dataclass(frozen=True)
class FieldState:
    """All density fields derived from one design vector."""

    rho_void: np.ndarray
    rho_solid: np.ndarray
    cache: ProjectionCache | None
    rho_physical: np.ndarray

    @property
    def volume(self) -> float:
        return volume_fraction(self.rho_physical)


@dataclass(frozen=True)
class OptimizationResult:
    state: FieldState
    fea: SolveResult
    history: list[IterationRecord]
    converged: bool

    @property
    def compliance(self) -> float:
        return self.fea.compliance

    @property
    def volume(self) -> float:
        return self.state.volume


class Optimizer:
    """Pairs a structural problem with a filter and optional millings.

    The instance keeps the last displacement field so consecutive
    iterative solves start warm.
    """

    def __init__(
        self,
        problem: FeaProblem,
        kernel: FilterKernel,
        config: OptimizationConfig,
        directions: list[MillingDirection] | None = None,
        solver: str = "auto",
        rtol: float = 1e-8,
        heaviside: HeavisideParams = HeavisideParams(),
    ):
        directions = list(directions) if directions else []
        if config.mode == "machining" and not directions:
            raise ValueError("machining mode needs at least one milling direction")
        n = problem.grid.num_elements
        for md in directions:
            if md.num_elements != n:
                raise ValueError("milling direction was built for a different grid")
        self.problem = problem
        self.kernel = kernel
        self.config = config
        self.directions = directions
        self.solver = solver
        self.rtol = rtol
        self.heaviside = heaviside
        self._warm: np.ndarray | None = None

    def evaluate_fields(self, rho_void: np.ndarray) -> FieldState:
        """Run the projection chain only; no equilibrium solve."""
        solid = apply_filter(self.kernel, rho_void)
        if self.config.mode == "reference":
            return FieldState(rho_void, solid, None, solid)
        cache = project_all(self.directions, solid, self.heaviside)
        return FieldState(rho_void, solid, cache, combine_directions(cache.fields))

    def solve_state(self, state: FieldState) -> SolveResult:
        result = solve(
            self.problem,
            state.rho_physical,
            solver=self.solver,
            rtol=self.rtol,
            warm_start=self._warm,
        )
        self._warm = result.displacement
        return result

    def backpropagate(self, state: FieldState, grad_physical: np.ndarray) -> np.ndarray:
        """Chain a gradient w.r.t. the physical field down to rho_void."""
        if self.config.mode == "reference":
            grad_solid = grad_physical
        else:
            grad_solid = projection_backprop(
                self.directions, state.rho_solid, state.cache, grad_physical, self.heaviside
            )
        return filter_backprop(self.kernel, grad_solid)

    def total_gradients(
        self, state: FieldState, fea: SolveResult
    ) -> tuple[np.ndarray, np.ndarray]:
        """Compliance and volume gradients w.r.t. rho_void."""
        grad_c = compliance_sensitivity(self.problem, state.rho_physical, fea)
        grad_v = volume_sensitivity(self.problem.grid.num_elements)
        return self.backpropagate(state, grad_c), self.backpropagate(state, grad_v)

    def _candidate(self, material: np.ndarray, scale_base: np.ndarray, lam: float) -> np.ndarray:
        cfg = self.config
        ratio = np.minimum(scale_base / lam, 1e30)
        target = material * ratio**cfg.damping
        stepped = np.clip(target, material - cfg.move_limit, material + cfg.move_limit)
        return np.clip(stepped, 0.0, 1.0)

    def oc_update(
        self, state: FieldState, grad_c_void: np.ndarray, grad_v_void: np.ndarray
    ) -> tuple[FieldState, float]:
        """One damped multiplicative step on the material fraction 1 - rho_void.

        The Lagrange multiplier is bisected on a log scale until the
        candidate's projected volume matches this step's target. Each
        probe re-runs the projection chain only; the equilibrium solve
        is not touched.

        The target approaches the limit at a bounded relative rate
        rather than in one jump: the move cap bounds design change but
        not volume change (the projection can amplify a capped step
        into a huge volume swing, and a tight multiplier then prices
        out even load-critical elements). Once the limit is reached the
        target equals the limit and the step is the plain bisection.
        Elements whose volume sensitivity underflows to zero (deep
        shadow zones saturate the projection) pin at the upward move
        cap for any multiplier. When no multiplier brackets the target,
        the extreme candidate on the blocked side is taken; a limit is
        diagnosed as unreachable only when that candidate cannot move
        the design at all.
        """
        cfg = self.config
        current = state.volume
        if current > cfg.volume_limit:
            target = max(cfg.volume_limit, current * (1.0 - _VOLUME_RATE))
        else:
            target = min(cfg.volume_limit, current * (1.0 + _VOLUME_RATE))
        material = 1.0 - state.rho_void
        # gradients w.r.t. material flip sign; only the numerator is floored,
        # a zero denominator deliberately yields an infinite ratio
        num = np.maximum(cfg.sensitivity_floor, grad_c_void)
        den = -grad_v_void
        scale_base = np.divide(num, den, out=np.full_like(num, np.inf), where=den > 0.0)

        def measure(lam: float) -> tuple[FieldState, float]:
            cand = self._candidate(material, scale_base, lam)
            new_state = self.evaluate_fields(1.0 - cand)
            return new_state, new_state.volume

        lo, hi = cfg.lagrange_min, cfg.lagrange_max
        state_lo, vol_lo = measure(lo)  # loosest multiplier: max achievable volume
        if abs(vol_lo - target) < cfg.volume_tolerance:
            return state_lo, self._change(state, state_lo)
        state_hi, vol_hi = measure(hi)  # tightest multiplier: min achievable volume
        if abs(vol_hi - target) < cfg.volume_tolerance:
            return state_hi, self._change(state, state_hi)
        if not vol_hi < target < vol_lo:
            # blocked bracket: the extreme candidate on the blocked side is
            # the best step the formula offers, either marching toward an
            # out-of-reach target or riding out a transient sensitivity
            # spike that prices elements outside the multiplier range; only
            # a standstill is a dead end worth diagnosing
            best = state_hi if vol_hi > target else state_lo
            change = self._change(state, best)
            if change > 0.0:
                return best, change
            raise OptimizationError(
                f"volume limit {cfg.volume_limit} is unreachable: the move cap "
                f"only allows [{vol_hi:.6f}, {vol_lo:.6f}] and the update "
                f"cannot move the design from volume {current:.6f}"
            )
        for _ in range(200):
            mid = math.sqrt(lo * hi)
            state_mid, vol_mid = measure(mid)
            if abs(vol_mid - target) < cfg.volume_tolerance:
                return state_mid, self._change(state, state_mid)
            if vol_mid > target:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-12 * lo:
                break
        raise OptimizationError(
            f"volume search stalled: wanted {target}, "
            f"best bracket [{lo:.3e}, {hi:.3e}] gives {vol_mid}"
        )

    @staticmethod
    def _change(old: FieldState, new: FieldState) -> float:
        return float(np.abs(new.rho_void - old.rho_void).max())

    def run(
        self,
        initial_void: np.ndarray | None = None,
        callback=None,
    ) -> OptimizationResult:
        """Iterate until the design settles on the volume limit or the cap hits.

        Every history row describes one fully evaluated design: the
        compliance, the projected volume, and the largest design-variable
        move that produced it.
        """
        cfg = self.config
        n = self.problem.grid.num_elements
        if initial_void is None:
            rho_void = np.full(n, float(cfg.initial_void))
        else:
            rho_void = np.asarray(initial_void, dtype=float).copy()
            if rho_void.shape != (n,):
                raise ValueError(f"initial field must have shape ({n},)")
            if rho_void.min() < 0.0 or rho_void.max() > 1.0:
                raise ValueError("initial field must lie in [0, 1]")
        cap = cfg.max_iterations
        if cap is None:
            cap = 300 if self.problem.grid.ndim == 2 else 200

        started = time.perf_counter()
        state = self.evaluate_fields(rho_void)
        fea = self.solve_state(state)
        history: list[IterationRecord] = []
        converged = False
        for it in range(1, cap + 1):
            grad_c, grad_v = self.total_gradients(state, fea)
            state, change = self.oc_update(state, grad_c, grad_v)
            fea = self.solve_state(state)
            record = IterationRecord(
                it, fea.compliance, state.volume, change,
                wall_time=time.perf_counter() - started,
            )
            history.append(record)
            if callback is not None:
                callback(record)
            # a small design change only counts as converged once the volume
            # sits on the limit; during the rate-capped approach it does not
            on_limit = abs(state.volume - cfg.volume_limit) < 2 * cfg.volume_tolerance
            if change < cfg.change_tolerance and on_limit:
                converged = True
                break
        return OptimizationResult(state=state, fea=fea, history=history, converged=converged)
