"""Forward prediction by implicitly solving the learned discrete forced Euler–Lagrange equations"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from .diffcore import ParameterStore, as_tensor
from .discretization import MIDPOINT, Scheme, del_residual, midpoint_pair
from .errors import DimensionMismatchError, NewtonConvergenceError
from .mechanics import ForceModel, LagrangianModel, ZeroForce, lagrangian_energy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-10
    max_iters: int = 50
    max_halvings: int = 20

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"Newton tolerance must be positive, got {self.tol}")
        if self.max_iters < 1 or self.max_halvings < 0:
            raise ValueError(f"invalid Newton iteration limits: {self}")


@dataclass(frozen=True)
class NewtonOutcome:
    """Per-sample result of one batched Newton solve"""
    solution: torch.Tensor
    residual_norm: torch.Tensor
    iterations: torch.Tensor
    converged: torch.Tensor


@dataclass
class RolloutResult:
    """
    Predicted positions q̂_0..q̂_N and per-step Newton statistics.

    `positions` has shape (N+1, d), or (B, N+1, d) for batched seeds;
    the step statistics have shape (N-1,) or (B, N-1).
    """
    positions: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    residual_norms: np.ndarray

    @property
    def steps(self) -> int:
        return self.positions.shape[-2] - 1


def _require_midpoint(scheme: Scheme) -> None:
    if scheme.kind != MIDPOINT:
        raise ValueError("implicit rollout is defined for the midpoint scheme only")


def _residual(L, F, params, q_prev, q_curr, x, scheme) -> torch.Tensor:
    return del_residual(L, F, params, torch.stack([q_prev, q_curr, x], dim=-2), scheme)


def _tracked_residual(L, F, params, q_prev, q_curr, x, scheme) -> Tuple[torch.Tensor, torch.Tensor]:
    """r(x) with its graph to a fresh leaf x, so the Jacobian is only built when needed"""
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        r = _residual(L, F, params, q_prev, q_curr, x, scheme)
    return x, r


def _jacobian(r: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """J[b, i, j] = ∂r_i/∂x_j; samples are independent, so one backward pass per row"""
    d = r.shape[-1]
    if not r.requires_grad:
        return r.new_zeros(r.shape + (x.shape[-1],))
    rows = []
    for i in range(d):
        (row,) = torch.autograd.grad(r[:, i].sum(), x, retain_graph=i < d - 1, allow_unused=True)
        rows.append(torch.zeros_like(x) if row is None else row)
    return torch.stack(rows, dim=1)


def _newton_direction(J: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    delta, info = torch.linalg.solve_ex(J, -r)
    singular = info != 0
    if singular.any():
        delta = delta.clone()
        delta[singular] = (torch.linalg.pinv(J[singular]) @ (-r[singular]).unsqueeze(-1)).squeeze(-1)
    return delta


def newton_solve(
    L: LagrangianModel,
    F: ForceModel,
    params: ParameterStore,
    q_prev: torch.Tensor,
    q_curr: torch.Tensor,
    guess: torch.Tensor,
    scheme: Scheme,
    cfg: NewtonConfig,
) -> NewtonOutcome:
    """
    Batched Newton iteration with per-sample backtracking on ‖r‖∞.

    Samples stop iterating once their residual drops below `cfg.tol` or a
    full backtracking sweep fails to reduce it. An accepted full-batch
    candidate keeps its residual graph for the next Jacobian.
    """
    params = params.detached()

    def evaluate(point: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        tracked, r = _tracked_residual(L, F, params, q_prev, q_curr, point, scheme)
        return tracked, r, r.detach().abs().amax(-1)

    x, r, norm = evaluate(guess)
    iterations = torch.zeros(x.shape[0], dtype=torch.long)
    stalled = torch.zeros(x.shape[0], dtype=torch.bool)

    for _ in range(cfg.max_iters):
        active = (norm > cfg.tol) & ~stalled
        if not active.any():
            break

        delta = _newton_direction(_jacobian(r, x).detach(), r.detach())
        x = x.detach()
        step = torch.ones(x.shape[0], dtype=x.dtype)
        candidate, candidate_r, candidate_norm = evaluate(x + delta)
        for _ in range(cfg.max_halvings):
            worse = active & ~(candidate_norm < norm)
            if not worse.any():
                break
            step = torch.where(worse, step / 2, step)
            candidate, candidate_r, candidate_norm = evaluate(x + step.unsqueeze(-1) * delta)

        accepted = active & (candidate_norm < norm)
        stalled = stalled | (active & ~accepted)
        iterations = iterations + active.long()
        if accepted.all():
            x, r, norm = candidate, candidate_r, candidate_norm
        elif accepted.any():
            x, r, norm = evaluate(torch.where(accepted.unsqueeze(-1), candidate.detach(), x))
        else:
            break

    return NewtonOutcome(
        solution=x.detach(),
        residual_norm=norm,
        iterations=iterations,
        converged=norm <= cfg.tol,
    )


def solve_step(
    L: LagrangianModel,
    F: ForceModel,
    params: ParameterStore,
    q_prev,
    q_curr,
    scheme: Scheme,
    cfg: Optional[NewtonConfig] = None,
) -> NewtonOutcome:
    """
    One implicit step for a batch of seed pairs, retrying failures once from q_curr.

    Raises:
        NewtonConvergenceError: If any sample fails after the retry
    """
    _require_midpoint(scheme)
    cfg = cfg or NewtonConfig()
    q_prev, q_curr = as_tensor(q_prev), as_tensor(q_curr)
    single = q_curr.dim() == 1
    if single:
        q_prev, q_curr = q_prev.unsqueeze(0), q_curr.unsqueeze(0)
    if q_prev.shape != q_curr.shape or q_curr.shape[-1] != L.dim:
        raise DimensionMismatchError(
            f"seed positions {tuple(q_prev.shape)} and {tuple(q_curr.shape)} do not match model dimension {L.dim}"
        )

    outcome = newton_solve(L, F, params, q_prev, q_curr, 2 * q_curr - q_prev, scheme, cfg)
    if not outcome.converged.all():
        failed = ~outcome.converged
        logger.warning(
            "Newton did not converge for %d sample(s) (max residual %.3e); retrying from q_curr",
            int(failed.sum()),
            float(outcome.residual_norm[failed].max()),
        )
        retry = newton_solve(L, F, params, q_prev[failed], q_curr[failed], q_curr[failed], scheme, cfg)

        def merge(full: torch.Tensor, part: torch.Tensor) -> torch.Tensor:
            merged = full.clone()
            merged[failed] = part
            return merged

        outcome = NewtonOutcome(
            solution=merge(outcome.solution, retry.solution),
            residual_norm=merge(outcome.residual_norm, retry.residual_norm),
            iterations=merge(outcome.iterations, outcome.iterations[failed] + retry.iterations),
            converged=merge(outcome.converged, retry.converged),
        )

    if not outcome.converged.all():
        worst = float(outcome.residual_norm.max())
        logger.error("Newton failed after retry, residual %.3e", worst)
        best = outcome.solution[0] if single else outcome.solution
        raise NewtonConvergenceError(
            f"implicit step did not reach tolerance {cfg.tol:g} (residual {worst:.3e})",
            best_iterate=best.numpy(),
            residual_norm=worst,
            iterations=int(outcome.iterations.max()),
        )

    if single:
        outcome = NewtonOutcome(
            solution=outcome.solution[0],
            residual_norm=outcome.residual_norm[0],
            iterations=outcome.iterations[0],
            converged=outcome.converged[0],
        )
    return outcome


def implicit_step(
    L: LagrangianModel,
    F: ForceModel,
    params: ParameterStore,
    q_prev,
    q_curr,
    scheme: Scheme,
    cfg: Optional[NewtonConfig] = None,
) -> torch.Tensor:
    """q_next solving del_residual(q_prev, q_curr, q_next) = 0 to ‖·‖∞ ≤ tol"""
    return solve_step(L, F, params, q_prev, q_curr, scheme, cfg).solution


def rollout(
    L: LagrangianModel,
    F: ForceModel,
    params: ParameterStore,
    q0,
    q1,
    N: int,
    scheme: Scheme,
    force_on: bool = True,
    cfg: Optional[NewtonConfig] = None,
) -> RolloutResult:
    """
    Recursive prediction q̂_0..q̂_N from the seeds (q0, q1).

    Args:
        force_on: When False the learned force is replaced by zero

    Raises:
        NewtonConvergenceError: With `partial_result` holding the steps completed so far
    """
    _require_midpoint(scheme)
    if N < 1:
        raise ValueError(f"rollout length must be >= 1, got {N}")
    force = F if force_on else ZeroForce(F.dim)
    q0, q1 = as_tensor(q0), as_tensor(q1)
    single = q0.dim() == 1
    if single:
        q0, q1 = q0.unsqueeze(0), q1.unsqueeze(0)

    positions = [q0, q1]
    iterations, converged, residuals = [], [], []

    def result() -> RolloutResult:
        stacked = torch.stack(positions, dim=1).numpy()
        stats = [np.stack(s, axis=1) if s else np.zeros((q0.shape[0], 0)) for s in (iterations, converged, residuals)]
        if single:
            stacked = stacked[0]
            stats = [s[0] for s in stats]
        return RolloutResult(stacked, stats[0].astype(int), stats[1].astype(bool), stats[2].astype(float))

    with torch.no_grad():
        for step in range(N - 1):
            try:
                outcome = solve_step(L, force, params, positions[-2], positions[-1], scheme, cfg)
            except NewtonConvergenceError as error:
                error.partial_result = result()
                logger.error("Rollout stopped at step %d of %d", step + 2, N)
                raise
            positions.append(outcome.solution.detach())
            iterations.append(outcome.iterations.numpy())
            converged.append(outcome.converged.numpy())
            residuals.append(outcome.residual_norm.numpy())

    return result()


def rollout_energy(
    L: LagrangianModel,
    params: ParameterStore,
    positions,
    h: float,
) -> np.ndarray:
    """Energy v̄·∂L/∂v̄ − L at every midpoint pair of a (N+1, d) trajectory"""
    positions = as_tensor(positions)
    q, v = midpoint_pair(positions[:-1], positions[1:], h)
    return lagrangian_energy(L, params.detached(), q, v).detach().numpy()


def extrapolation_errors(predictions, truths, k: int) -> np.ndarray:
    """‖q_k − q̂_k‖² for each trajectory"""
    predictions = np.asarray(predictions, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if predictions.shape != truths.shape:
        raise DimensionMismatchError(f"prediction shape {predictions.shape} != truth shape {truths.shape}")
    if predictions.ndim != 3:
        raise DimensionMismatchError("expected trajectories of shape (N_T, N+1, d)")
    if not 0 <= k < predictions.shape[1]:
        raise DimensionMismatchError(f"step k={k} outside trajectories of {predictions.shape[1]} points")
    return ((predictions[:, k, :] - truths[:, k, :]) ** 2).sum(-1)


def extrapolation_error(predictions, truths, k: int) -> float:
    """(1/N_T) Σ ‖q_k − q̂_k‖², the mean squared error at step k without a root"""
    return float(extrapolation_errors(predictions, truths, k).mean())


def extrapolation_error_stats(predictions, truths, k: int) -> Tuple[float, float]:
    """Mean and population standard deviation of the squared error at step k"""
    errors = extrapolation_errors(predictions, truths, k)
    return float(errors.mean()), float(errors.std())


def extrapolation_error_curve(predictions, truths) -> np.ndarray:
    predictions = np.asarray(predictions, dtype=np.float64)
    return np.array([extrapolation_error(predictions, truths, k) for k in range(predictions.shape[1])])
