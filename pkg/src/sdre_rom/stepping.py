"""Implicit Euler time stepping, trajectory rollout and cost evaluation.

The true dynamics is exposed through :class:`Plant`, an observe-only wrapper
that keeps the parameter configuration hidden from the caller.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .models import LowRankQ, SemilinearModel

__all__ = [
    "TimeGrid",
    "Trajectory",
    "NewtonError",
    "implicit_euler_step",
    "Plant",
    "observe_plant",
    "simulate_trajectory",
    "evaluate_cost",
]

TOL_NEWTON = 1e-10
MAX_NEWTON_ITERS = 50


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid t_i = t0 + i*dt, i = 0..steps."""

    dt: float
    steps: int
    t0: float = 0.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.steps < 1:
            raise ValueError("need at least one step")

    @classmethod
    def from_horizon(cls, horizon: float, dt: float, t0: float = 0.0) -> "TimeGrid":
        steps = int(round(horizon / dt))
        return cls(dt=dt, steps=steps, t0=t0)

    @property
    def horizon(self) -> float:
        return self.steps * self.dt

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)


@dataclass
class Trajectory:
    """States x(t_i) and the controls held constant on [t_i, t_{i+1})."""

    states: np.ndarray  # (steps+1, d)
    controls: np.ndarray  # (steps, m)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.controls = np.atleast_2d(np.asarray(self.controls, dtype=float))
        if len(self.states) != len(self.controls) + 1:
            raise ValueError("need exactly one more state than controls")

    @property
    def steps(self) -> int:
        return len(self.controls)

    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def state_norms(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=1)


class NewtonError(RuntimeError):
    """Newton iteration failed; carries the last residual norm."""

    def __init__(self, message, residual_norm):
        super().__init__(f"{message} (last residual {residual_norm:.3e})")
        self.residual_norm = residual_norm


def newton_solve(residual, jacobian, x0, *, tol, max_iters, dense=False):
    """Solve residual(x) = 0 by Newton with a direct linear solve.

    ``jacobian`` returns either a sparse matrix (factored with splu) or a
    dense array. Tolerance is relative to 1 + |x0|.
    """
    x = np.array(x0, dtype=float)
    scale = tol * (1.0 + np.linalg.norm(x0))
    res = residual(x)
    for _ in range(max_iters):
        rnorm = np.linalg.norm(res)
        if rnorm <= scale:
            return x
        J = jacobian(x)
        if dense or isinstance(J, np.ndarray):
            dx = np.linalg.solve(J, -res)
        else:
            dx = spla.splu(J.tocsc()).solve(-res)
        x = x + dx
        res = residual(x)
    rnorm = np.linalg.norm(res)
    if rnorm <= scale:
        return x
    raise NewtonError("implicit Euler Newton did not converge", rnorm)


def _jfnk_step(residual, x0, tol, max_iters):
    """Matrix-free Newton-Krylov: GMRES on finite-difference J*v products."""
    x = np.array(x0, dtype=float)
    scale = tol * (1.0 + np.linalg.norm(x0))
    d = x.size
    for _ in range(max_iters):
        res = residual(x)
        if np.linalg.norm(res) <= scale:
            return x
        base = res

        def matvec(v, x=x, base=base):
            eps = 1e-7 * max(1.0, np.linalg.norm(x)) / max(np.linalg.norm(v), 1e-30)
            return (residual(x + eps * v) - base) / eps

        op = spla.LinearOperator((d, d), matvec=matvec)
        dx, info = spla.gmres(op, -res, rtol=1e-12, atol=0.0, maxiter=200)
        if info != 0:
            raise NewtonError("GMRES inner solve stalled", np.linalg.norm(res))
        x = x + dx
    res = residual(x)
    if np.linalg.norm(res) <= scale:
        return x
    raise NewtonError("implicit Euler Newton did not converge", np.linalg.norm(res))


def implicit_euler_step(
    model: SemilinearModel,
    mu,
    x: np.ndarray,
    u,
    dt: float,
    *,
    tol: float = TOL_NEWTON,
    max_iters: int = MAX_NEWTON_ITERS,
    solver: str = "direct",
    gain=None,
):
    """One implicit Euler step of x' = A(x; mu) x + B u.

    Solves z - dt*(A(z; mu) z + B u) = x for z. With ``gain`` set, the
    control is coupled into the solve as u(t) = -K z (closed-loop variant);
    otherwise u is held fixed over the step.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    u = np.atleast_1d(np.asarray(u, dtype=float))
    Bu = model.B @ u
    d = model.d
    BK = None if gain is None else model.B @ np.atleast_2d(gain)

    def residual(z):
        out = z - x - dt * (model.action(z, mu) + (Bu if gain is None else -(BK @ z)))
        return out

    def jacobian(z):
        J = sp.identity(d, format="csc") - dt * model.jacobian(z, mu)
        if gain is not None:
            J = J + dt * sp.csc_matrix(BK)
        return J

    if solver == "direct":
        return newton_solve(residual, jacobian, x, tol=tol, max_iters=max_iters)
    if solver == "jfnk":
        return _jfnk_step(residual, x, tol, max_iters)
    raise ValueError(f"unknown solver '{solver}'")


class Plant:
    """Observe-only black box around the true dynamics.

    The true configuration is stored privately; callers only see the map
    (state, control, interval) -> next state.
    """

    def __init__(self, model: SemilinearModel, mu_star, *, solver: str = "direct"):
        self._model = model
        self._mu_star = np.asarray(mu_star, dtype=float)
        self._solver = solver

    @property
    def d(self) -> int:
        return self._model.d

    @property
    def m(self) -> int:
        return self._model.m

    def observe(self, x: np.ndarray, u, dt: float) -> np.ndarray:
        """State at the end of the interval under the hidden configuration."""
        return implicit_euler_step(self._model, self._mu_star, x, u, dt, solver=self._solver)


def observe_plant(plant: Plant, x, u, interval) -> np.ndarray:
    """Functional form of the black-box observation over [t_i, t_{i+1}]."""
    t0, t1 = interval
    return plant.observe(x, u, t1 - t0)


def simulate_trajectory(model, mu, x0, control_policy, time_grid: TimeGrid, *, solver="direct") -> Trajectory:
    """Roll out the dynamics under a policy u_i = policy(i, x(t_i))."""
    x = np.asarray(x0, dtype=float)
    states = [x]
    controls = []
    for i in range(time_grid.steps):
        u = np.atleast_1d(np.asarray(control_policy(i, x), dtype=float))
        x = implicit_euler_step(model, mu, x, u, time_grid.dt, solver=solver)
        states.append(x)
        controls.append(u)
    return Trajectory(np.array(states), np.array(controls))


def evaluate_cost(traj: Trajectory, Q, R, dt: float) -> float:
    """Left-endpoint quadrature of the running cost x'Qx + u'Ru."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    total = 0.0
    for i in range(traj.steps):
        x = traj.states[i]
        u = traj.controls[i]
        xqx = Q.quad(x) if isinstance(Q, LowRankQ) else float(x @ (Q @ x))
        total += xqx + float(u @ (R @ u))
    return total * dt
