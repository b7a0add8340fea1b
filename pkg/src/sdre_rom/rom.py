"""POD basis construction, DEIM hyper-reduction and the reduced SDRE loop.

Offline: collect snapshots with one of four strategies, compute the POD
basis and per-term DEIM factors, precompute the reduced operators.
Online: solve r x r Riccati problems on the reduced dynamics whose
nonlinear terms are evaluated at the DEIM rows only, so the per-step cost
is independent of the full dimension.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .models import LowRankQ, SemilinearModel
from .riccati import AreProblem, AreSolverError, SdreSolver, lqr_gain, solve_are_dense
from .stepping import (
    TimeGrid,
    Trajectory,
    evaluate_cost,
    implicit_euler_step,
    newton_solve,
    simulate_trajectory,
)

__all__ = [
    "SnapshotSet",
    "PodBasis",
    "DeimModel",
    "ReducedModel",
    "ReducedPlant",
    "collect_snapshots",
    "adjoint_rollout",
    "compute_pod_basis",
    "build_deim",
    "deim_reconstruct",
    "nonlinear_snapshots",
    "reduce_operators",
    "identity_reduction",
    "run_pod_deim_sdre",
    "error_metrics",
    "save_reduced_model",
    "load_reduced_model",
]

RANK_TOL = 1e-10
DEIM_COND_LIMIT = 1e12

STRATEGIES = (
    "uncontrolled",
    "sdre_controlled",
    "linearized_grid",
    "linearized_plus_adjoint",
)


@dataclass
class SnapshotSet:
    """State samples S (one column per snapshot) and their provenance."""

    S: np.ndarray
    provenance: str
    parameter_grid: list | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.S)):
            raise ValueError("snapshot matrix contains non-finite entries")

    @property
    def n_columns(self) -> int:
        return self.S.shape[1]


@dataclass
class PodBasis:
    """Leading left singular vectors of a snapshot matrix."""

    Psi: np.ndarray
    singular_values: np.ndarray

    @property
    def r(self) -> int:
        return self.Psi.shape[1]

    def orthonormality_defect(self) -> float:
        r = self.r
        return float(np.linalg.norm(self.Psi.T @ self.Psi - np.eye(r), "fro"))


@dataclass
class DeimModel:
    """DEIM factors for one nonlinear term.

    ``Phi`` spans the term snapshots, ``indices`` are the interpolation
    rows from pivoted QR.  The projection products ``M = Psi' Phi (P'Phi)^-1``
    and ``sample_map = P'Psi`` plus the row stencils are filled in by
    :func:`reduce_operators`.
    """

    Phi: np.ndarray
    indices: np.ndarray
    term_index: int | None = None
    M: np.ndarray | None = None
    sample_map: np.ndarray | None = None
    stencil: list | None = None

    @property
    def ell(self) -> int:
        return self.Phi.shape[1]

    def interpolation_matrix(self) -> np.ndarray:
        return self.Phi[self.indices, :]


def deim_reconstruct(deim: DeimModel, f: np.ndarray) -> np.ndarray:
    """DEIM interpolant Phi (P'Phi)^-1 P' f of a full vector f."""
    coeff = sla.solve(deim.interpolation_matrix(), f[deim.indices])
    return deim.Phi @ coeff


def compute_pod_basis(snapshots, *, r: int | None = None, rank_tol: float = RANK_TOL) -> PodBasis:
    """Thin SVD of the snapshots; keep r vectors or the numerical rank."""
    S = snapshots.S if isinstance(snapshots, SnapshotSet) else np.asarray(snapshots)
    U, s, _ = sla.svd(S, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise ValueError("snapshot matrix is zero")
    rank = int(np.sum(s > rank_tol * s[0]))
    if r is None:
        r = rank
    elif r > rank:
        warnings.warn(f"requested r={r} exceeds numerical rank {rank}; clamping")
        r = rank
    return PodBasis(Psi=U[:, :r].copy(), singular_values=s.copy())


def build_deim(F: np.ndarray, *, ell: int | None = None, rank_tol: float = RANK_TOL,
               term_index: int | None = None) -> DeimModel:
    """DEIM basis and interpolation rows for term snapshots F.

    Phi holds the ell leading left singular vectors; the rows come from QR
    with column pivoting of Phi'.
    """
    F = np.asarray(F)
    U, s, _ = sla.svd(F, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise ValueError("nonlinear snapshot matrix is zero")
    rank = int(np.sum(s > rank_tol * s[0]))
    if ell is None:
        ell = rank
    elif ell > rank:
        warnings.warn(f"requested ell={ell} exceeds numerical rank {rank}; clamping")
        ell = rank
    Phi = U[:, :ell].copy()
    _, _, piv = sla.qr(Phi.T, pivoting=True, mode="economic")
    return DeimModel(Phi=Phi, indices=np.asarray(piv[:ell], dtype=int), term_index=term_index)


def nonlinear_snapshots(model: SemilinearModel, S: np.ndarray) -> dict:
    """Per-term snapshot matrices F_j = [A_j(x_k) x_k] for state-dependent terms."""
    out = {}
    for j, term in enumerate(model.terms):
        if term.is_constant:
            continue
        out[j] = np.column_stack([term.action(S[:, k]) for k in range(S.shape[1])])
    return out


# ---------------------------------------------------------------------------
# snapshot strategies
# ---------------------------------------------------------------------------

def _rollout(model, mu, plant, x0, time_grid, policy):
    """Roll out under the plant when given, otherwise integrate at mu."""
    if plant is not None:
        x = np.asarray(x0, dtype=float)
        states = [x]
        for i in range(time_grid.steps):
            u = np.atleast_1d(policy(i, x))
            x = plant.observe(x, u, time_grid.dt)
            states.append(x)
        return np.array(states)
    if mu is None:
        raise ValueError("need either a plant or a concrete mu for snapshot rollouts")
    traj = simulate_trajectory(model, mu, x0, policy, time_grid)
    return traj.states


def _linear_closed_loop(a_cl, x0, time_grid):
    """Implicit Euler of a constant linear system; one LU for all steps."""
    solve = spla.splu((sp.identity(a_cl.shape[0], format="csc") - time_grid.dt * sp.csc_matrix(a_cl)))
    x = np.asarray(x0, dtype=float)
    states = [x]
    for _ in range(time_grid.steps):
        x = solve.solve(x)
        states.append(x)
    return np.array(states)


def adjoint_rollout(a_lin, forward_states: np.ndarray, time_grid: TimeGrid) -> np.ndarray:
    """Backward implicit Euler of -p' = A_lin p - x_lin with p(T) = 0.

    ``forward_states`` holds the linearized trajectory at t_0..t_{n_t};
    returns the adjoint samples p(t_0)..p(t_{n_t-1}) columnwise.
    """
    nt = time_grid.steps
    d = a_lin.shape[0]
    solve = spla.splu(sp.identity(d, format="csc") - time_grid.dt * sp.csc_matrix(a_lin))
    q = np.zeros(d)
    samples = [q]  # q_k = p(T - k dt)
    for k in range(nt):
        src = forward_states[nt - k - 1]
        q = solve.solve(q - time_grid.dt * src)
        samples.append(q)
    # reverse to time order, dropping the terminal zero
    return np.column_stack(samples[1:][::-1])


def collect_snapshots(
    model: SemilinearModel,
    strategy: str,
    x0: np.ndarray,
    time_grid: TimeGrid,
    *,
    mu=None,
    mu_grid=None,
    plant=None,
    stride: int = 1,
) -> SnapshotSet:
    """Build the snapshot matrix with one of the four sampling strategies.

    ``uncontrolled`` and ``sdre_controlled`` integrate the model at the
    supplied ``mu``.  The grid strategies compute one LQR gain per grid
    configuration from the linearization at the origin and roll out the
    true dynamics (the plant when given, the model at ``mu`` otherwise)
    under that feedback; ``linearized_plus_adjoint`` appends adjoint
    samples driven by the linearized closed-loop trajectory.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown snapshot strategy '{strategy}'")
    x0 = np.asarray(x0, dtype=float)

    if strategy == "uncontrolled":
        states = _rollout(model, mu, plant, x0, time_grid, lambda i, x: np.zeros(model.m))
        S = states[:-1:stride].T
        if not S.any():
            warnings.warn("uncontrolled snapshot matrix is identically zero")
        return SnapshotSet(S=S, provenance=strategy)

    if strategy == "sdre_controlled":
        if mu is None:
            raise ValueError("sdre_controlled snapshots need a concrete mu")
        from .riccati import run_sdre  # local import to avoid cycle at module load

        traj, _ = run_sdre(model, mu, x0, time_grid)
        return SnapshotSet(S=traj.states[:-1:stride].T, provenance=strategy)

    if mu_grid is None or len(mu_grid) == 0:
        raise ValueError("grid strategies need a nonempty parameter grid")
    lqr_solver = SdreSolver(model.B, model.Q, model.R, materialize_pi=False)
    blocks = []
    surviving = []
    for mu_hat in mu_grid:
        a_lin = model.linear_matrix(mu_hat)
        try:
            fb = lqr_solver.gain(a_lin)
        except AreSolverError as exc:
            warnings.warn(f"LQR failed for grid configuration {tuple(mu_hat)}: {exc}")
            lqr_solver.reset()
            continue
        K = fb.K
        states = _rollout(model, mu, plant, x0, time_grid, lambda i, x, K=K: -(K @ x))
        cols = [states[:-1:stride].T]
        if strategy == "linearized_plus_adjoint":
            a_cl = a_lin - sp.csr_matrix(model.B @ K)
            lin_states = _linear_closed_loop(a_cl, x0, time_grid)
            adj = adjoint_rollout(a_lin, lin_states, time_grid)
            cols.append(adj[:, ::stride])
        blocks.append(np.hstack(cols))
        surviving.append(tuple(np.asarray(mu_hat, dtype=float)))
    if not blocks:
        raise AreSolverError("no grid configuration produced a stabilizing LQR gain")
    if strategy == "linearized_plus_adjoint":
        # keep all state blocks first, then all adjoint blocks, per-config order
        state_cols = [b[:, : b.shape[1] // 2] for b in blocks]
        adj_cols = [b[:, b.shape[1] // 2:] for b in blocks]
        S = np.hstack(state_cols + adj_cols)
    else:
        S = np.hstack(blocks)
    return SnapshotSet(S=S, provenance=strategy, parameter_grid=surviving)


# ---------------------------------------------------------------------------
# reduced operators
# ---------------------------------------------------------------------------

@dataclass
class _DeimTermOps:
    """Precomputed online machinery for one DEIM-reduced term."""

    term_index: int | None  # None marks the combined all-terms variant
    M: np.ndarray  # r x ell
    rows: np.ndarray  # selected row indices in the full state
    supports: list  # per-row full-state index arrays
    sup_pos: list  # per-row positions of the support inside the union
    union: np.ndarray  # sorted union of all supports
    psi_union: np.ndarray  # Psi restricted to the union rows
    sample_map: np.ndarray  # ell x r, P' Psi
    deim: DeimModel


def _complete_deim(model, psi, deim, cond_limit):
    PhiP = deim.interpolation_matrix()
    cond = np.linalg.cond(PhiP)
    if cond > cond_limit:
        raise AreSolverError(
            f"DEIM interpolation matrix condition {cond:.2e} exceeds {cond_limit:.0e}; "
            "enlarge the snapshot set"
        )
    M = sla.solve(PhiP.T, (psi.T @ deim.Phi).T).T
    rows = deim.indices
    if deim.term_index is None:
        per_term = [t.row_support(rows) for t in model.terms]
        supports = [
            np.unique(np.concatenate([s[k] for s in per_term])) for k in range(len(rows))
        ]
    else:
        supports = model.terms[deim.term_index].row_support(rows)
    union = np.unique(np.concatenate(supports)) if supports else np.array([], dtype=int)
    lookup = {int(g): i for i, g in enumerate(union)}
    sup_pos = [np.array([lookup[int(g)] for g in s], dtype=int) for s in supports]
    completed = DeimModel(
        Phi=deim.Phi,
        indices=rows,
        term_index=deim.term_index,
        M=M,
        sample_map=psi[rows, :],
        stencil=[s.copy() for s in supports],
    )
    return _DeimTermOps(
        term_index=deim.term_index,
        M=M,
        rows=rows,
        supports=supports,
        sup_pos=sup_pos,
        union=union,
        psi_union=psi[union, :],
        sample_map=completed.sample_map,
        deim=completed,
    )


@dataclass
class ReducedModel:
    """Galerkin-projected operators plus DEIM machinery for online use."""

    model: SemilinearModel
    pod: PodBasis
    constant_ops: list  # (term_index, r x r array)
    deim_ops: list
    B_r: np.ndarray
    Q_r: LowRankQ
    combined: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def r(self) -> int:
        return self.pod.r

    @property
    def d(self) -> int:
        return self.pod.Psi.shape[0]

    def lift(self, x_r: np.ndarray) -> np.ndarray:
        return self.pod.Psi @ x_r

    def project(self, x: np.ndarray) -> np.ndarray:
        return self.pod.Psi.T @ x

    def _term_rows(self, op: _DeimTermOps, x_r: np.ndarray, mu) -> np.ndarray:
        """Selected rows of A(Psi x_r) Psi, touching union entries only."""
        x_union = op.psi_union @ x_r
        xsup = [x_union[pos] for pos in op.sup_pos]
        if op.term_index is not None:
            terms = [(1.0, self.model.terms[op.term_index])]
        else:
            terms = list(zip(np.asarray(mu, dtype=float), self.model.terms))
        W = np.zeros((len(op.rows), self.r))
        for coeff, term in terms:
            if coeff == 0.0:
                continue
            sups = term.row_support(op.rows)
            lookup = {int(g): i for i, g in enumerate(op.union)}
            vals = term.row_values(
                op.rows, sups, [x_union[[lookup[int(g)] for g in s]] for s in sups]
            )
            for k, (s, v) in enumerate(zip(sups, vals)):
                W[k] += coeff * (v @ op.psi_union[[lookup[int(g)] for g in s], :])
        return W

    def reduced_matrix(self, x_r: np.ndarray, mu) -> np.ndarray:
        """A_r(x_r; mu), assembled from Galerkin and DEIM pieces."""
        mu = np.asarray(mu, dtype=float)
        out = np.zeros((self.r, self.r))
        if self.combined:
            op = self.deim_ops[0]
            return op.M @ self._term_rows(op, x_r, mu)
        for j, mat in self.constant_ops:
            if mu[j] != 0.0:
                out += mu[j] * mat
        for op in self.deim_ops:
            if mu[op.term_index] != 0.0:
                out += mu[op.term_index] * (op.M @ self._term_rows(op, x_r, mu))
        return out

    def action(self, x_r: np.ndarray, mu) -> np.ndarray:
        return self.reduced_matrix(x_r, mu) @ x_r

    def online_access_count(self) -> int:
        """Full-state entries read per nonlinear evaluation (<= ell * stencil)."""
        return int(sum(len(op.union) for op in self.deim_ops))


def reduce_operators(
    model: SemilinearModel,
    pod: PodBasis,
    deims,
    *,
    combined: bool = False,
    cond_limit: float = DEIM_COND_LIMIT,
    meta: dict | None = None,
) -> ReducedModel:
    """Precompute the reduced operators for a basis and DEIM factors.

    ``deims`` maps term index -> DeimModel for the state-dependent terms
    (constant terms are projected exactly), or holds the single combined
    DeimModel when ``combined`` is set.
    """
    psi = pod.Psi
    if psi.ndim != 2 or psi.shape[1] < 1:
        raise ValueError("empty POD basis")
    defect = pod.orthonormality_defect()
    if defect > 1e-10:
        raise ValueError(f"POD basis not orthonormal (defect {defect:.2e})")
    zero = np.zeros(model.d)
    constant_ops = []
    deim_ops = []
    if combined:
        deim = deims if isinstance(deims, DeimModel) else list(deims.values())[0]
        deim_ops.append(_complete_deim(model, psi, deim, cond_limit))
    else:
        for j, term in enumerate(model.terms):
            if term.is_constant:
                constant_ops.append((j, psi.T @ (term.matrix(zero) @ psi)))
            else:
                if j not in deims:
                    raise ValueError(f"missing DEIM factors for state-dependent term {j}")
                dm = deims[j]
                if dm.term_index is None:
                    dm = DeimModel(Phi=dm.Phi, indices=dm.indices, term_index=j)
                deim_ops.append(_complete_deim(model, psi, dm, cond_limit))
    return ReducedModel(
        model=model,
        pod=pod,
        constant_ops=constant_ops,
        deim_ops=deim_ops,
        B_r=psi.T @ model.B,
        Q_r=model.Q.project(psi),
        combined=combined,
        meta=dict(meta or {}),
    )


def identity_reduction(model: SemilinearModel) -> ReducedModel:
    """Trivial reduction Psi = I with exact DEIM, for consistency checks."""
    d = model.d
    pod = PodBasis(Psi=np.eye(d), singular_values=np.ones(d))
    deims = {
        j: DeimModel(Phi=np.eye(d), indices=np.arange(d), term_index=j)
        for j, term in enumerate(model.terms)
        if not term.is_constant
    }
    return reduce_operators(model, pod, deims, meta={"provenance": "identity"})


# ---------------------------------------------------------------------------
# reduced dynamics and the online loop
# ---------------------------------------------------------------------------

def reduced_step(reduced: ReducedModel, mu, x_r: np.ndarray, u, dt: float,
                 *, tol: float = 1e-10, max_iters: int = 50) -> np.ndarray:
    """Implicit Euler step of the reduced DEIM dynamics (dense Newton)."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    bu = (reduced.B_r @ u).ravel()
    r = reduced.r

    def residual(z):
        return z - x_r - dt * (reduced.action(z, mu) + bu)

    def jacobian(z):
        # forward-difference Jacobian in r dimensions; cost independent of d
        base = reduced.action(z, mu)
        J = np.eye(r)
        eps = np.sqrt(np.finfo(float).eps) * max(1.0, np.linalg.norm(z))
        for i in range(r):
            zp = z.copy()
            zp[i] += eps
            J[:, i] -= dt * (reduced.action(zp, mu) - base) / eps
        return J

    return newton_solve(residual, jacobian, x_r, tol=tol, max_iters=max_iters, dense=True)


class ReducedPlant:
    """Black-box surrogate: reduced dynamics under the hidden configuration.

    ``mode='full-projected'`` instead observes the full plant at the lifted
    state and projects the result back.
    """

    def __init__(self, reduced: ReducedModel, mu_star, *, mode: str = "reduced", full_plant=None):
        if mode not in ("reduced", "full-projected"):
            raise ValueError(f"unknown reduced-plant mode '{mode}'")
        if mode == "full-projected" and full_plant is None:
            raise ValueError("full-projected mode needs the full plant")
        self._reduced = reduced
        self._mu_star = np.asarray(mu_star, dtype=float)
        self._mode = mode
        self._full_plant = full_plant

    @property
    def r(self) -> int:
        return self._reduced.r

    def observe(self, x_r: np.ndarray, u, dt: float) -> np.ndarray:
        if self._mode == "reduced":
            return reduced_step(self._reduced, self._mu_star, x_r, u, dt)
        lifted = self._reduced.lift(x_r)
        return self._reduced.project(self._full_plant.observe(lifted, u, dt))


def run_pod_deim_sdre(
    reduced: ReducedModel,
    mu,
    x0: np.ndarray,
    time_grid: TimeGrid,
    R=None,
):
    """Reduced SDRE loop; returns (reduced trajectory, lifted trajectory, cost)."""
    R = reduced.model.R if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    x_r = reduced.project(np.asarray(x0, dtype=float))
    solver = SdreSolver(reduced.B_r, reduced.Q_r, R)
    states = [x_r]
    controls = []
    for i in range(time_grid.steps):
        a_r = reduced.reduced_matrix(x_r, mu)
        try:
            fb = solver.gain(a_r)
        except AreSolverError as exc:
            raise AreSolverError(f"reduced SDRE gain failed at step {i}: {exc}") from exc
        u = -(fb.K @ x_r)
        x_r = reduced_step(reduced, mu, x_r, u, time_grid.dt)
        states.append(x_r)
        controls.append(u)
    traj_r = Trajectory(np.array(states), np.array(controls))
    cost = evaluate_cost(traj_r, reduced.Q_r, R, time_grid.dt)
    lifted = Trajectory((reduced.pod.Psi @ traj_r.states.T).T, traj_r.controls)
    return traj_r, lifted, cost


def error_metrics(full: Trajectory, lifted: Trajectory, cost_full: float, cost_reduced: float):
    """Max relative state error over time and cost difference |J - J_r|."""
    if full.states.shape != lifted.states.shape:
        raise ValueError("trajectories must share the time grid and dimension")
    norms = np.linalg.norm(full.states, axis=1)
    diffs = np.linalg.norm(full.states - lifted.states, axis=1)
    ok = norms > 0
    if not np.all(ok):
        warnings.warn("skipping time points with vanishing reference state in E(r)")
    if not np.any(ok):
        raise ValueError("reference trajectory vanishes everywhere")
    E = float(np.max(diffs[ok] / norms[ok]))
    return E, float(abs(cost_full - cost_reduced))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

FORMAT_VERSION = 1


def save_reduced_model(reduced: ReducedModel, path) -> None:
    """Write basis, DEIM factors and precomputed products to an npz container."""
    payload = {
        "version": np.array([FORMAT_VERSION]),
        "psi": reduced.pod.Psi,
        "singular_values": reduced.pod.singular_values,
        "b_r": reduced.B_r,
        "q_factors": reduced.Q_r.factors,
        "q_weights": reduced.Q_r.weights,
        "combined": np.array([int(reduced.combined)]),
        "meta": np.array([json.dumps(reduced.meta)]),
        "n_deim": np.array([len(reduced.deim_ops)]),
    }
    for i, op in enumerate(reduced.deim_ops):
        payload[f"deim{i}_term"] = np.array([-1 if op.term_index is None else op.term_index])
        payload[f"deim{i}_phi"] = op.deim.Phi
        payload[f"deim{i}_indices"] = op.rows
        payload[f"deim{i}_m"] = op.M
        payload[f"deim{i}_sample_map"] = op.sample_map
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_reduced_model(path, model: SemilinearModel) -> ReducedModel:
    """Rebuild a ReducedModel from an npz container and the term library."""
    with np.load(path, allow_pickle=False) as data:
        version = int(data["version"][0])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported reduced-model format version {version}")
        pod = PodBasis(Psi=data["psi"], singular_values=data["singular_values"])
        combined = bool(data["combined"][0])
        meta = json.loads(str(data["meta"][0]))
        deims = {}
        combined_deim = None
        for i in range(int(data["n_deim"][0])):
            term = int(data[f"deim{i}_term"][0])
            dm = DeimModel(
                Phi=data[f"deim{i}_phi"],
                indices=data[f"deim{i}_indices"].astype(int),
                term_index=None if term < 0 else term,
            )
            if term < 0:
                combined_deim = dm
            else:
                deims[term] = dm
    return reduce_operators(
        model,
        pod,
        combined_deim if combined else deims,
        combined=combined,
        meta=meta,
    )
