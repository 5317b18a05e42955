"""Semi-implicit Euler time stepping for the truncated vorticity dynamics.

One step solves the linear system

    (I + delta nu A) xi_new + delta P_N(u_prev . grad xi_new) = xi_prev
        + sqrt(delta) P_N sigma eta_n,      u_prev = K * xi_prev,

with diffusion and advection at the new time level and the advecting
velocity frozen at the old one.  The diagonal part is inverted exactly in
Fourier space; the O(delta) advection perturbation is handled either by
preconditioned fixed-point iteration (default) or by a restarted Krylov
solve for step sizes where the fixed point stops contracting.

Everything operates on batched coefficient arrays (M, n_half), so whole
ensembles advance in single vectorized steps; results are identical for
any batch composition because the noise tape is index-addressed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import forcing as forcing_mod
from . import spectral
from .errors import ConfigError, SolverError, StructuralError
from .forcing import ForcingBasis, NoiseStream, sum_fine
from .spectral import SpectralField, SpectralGrid

INCREMENT_CHUNK = 256  # coarse steps of tape generated per philox call


@dataclass(frozen=True)
class SchemeParams:
    """One point theta = (N, delta) of the discretization family.

    delta0 is the largest step of the family under study (enters moment
    bounds); solver is "fixed-point" or "krylov"; tol is the relative
    residual target of the implicit solve.
    """

    nu: float
    delta: float
    shells: int
    delta0: float | None = None
    solver: str = "fixed-point"
    tol: float = 1e-12
    max_iter: int = 200

    def __post_init__(self):
        if self.nu <= 0:
            raise ConfigError("viscosity must be positive", field="nu")
        if self.delta <= 0:
            raise ConfigError("time step must be positive", field="delta")
        if self.shells < 1:
            raise ConfigError("cutoff must be >= 1 shell", field="shells")
        if self.delta0 is None:
            object.__setattr__(self, "delta0", self.delta)
        if self.delta > self.delta0 + 1e-15:
            raise ConfigError("delta exceeds delta0", field="delta")
        if self.solver not in ("fixed-point", "krylov"):
            raise ConfigError(f"unknown solver policy {self.solver!r}", field="solver")

    def with_delta(self, delta: float, shells: int | None = None) -> "SchemeParams":
        return SchemeParams(self.nu, delta, self.shells if shells is None else shells,
                            max(self.delta0, delta), self.solver, self.tol, self.max_iter)

    def grid(self) -> SpectralGrid:
        return spectral.make_grid(self.shells)


@dataclass
class Trajectory:
    """A single path of the scheme with per-step scalar diagnostics."""

    grid: SpectralGrid
    params: SchemeParams
    step_indices: np.ndarray      # recorded step numbers (monotone, starts at 0)
    states: np.ndarray            # (n_rec, n_half) packed coefficients
    energy_sq: np.ndarray         # |xi^n|^2 for every step 0..n_steps
    h1_sq: np.ndarray             # |grad xi^n|^2 likewise
    iterations: np.ndarray        # implicit-solver sweeps per step

    @property
    def times(self) -> np.ndarray:
        return self.step_indices * self.params.delta

    def state(self, i: int) -> SpectralField:
        return SpectralField(self.grid, self.states[i])

    def final(self) -> SpectralField:
        return self.state(-1)


@dataclass
class EnsembleRun:
    """Batched trajectories sharing params; leading axis is the member."""

    grid: SpectralGrid
    params: SchemeParams
    step_indices: np.ndarray
    states: np.ndarray | None     # (n_rec, M, n_half) or None if not kept
    energy_sq: np.ndarray         # (n_steps+1, M)
    h1_sq: np.ndarray
    iterations: np.ndarray        # (n_steps,)

    @property
    def times(self) -> np.ndarray:
        return self.step_indices * self.params.delta

    @property
    def n_members(self) -> int:
        return self.energy_sq.shape[1]

    def member(self, i: int) -> Trajectory:
        states = self.states[:, i] if self.states is not None else None
        return Trajectory(self.grid, self.params, self.step_indices, states,
                          self.energy_sq[:, i], self.h1_sq[:, i], self.iterations)


# -- implicit solve ------------------------------------------------------------

def _fixed_point_solve(grid, u1v, u2v, rhs, inv_diag, delta, tol, max_iter, scale):
    """Solve (D + delta Adv) c = rhs by c <- inv_diag (rhs - delta Adv c).

    Increment-based stopping: the iteration is an affine contraction, so
    successive increments bound the remaining error.  Returns (c, sweeps).
    """
    c = rhs * inv_diag
    target = tol * np.maximum(scale, 1e-100)
    prev_inc = np.inf
    for it in range(1, max_iter + 1):
        adv = spectral.advect_frozen(grid, u1v, u2v, c)
        c_new = (rhs - delta * adv) * inv_diag
        inc = spectral.norm_l2(c_new - c)
        c = c_new
        top = float(np.max(inc / np.maximum(scale, 1e-100))) if inc.size else 0.0
        if np.all(inc <= target):
            return c, it
        if it > 3 and top > prev_inc * 1.05 and top > 1e-6:
            raise SolverError(
                f"fixed-point iteration diverging (relative increment {top:.3e}); "
                "reduce delta or switch to the krylov policy", residual=top)
        prev_inc = max(top, 1e-300)
    raise SolverError(
        f"fixed-point solve not converged after {max_iter} sweeps "
        f"(relative increment {top:.3e})", residual=top)


def _krylov_solve(grid, u1v, u2v, rhs, diag, delta, tol, scale):
    """Row-by-row restarted GMRES on the real-ified step operator."""
    from scipy.sparse.linalg import LinearOperator, gmres

    n = grid.n_half
    rhs2 = rhs.reshape(-1, n)
    u1v2 = u1v.reshape(-1, u1v.shape[-1])
    u2v2 = u2v.reshape(-1, u2v.shape[-1])
    scale2 = np.atleast_1d(scale).reshape(-1)
    out = np.empty_like(rhs2)
    total_it = 0
    for i in range(rhs2.shape[0]):
        def matvec(x, i=i):
            c = x[:n] + 1j * x[n:]
            y = diag * c + delta * spectral.advect_frozen(grid, u1v2[i], u2v2[i], c)
            return np.concatenate([y.real, y.imag])

        op = LinearOperator((2 * n, 2 * n), matvec=matvec, dtype=np.float64)
        b = np.concatenate([rhs2[i].real, rhs2[i].imag])
        x0 = np.concatenate([(rhs2[i] / diag).real, (rhs2[i] / diag).imag])
        x, info = gmres(op, b, x0=x0, rtol=0.0,
                        atol=tol * max(scale2[i], 1e-300), restart=50, maxiter=40)
        if info != 0:
            raise SolverError(f"gmres failed to converge (info={info})",
                              residual=float(np.linalg.norm(op @ x - b)))
        out[i] = x[:n] + 1j * x[n:]
        total_it += 1
    return out.reshape(rhs.shape), total_it


def _solve_step(grid, u1v, u2v, rhs, inv_diag, diag, p: SchemeParams, scale):
    """Dispatch the implicit solve according to the configured policy."""
    if p.solver == "fixed-point":
        return _fixed_point_solve(grid, u1v, u2v, rhs, inv_diag, p.delta,
                                  p.tol, p.max_iter, scale)
    return _krylov_solve(grid, u1v, u2v, rhs, diag, p.delta, p.tol, scale)


def _advance_one(grid, c_prev, noise_coeffs, p: SchemeParams, inv_diag, diag,
                 noise_scale):
    """One scheme step for a batch; returns (c_new, sweeps)."""
    rhs = c_prev + noise_coeffs if noise_coeffs is not None else c_prev
    u1v, u2v = spectral.velocity_values(grid, c_prev)
    scale = spectral.norm_l2(c_prev) + noise_scale
    return _solve_step(grid, u1v, u2v, rhs, inv_diag, diag, p, scale)


def step_residual(grid, c_prev, c_new, noise_coeffs, p: SchemeParams) -> np.ndarray:
    """L^2 residual of the implicit step system at c_new (diagnostic)."""
    diag = 1.0 + p.delta * p.nu * grid.lam
    adv = spectral.advect_coeffs(grid, c_prev, c_new)
    rhs = c_prev + (noise_coeffs if noise_coeffs is not None else 0.0)
    return spectral.norm_l2(diag * c_new + p.delta * adv - rhs)


def semi_implicit_step(xi_prev: SpectralField, eta: np.ndarray, p: SchemeParams,
                       basis: ForcingBasis | None) -> SpectralField:
    """One step of the scheme from a single state.

    ``eta`` holds the unit-variance Gaussian vector of the step (the noise
    enters as sqrt(delta) P_N sigma eta); pass basis=None or eta=None for
    the unforced scheme.
    """
    grid = xi_prev.grid
    diag = 1.0 + p.delta * p.nu * grid.lam
    noise = None
    noise_scale = 0.0
    if basis is not None and eta is not None:
        b = basis.project_to(grid)
        noise = np.sqrt(p.delta) * forcing_mod.apply_forcing(b, eta)
        noise_scale = float(spectral.norm_l2(noise))
    c, _ = _advance_one(grid, xi_prev.coeffs, noise, p, 1.0 / diag, diag, noise_scale)
    return SpectralField(grid, c)


def energy_identity_residual(xi_prev: SpectralField, xi_new: SpectralField,
                             noise_field: SpectralField | None,
                             p: SchemeParams) -> float:
    """Relative defect of the per-step energy identity

    |xi^n|^2 + |xi^n - xi^{n-1}|^2 - |xi^{n-1}|^2 + 2 nu delta |grad xi^n|^2
        = 2 (sqrt(delta) P_N sigma eta_n, xi^n).
    """
    grid = xi_prev.grid
    lhs = (xi_new.l2_norm() ** 2
           + spectral.norm_l2_sq(xi_new.coeffs - xi_prev.coeffs)
           - xi_prev.l2_norm() ** 2
           + 2.0 * p.nu * p.delta * spectral.sobolev_norm_sq(grid, xi_new.coeffs, 1.0))
    rhs = 0.0 if noise_field is None else 2.0 * spectral.inner(noise_field, xi_new)
    scale = max(xi_prev.l2_norm() ** 2, xi_new.l2_norm() ** 2, 1e-300)
    return float(abs(lhs - rhs) / scale)


# -- increment providers -------------------------------------------------------

def stream_increments(stream: NoiseStream, d: int, delta: float,
                      chunk: int = INCREMENT_CHUNK) -> Callable[[int, int], np.ndarray]:
    """Coarse Brownian increments of one stream as a chunked provider.

    The returned callable maps (n0, n1) to the increments of coarse steps
    n0..n1-1 with shape (n1 - n0, 1, d); each coarse increment is the sum
    of the stream's fine_factor sub-increments.
    """
    return batch_increments(stream.seed, [stream.trajectory_id],
                            stream.fine_factor, d, delta, chunk)


def batch_increments(seed: int, trajectory_ids, fine_factor: int, d: int,
                     delta: float, chunk: int | None = None):
    """Chunk-cached coarse increments for a batch of trajectories.

    Output of the provider has shape (steps, M, d).  Generation is keyed
    by absolute tape cells, so values do not depend on chunk size.
    """
    traj = np.asarray(trajectory_ids)
    r = int(fine_factor)
    if chunk is None:
        # keep one chunk of raw normals around ~32 MB
        chunk = max(1, min(INCREMENT_CHUNK, (1 << 22) // max(1, traj.size * d * r)))
    root = np.sqrt(delta / r)
    cache: dict[int, np.ndarray] = {}

    def chunk_values(c0: int) -> np.ndarray:
        arr = cache.get(c0)
        if arr is None:
            cells = np.arange(c0 * chunk * r, (c0 + 1) * chunk * r)
            g = forcing_mod.gaussian_cells(seed, traj, cells, d)  # (M, cells, d)
            fine = root * g.reshape(traj.size, chunk, r, d)
            arr = np.ascontiguousarray(sum_fine(fine, axis=2).transpose(1, 0, 2))
            cache.clear()
            cache[c0] = arr
        return arr

    def provider(n0: int, n1: int) -> np.ndarray:
        out = np.empty((n1 - n0, traj.size, d))
        pos = n0
        while pos < n1:
            c0, off = divmod(pos, chunk)
            take = min(chunk - off, n1 - pos)
            out[pos - n0: pos - n0 + take] = chunk_values(c0)[off: off + take]
            pos += take
        return out

    return provider


def zero_increments(n_members: int, d: int) -> Callable[[int, int], np.ndarray]:
    def provider(n0: int, n1: int) -> np.ndarray:
        return np.zeros((n1 - n0, n_members, d))
    return provider


# -- time marching -------------------------------------------------------------

def run_scheme(grid: SpectralGrid, c0: np.ndarray, n_steps: int, p: SchemeParams,
               basis: ForcingBasis | None, increments, record_stride: int = 1,
               keep_states: bool = True,
               observer: Callable[[int, np.ndarray], None] | None = None) -> EnsembleRun:
    """March a batch of states n_steps forward.

    ``increments`` is a provider (n0, n1) -> Brownian increments
    (steps, M, d), or None for the unforced scheme.  ``observer`` is
    called as observer(step, coeffs) after every step (step >= 1).
    """
    if p.shells != grid.shells:
        raise StructuralError("params cutoff differs from grid")
    c = np.array(c0, dtype=np.complex128)
    if c.ndim == 1:
        c = c[None, :]
    m = c.shape[0]
    b = basis.project_to(grid) if basis is not None else None
    d = b.d if b is not None else 0

    diag = 1.0 + p.delta * p.nu * grid.lam
    inv_diag = 1.0 / diag

    n_rec = n_steps // record_stride + 1
    states = np.empty((n_rec, m, grid.n_half), dtype=np.complex128) if keep_states else None
    energy = np.empty((n_steps + 1, m))
    h1 = np.empty((n_steps + 1, m))
    iters = np.zeros(n_steps, dtype=np.int64)
    rec_idx = np.empty(n_rec, dtype=np.int64)

    def record(step, slot):
        rec_idx[slot] = step
        if keep_states:
            states[slot] = c

    energy[0] = spectral.norm_l2_sq(c)
    h1[0] = spectral.sobolev_norm_sq(grid, c, 1.0)
    record(0, 0)
    slot = 1

    pos = 0
    while pos < n_steps:
        take = min(INCREMENT_CHUNK, n_steps - pos)
        dw = increments(pos, pos + take) if increments is not None else None
        for j in range(take):
            step = pos + j + 1
            if b is not None and dw is not None:
                noise = dw[j] @ b.coeff_matrix
                noise_scale = spectral.norm_l2(noise)
            else:
                noise, noise_scale = None, 0.0
            try:
                c, sweeps = _advance_one(grid, c, noise, p, inv_diag, diag, noise_scale)
            except SolverError as err:
                err.step_index = step
                raise
            iters[step - 1] = sweeps
            energy[step] = spectral.norm_l2_sq(c)
            h1[step] = spectral.sobolev_norm_sq(grid, c, 1.0)
            if observer is not None:
                observer(step, c)
            if step % record_stride == 0:
                record(step, slot)
                slot += 1
        pos += take

    return EnsembleRun(grid, p, rec_idx[:slot], states[:slot] if keep_states else None,
                       energy, h1, iters)


def _as_trajectory(run: EnsembleRun) -> Trajectory:
    return run.member(0)


def simulate(xi0: SpectralField, n_steps: int, p: SchemeParams,
             basis: ForcingBasis | None, stream: NoiseStream | None,
             record_stride: int = 1) -> Trajectory:
    """Deterministic function of (xi0, params, forcing, stream)."""
    grid = p.grid()
    c0 = spectral.embed_coeffs(xi0.grid, grid, xi0.coeffs) if xi0.grid != grid else xi0.coeffs
    inc = None
    if basis is not None and stream is not None:
        inc = stream_increments(stream, basis.d, p.delta)
    run = run_scheme(grid, c0, n_steps, p, basis, inc, record_stride)
    return _as_trajectory(run)


def simulate_ensemble(xi0, n_steps: int, p: SchemeParams, basis: ForcingBasis,
                      seed: int, trajectory_ids, fine_factor: int = 1,
                      record_stride: int = 1, keep_states: bool = True) -> EnsembleRun:
    """Batch of paths from shared initial data (or per-member batch array)."""
    grid = p.grid()
    c0 = xi0.coeffs if isinstance(xi0, SpectralField) else np.asarray(xi0)
    if c0.ndim == 1:
        c0 = np.broadcast_to(c0, (len(trajectory_ids), grid.n_half))
    inc = batch_increments(seed, trajectory_ids, fine_factor, basis.d, p.delta)
    return run_scheme(grid, c0, n_steps, p, basis, inc, record_stride, keep_states)


def reference_simulate(xi0: SpectralField, horizon: float, p_fine: SchemeParams,
                       basis: ForcingBasis, stream: NoiseStream) -> Trajectory:
    """Self-refined reference: same scheme at delta/R on the same tape.

    p_fine.delta must equal the coarse step divided by stream.fine_factor;
    states are recorded at the coarse times so they pair directly with the
    coarse run.
    """
    r = stream.fine_factor
    n_coarse = round(horizon / (p_fine.delta * r))
    if abs(n_coarse * p_fine.delta * r - horizon) > 1e-9 * max(horizon, 1.0):
        raise ConfigError("horizon is not a whole number of coarse steps",
                          field="horizon")
    grid = p_fine.grid()
    c0 = spectral.embed_coeffs(xi0.grid, grid, xi0.coeffs) if xi0.grid != grid else xi0.coeffs
    inc = None
    if basis is not None:
        fine_stream = NoiseStream(stream.seed, stream.trajectory_id, 1)
        inc = stream_increments(fine_stream, basis.d, p_fine.delta)
    run = run_scheme(grid, c0, n_coarse * r, p_fine, basis, inc, record_stride=r)
    return _as_trajectory(run)


# -- exponential-moment probe ---------------------------------------------------

@dataclass(frozen=True)
class MomentProbe:
    """Log-space samples of exp(alpha |xi^n|^2 + alpha nu delta sum |grad xi^j|^2)."""

    alpha: float
    log_values: np.ndarray          # (n_steps+1,) or (n_steps+1, M)
    log_energy_only: np.ndarray     # alpha |xi^n|^2 alone
    bound_log: np.ndarray = field(default=None)


def moment_probe(run: Trajectory | EnsembleRun, alpha: float,
                 basis: ForcingBasis | None = None,
                 margin: float = 0.25, c_tilde: float = 1.0) -> MomentProbe:
    """Exponential-moment samples along a run, stored in log space.

    Requires alpha <= (margin/|sigma|^2) min(nu, 1/delta0) when the
    forcing is supplied (the admissible range of the moment bound, with
    the unspecified absolute constant exposed as ``margin``).
    """
    p = run.params
    if basis is not None and alpha > 0:
        cap = (margin / basis.variance) * min(p.nu, 1.0 / p.delta0)
        if alpha > cap + 1e-15:
            raise ConfigError(
                f"alpha={alpha} exceeds admissible {cap:.4g} for this margin",
                field="alpha")
    dissip = np.concatenate([np.zeros_like(run.h1_sq[:1]),
                             np.cumsum(run.h1_sq[1:], axis=0)])
    log_values = alpha * run.energy_sq + alpha * p.nu * p.delta * dissip
    log_energy = alpha * run.energy_sq
    bound = None
    if basis is not None:
        n = np.arange(run.energy_sq.shape[0])
        e0 = np.atleast_1d(run.energy_sq[0])
        bign = n[:, None] if log_values.ndim == 2 else n
        c_big = c_tilde * (1.0 + p.nu * p.delta0)
        bound = (np.log(c_tilde) + c_big * alpha * e0
                 + c_tilde * alpha * basis.variance * bign * p.delta)
        bound = np.broadcast_to(bound, log_values.shape)
    return MomentProbe(alpha, log_values, log_energy, bound)
