"""IMEX time stepping for the conductance/pressure system.

Each step treats diffusion implicitly (mixed P0/RT0 solve per component) and
the activation and relaxation terms explicitly, then recomputes the pressure
for the new conductance.  The step size follows an adaptive rule driven by
``c ||grad p||_inf``.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import fem

log = logging.getLogger(__name__)

CSV_HEADER = ("k", "t", "dt", "E_h", "E_ht", "m_ht", "s_k", "grad_inf", "min_abs_m")


class SingularRelaxationError(FloatingPointError):
    """Relaxation term evaluated at m = 0 with gamma < 1 and rho = 0."""


class TimeStepError(RuntimeError):
    pass


class EnergyIncreaseError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelParams:
    """Coefficients of the scaled model.

    Parameters
    ----------
    D : float
        Diffusivity, ``D >= 0``.
    c : float
        Activation parameter, ``c > 0``.
    gamma : float
        Relaxation exponent.
    r : float or ndarray
        Background permeability, constant or one value per triangle, positive.
    rho : float
        Regularization in ``|m|_rho = sqrt(|m|^2 + rho)``.
    S : float, callable or ndarray
        Source term.
    m_boundary : {"dirichlet", "neumann"}
        Boundary condition for the conductance.
    extinction_monitor : bool
        Allows ``rho = 0`` with ``gamma < 1``; the step size is then capped by
        the relaxation time scale of the smallest ``|m|`` so the extinction
        time is resolved.
    """

    D: float = 1e-3
    c: float = 50.0
    gamma: float = 0.5
    r: object = 0.1
    rho: float = 1e-12
    S: object = 1.0
    m_boundary: str = "dirichlet"
    extinction_monitor: bool = False

    def __post_init__(self):
        if not self.D >= 0:
            raise ValueError("D must be non-negative")
        if not self.c > 0:
            raise ValueError("c must be positive")
        if not np.all(np.asarray(self.r) > 0):
            raise ValueError("r must be positive")
        if not self.rho >= 0:
            raise ValueError("rho must be non-negative")
        if self.gamma < 1 and self.rho == 0 and not self.extinction_monitor:
            raise ValueError("gamma < 1 needs rho > 0 unless extinction monitoring is enabled")
        if self.m_boundary not in ("dirichlet", "neumann"):
            raise ValueError("m_boundary must be 'dirichlet' or 'neumann'")


@dataclass(frozen=True)
class Diagnostics:
    k: int
    t: float
    dt: float
    E_h: float
    E_ht: float
    m_ht: float
    s_k: float
    grad_inf: float
    min_abs_m: float

    def as_row(self):
        return tuple(getattr(self, name) for name in CSV_HEADER)


@dataclass
class StepState:
    """One iterate: conductance, matching pressure and flux, diagnostics."""

    k: int
    t: float
    dt: float
    m: np.ndarray
    p: np.ndarray
    sigma: np.ndarray
    diag: Diagnostics = None
    grad_p: np.ndarray = field(default=None, repr=False)


@dataclass(frozen=True)
class StopRule:
    """Run termination; the first rule that fires wins.

    ``T`` is a final time, ``tol_E``/``tol_m`` a stationarity test on
    ``|E_ht|`` and ``m_ht``, ``extinction`` a threshold on ``min |m|``.
    """

    T: float = None
    tol_E: float = None
    tol_m: float = None
    extinction: float = None
    max_steps: int = 1_000_000

    def __post_init__(self):
        if self.T is None and self.tol_E is None and self.tol_m is None and self.extinction is None:
            raise ValueError("stop rule needs T, a stationarity tolerance or an extinction threshold")


@dataclass
class RunResult:
    trajectory: list
    final: StepState
    reason: str
    T_ex: float = None
    rejected_steps: int = 0
    energy_violations: int = 0


# -- pointwise model terms ------------------------------------------------------------


def regularized_norm(m, rho):
    m = np.asarray(m, dtype=float)
    return np.sqrt(np.sum(m * m, axis=-1) + rho)


def relaxation_forcing(m, grad_p, c, gamma, rho):
    """``c^2 (grad p (x) grad p) m - |m|_rho^{2(gamma-1)} m``; works on (2,) or (M, 2)."""
    m = np.asarray(m, dtype=float)
    grad_p = np.asarray(grad_p, dtype=float)
    proj = np.sum(m * grad_p, axis=-1, keepdims=True)
    nrm2 = np.sum(m * m, axis=-1) + rho
    if gamma < 1:
        bad = nrm2 == 0
        if np.any(bad):
            idx = int(np.flatnonzero(np.atleast_1d(bad))[0])
            raise SingularRelaxationError(f"relaxation is singular at m = 0 (triangle {idx})")
        scale = np.power(nrm2, gamma - 1.0)
    else:
        scale = np.power(nrm2, gamma - 1.0) if gamma != 1 else np.ones_like(nrm2)
    return c**2 * proj * grad_p - scale[..., None] * m


def adapt_dt(dt_prev, grad_inf, dt_max=1e-2, first=False):
    """Adaptive step from ``g = c ||grad p||_inf``.

    The first step is ``1/(2 g^2)``.  Afterwards the previous step is kept while
    it lies in ``(1/(20 g^2), 9/(10 g^2))`` and reset to ``1/(2 g^2)`` otherwise.
    The result never exceeds ``dt_max``; ``g = 0`` gives ``dt_max``.
    """
    if grad_inf == 0:
        return dt_max
    scale = 1.0 / grad_inf**2
    if first or dt_prev is None or not (scale / 20 < dt_prev < 0.9 * scale):
        dt = 0.5 * scale
    else:
        dt = dt_prev
    return min(dt, dt_max)


def sparsity_index(mesh, u):
    """``||u||_{L2} / ||u||_{L1}``; NaN when ``u`` vanishes."""
    mag = np.sqrt(np.sum(u * u, axis=-1))
    l1 = float(np.sum(mesh.areas * mag))
    if l1 == 0:
        return math.nan
    return fem.l2_norm_p0(mesh, mag) / l1


def nondimensionalize(D, c, alpha, r, x_bar, m_bar, S_bar, gamma):
    """Scaled coefficients for characteristic length, conductance and source.

    Returns a dict with ``t_bar``, ``p_bar``, ``r``, ``c`` and ``D``.  The
    diffusivity uses ``D_s^2 = D^2 t_bar / x_bar^2``.
    """
    for name, val in (("alpha", alpha), ("x_bar", x_bar), ("m_bar", m_bar), ("S_bar", S_bar)):
        if not val > 0:
            raise ValueError(f"{name} must be positive")
    t_bar = 1.0 / (alpha * m_bar ** (2 * (gamma - 1)))
    p_bar = x_bar**2 * S_bar / m_bar**2
    c2 = c**2 * p_bar**2 / (alpha * x_bar**2 * m_bar ** (2 * (gamma - 1)))
    return {
        "t_bar": t_bar,
        "p_bar": p_bar,
        "r": r / m_bar**2,
        "c": math.sqrt(c2),
        "D": math.sqrt(D**2 * t_bar / x_bar**2),
    }


# -- simulator ---------------------------------------------------------------------------


class Simulator:
    """IMEX integrator bound to one mesh and one parameter set.

    Parameters
    ----------
    mesh : Mesh
    params : ModelParams
    dt_max, dt_min : float
        Step cap and abort floor.
    solver : str
        ``"lagged"`` (PCG preconditioned by a reused factorization) or any
        method accepted by :func:`fem.solve_spd`.
    tol : float
        Relative residual of the pressure solve.
    on_energy_increase : {"warn", "abort", "reject"}
        Response to ``E^{k+1} > E^k + 1e-10 max(1, E^k)``.  ``"reject"`` retries
        the step with half the step size.
    """

    energy_tol = 1e-10
    extinction_threshold = 1e-8

    def __init__(self, mesh, params, dt_max=1e-2, dt_min=1e-14, solver="lagged", tol=1e-10,
                 on_energy_increase="warn"):
        if on_energy_increase not in ("warn", "abort", "reject"):
            raise ValueError("on_energy_increase must be 'warn', 'abort' or 'reject'")
        self.mesh, self.params = mesh, params
        self.dt_max, self.dt_min = dt_max, dt_min
        self.solver, self.tol = solver, tol
        self.on_energy_increase = on_energy_increase
        self.assembler = fem.P1Assembler(mesh)
        self.r = fem.per_triangle(mesh, params.r)
        self._load = self.assembler.load(params.S)
        self._blocks = fem.mixed_blocks(mesh, params.m_boundary)
        self._ops = OrderedDict()
        self._lagged = fem.LaggedFactorSolver(tol) if solver == "lagged" else None

    # building blocks
    def pressure(self, m, x0=None):
        A = self.assembler.stiffness(fem.permeability(m, self.r))
        system = fem.SparseSystem(A, self._load, self.assembler.free, self.mesh.n_vertices)
        if self._lagged is not None:
            return self._lagged.solve(system, x0=x0)
        return fem.solve_spd(system, tol=self.tol, method=self.solver, x0=x0)

    def operator(self, dt):
        op = self._ops.get(dt)
        if op is None:
            op = fem.MixedOperator(self.mesh, self.params.D, dt, self.params.m_boundary, self._blocks)
            self._ops[dt] = op
            if len(self._ops) > 4:
                self._ops.popitem(last=False)
        else:
            self._ops.move_to_end(dt)
        return op

    def flux(self, m):
        if self.params.D == 0:
            return np.zeros((len(self._blocks[3]), 2))
        return self.operator(1.0).flux(m)

    def energy(self, m, p, sigma, grad_p=None):
        """Discrete energy of a state; NaN when ``gamma = 0``."""
        try:
            return discrete_energy(self.mesh, m, p, sigma, self.params, self._blocks[2], grad_p, self.r)
        except ValueError:
            return math.nan

    def initial_state(self, m0, t0=0.0):
        m0 = np.array(m0, dtype=float)
        if m0.shape != (self.mesh.n_triangles, 2):
            raise ValueError("m0 must have shape (n_triangles, 2)")
        p = self.pressure(m0)
        g = fem.gradient_per_triangle(self.mesh, p)
        sigma = self.flux(m0)
        state = StepState(0, float(t0), 0.0, m0, p, sigma, grad_p=g)
        state.diag = self._diagnostics(state, None)
        return state

    def _diagnostics(self, state, prev):
        mesh, c = self.mesh, self.params.c
        g = state.grad_p
        E = self.energy(state.m, state.p, state.sigma, g)
        if prev is None:
            E_ht = m_ht = math.nan
        else:
            E_ht = (E - prev.diag.E_h) / state.dt
            m_ht = fem.l2_norm_p0(mesh, state.m - prev.m) / state.dt
        u = fem.velocity(state.m, g, self.r)
        return Diagnostics(
            k=state.k,
            t=state.t,
            dt=state.dt,
            E_h=E,
            E_ht=E_ht,
            m_ht=m_ht,
            s_k=sparsity_index(mesh, u),
            grad_inf=float(c * np.max(np.sqrt(np.sum(g * g, axis=1)))),
            min_abs_m=float(np.min(np.sqrt(np.sum(state.m**2, axis=1)))),
        )

    def next_dt(self, state):
        dt = adapt_dt(state.dt if state.k > 0 else None, state.diag.grad_inf, self.dt_max,
                      first=state.k == 0)
        prm = self.params
        if prm.extinction_monitor and prm.gamma < 1:
            mn, thr = state.diag.min_abs_m, self.extinction_threshold
            if mn > 0:
                # halve the smallest |m| per step; close to the threshold take one
                # final step that lands it at about thr/2
                theta = 0.5 if mn > 100 * thr else 1.0 - 0.5 * thr / mn
                dt = min(dt, theta * mn ** (2 * (1 - prm.gamma)))
        return dt

    def step(self, state, dt):
        """One IMEX step of size ``dt``; returns the new state."""
        if not dt > 0:
            raise TimeStepError("time step must be positive")
        prm = self.params
        f = relaxation_forcing(state.m, state.grad_p, prm.c, prm.gamma, prm.rho)
        bad = ~np.all(np.isfinite(f), axis=1)
        if np.any(bad):
            raise FloatingPointError(f"non-finite forcing on triangle {int(np.flatnonzero(bad)[0])}")
        rhs = state.m + dt * f
        m_new, sigma = self.operator(dt).solve(rhs)
        p = self.pressure(m_new, x0=state.p)
        g = fem.gradient_per_triangle(self.mesh, p)
        new = StepState(state.k + 1, state.t + dt, dt, m_new, p, sigma, grad_p=g)
        new.diag = self._diagnostics(new, state)
        return new

    def run(self, state, stop, callback=None):
        """Advance ``state`` until ``stop`` fires.

        ``callback(state)`` is invoked after every accepted step.  The
        trajectory holds one :class:`Diagnostics` per accepted step, starting
        with the initial one.
        """
        if stop.extinction is not None:
            self.extinction_threshold = stop.extinction
        traj = [state.diag]
        rejected = violations = 0
        T_ex = None
        while True:
            reason = self._check_stop(state, stop)
            if reason is not None:
                if reason == "extinction":
                    T_ex = state.t
                break
            dt = self.next_dt(state)
            if stop.T is not None:
                dt = min(dt, stop.T - state.t)
            while True:
                if dt < self.dt_min:
                    raise TimeStepError(f"step size {dt:.3e} fell below {self.dt_min:.1e} at t={state.t}")
                new = self.step(state, dt)
                E0, E1 = state.diag.E_h, new.diag.E_h
                if not (E1 > E0 + self.energy_tol * max(1.0, abs(E0))):
                    break
                if self.on_energy_increase == "reject":
                    rejected += 1
                    dt *= 0.5
                    continue
                violations += 1
                msg = f"energy increased by {E1 - E0:.3e} at step {new.k} (t={new.t:.6g})"
                if self.on_energy_increase == "abort":
                    raise EnergyIncreaseError(msg)
                log.warning(msg)
                break
            state = new
            traj.append(state.diag)
            if callback is not None:
                callback(state)
        return RunResult(traj, state, reason, T_ex, rejected, violations)

    @staticmethod
    def _check_stop(state, stop):
        d = state.diag
        if stop.extinction is not None and d.min_abs_m < stop.extinction:
            return "extinction"
        if stop.T is not None and state.t >= stop.T * (1 - 1e-14):
            return "final_time"
        if state.k > 0 and (stop.tol_E is not None or stop.tol_m is not None):
            ok_E = stop.tol_E is None or abs(d.E_ht) < stop.tol_E
            ok_m = stop.tol_m is None or d.m_ht < stop.tol_m
            if ok_E and ok_m:
                return "stationary"
        if state.k >= stop.max_steps:
            return "max_steps"
        return None


def discrete_energy(mesh, m, p, sigma, params, mass_rt0=None, grad_p=None, r=None):
    """``1/2 int D^2|sigma|^2 + |m|_rho^{2 gamma}/gamma + c^2 (r I + m (x) m) grad p . grad p``.

    Raises ``ValueError`` for ``gamma = 0``.
    """
    gamma = params.gamma
    if gamma == 0:
        raise ValueError("energy is undefined for gamma = 0")
    if grad_p is None:
        grad_p = fem.gradient_per_triangle(mesh, p)
    if r is None:
        r = fem.per_triangle(mesh, params.r)
    m = np.asarray(m, dtype=float)
    metabolic = regularized_norm(m, params.rho) ** (2 * gamma) / gamma
    pump = params.c**2 * (r * np.sum(grad_p**2, axis=1) + np.sum(m * grad_p, axis=1) ** 2)
    E = 0.5 * float(np.sum(mesh.areas * (metabolic + pump)))
    if params.D > 0 and sigma is not None and np.size(sigma):
        if mass_rt0 is None:
            mass_rt0 = fem.mixed_blocks(mesh, params.m_boundary)[2]
        E += 0.5 * params.D**2 * float(np.sum(sigma * (mass_rt0 @ sigma)))
    return E


def diagnostics(sim, state, prev_state=None):
    """Diagnostics of ``state`` relative to ``prev_state`` (see :class:`Diagnostics`)."""
    if state.grad_p is None:
        state = replace(state, grad_p=fem.gradient_per_triangle(sim.mesh, state.p))
    return sim._diagnostics(state, prev_state)


def imex_step(sim, state, dt=None):
    """Advance one step, choosing ``dt`` by the adaptive rule when omitted."""
    return sim.step(state, sim.next_dt(state) if dt is None else dt)


def initial_conductance(mesh, shift=0.0):
    """Strip datum: ``m_1 = 1`` on ``{x_1 <= 0.3, |x_2| <= 0.0125}``, else 0, as exact cell means.

    ``shift`` is added to the first component everywhere.
    """
    box = fem.BoxIndicator(-1e3, 0.3, -0.0125, 0.0125)
    m = box.cell_means(mesh)
    m[:, 0] += shift
    return m
