"""One-dimensional reduction on (0, 1).

With ``p_x(0) = 0``, ``p(1) = 0`` and ``S > 0`` the pressure gradient is explicit,
``p_x = -B(x) / (1 + m^2)`` with ``B(x) = int_0^x S``, and the conductance obeys
the scalar reaction-diffusion equation

    m_t - D^2 m_xx = (c^2 B^2 / (1 + m^2)^2 - |m|^{2(gamma-1)}) m

with homogeneous Neumann conditions.  This module provides the critical
constant ``Z_gamma``, stationary point classification for ``D = 0``, the
decay margins below that constant and a finite difference integrator.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, special

GOLDEN = (math.sqrt(5) - 1) / 2


class BreakdownError(FloatingPointError):
    """Solution reached m = 0 where the relaxation term is singular."""


def z_constant(gamma):
    """``Z_gamma = 2/(1+gamma) ((1-gamma)/(1+gamma))^((gamma-1)/2)``, ``Z_1 = 1``.

    ``Z_gamma^2`` is the infimum of :func:`h_gamma` over ``m > 0``.  At
    ``gamma = -1`` the closed form is ``inf * 0``; its limit, and the infimum
    of ``h_{-1}(m) = (1 + m^{-2})^2`` (approached as ``m -> inf``), is 1.
    """
    if not -1 <= gamma <= 1:
        raise ValueError("gamma must lie in [-1, 1]")
    if abs(gamma) == 1:
        return 1.0
    return 2.0 / (1 + gamma) * ((1 - gamma) / (1 + gamma)) ** ((gamma - 1) / 2)


def h_gamma(m, gamma):
    """``m^{2(gamma-1)} (1 + m^2)^2`` for ``m > 0``."""
    m = np.asarray(m, dtype=float)
    if np.any(m <= 0):
        raise ValueError("h_gamma needs m > 0")
    return m ** (2 * (gamma - 1)) * (1 + m * m) ** 2


def log_h_gamma(s, gamma):
    """``log h_gamma(exp(s))``, safe for very small or large ``m``."""
    s = np.asarray(s, dtype=float)
    return 2 * (gamma - 1) * s + 2 * np.logaddexp(0.0, 2 * s)


def h_gamma_min(gamma):
    """``(argmin, min)`` of ``h_gamma`` on ``(0, inf)``.

    For ``gamma >= 1`` the infimum is approached as ``m -> 0`` and the argmin
    is reported as 0.
    """
    if gamma >= 1:
        return 0.0, (1.0 if gamma == 1 else 0.0)
    if gamma <= -1:
        raise ValueError("h_gamma has no positive minimum for gamma <= -1")
    m_star = math.sqrt((1 - gamma) / (1 + gamma))
    return m_star, float(h_gamma(m_star, gamma))


def positive_roots(value, gamma):
    """Positive solutions of ``z^{gamma-1} (1 + z^2) = value``, increasing order.

    Solved with Brent's method on ``log z`` on each monotone branch, so roots
    far below the float range of ``z`` itself are still located (they are
    returned as 0.0 when ``exp`` underflows; use :func:`positive_log_roots`).
    """
    return tuple(math.exp(s) for s in positive_log_roots(value, gamma))


def positive_log_roots(value, gamma):
    """Like :func:`positive_roots` but returns ``log z``."""
    if value <= 0:
        return ()
    target = math.log(value)

    def f(s):
        return (gamma - 1) * s + float(np.logaddexp(0.0, 2 * s)) - target

    def bracket(s0, step):
        s1 = s0 + step
        while f(s1) <= 0:
            step *= 2
            s1 = s0 + step
        return s1

    solve = lambda a, b: optimize.brentq(f, a, b, xtol=1e-15, rtol=1e-15, maxiter=500)  # noqa: E731
    if gamma >= 1:
        if gamma == 1 and value <= 1:
            return ()
        # increasing on the whole line; f -> -inf (or -log(value) <= 0) as s -> -inf
        lo = -1.0
        while f(lo) >= 0:
            lo *= 2
        return (solve(lo, bracket(lo, 1.0)),)
    s_star = 0.5 * math.log((1 - gamma) / (1 + gamma))
    f_star = f(s_star)
    if abs(f_star) <= 4 * np.finfo(float).eps * max(1.0, abs(target)):
        return (s_star,)
    if f_star > 0:
        return ()
    return (solve(bracket(s_star, -1.0), s_star), solve(s_star, bracket(s_star, 1.0)))


# -- profiles -------------------------------------------------------------------------


@dataclass
class Profile1D:
    """Uniform grid on [0, 1] with source, cumulative source and conductance.

    ``B`` is the exact integral of the piecewise linear interpolant of ``S``.
    """

    x: np.ndarray
    S: np.ndarray
    m: np.ndarray
    B: np.ndarray = field(init=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.S = np.broadcast_to(np.asarray(self.S, dtype=float), self.x.shape).copy()
        self.m = np.broadcast_to(np.asarray(self.m, dtype=float), self.x.shape).copy()
        dx = np.diff(self.x)
        if self.x[0] != 0 or abs(self.x[-1] - 1) > 1e-14 or np.any(dx <= 0):
            raise ValueError("grid must increase from 0 to 1")
        self.B = np.concatenate([[0.0], np.cumsum(0.5 * dx * (self.S[1:] + self.S[:-1]))])

    @classmethod
    def uniform(cls, n, S=1.0, m=0.0):
        if n < 1:
            raise ValueError("need at least one interval")
        x = np.linspace(0.0, 1.0, n + 1)
        S = S(x) if callable(S) else S
        m = m(x) if callable(m) else m
        return cls(x, S, m)

    @property
    def dx(self):
        return self.x[1] - self.x[0]

    def l1_norm(self, m=None):
        """Trapezoidal ``int_0^1 |m| dx``."""
        a = np.abs(self.m if m is None else m)
        return float(np.sum(0.5 * np.diff(self.x) * (a[1:] + a[:-1])))


def pressure_gradient_1d(profile, m=None):
    """``p_x = -B / (1 + m^2)`` at the grid points."""
    m = profile.m if m is None else np.asarray(m, dtype=float)
    return -profile.B / (1 + m * m)


def reaction_rate(m, cB, gamma):
    """``g`` in ``m_t = g m``: ``c^2 B^2/(1+m^2)^2 - |m|^{2(gamma-1)}``."""
    m = np.asarray(m, dtype=float)
    a = np.abs(m)
    with np.errstate(divide="ignore"):
        relax = np.where(a > 0, a ** (2 * (gamma - 1)), 0.0 if gamma > 1 else (1.0 if gamma == 1 else np.inf))
    return np.asarray(cB, dtype=float) ** 2 / (1 + m * m) ** 2 - relax


# -- stationary points for D = 0 ---------------------------------------------------------


@dataclass(frozen=True)
class StationaryPoint:
    m: float
    log_abs_m: float
    stability: str  # "stable", "unstable" or "semistable"


@dataclass(frozen=True)
class ClassificationReport:
    gamma: float
    cB: float
    points: tuple

    @property
    def count(self):
        return len(self.points)

    @property
    def labels(self):
        return tuple(p.stability for p in self.points)

    def format(self):
        lines = [f"gamma = {self.gamma!r}, cB = {self.cB!r}, {self.count} stationary point(s)"]
        for p in self.points:
            lines.append(f"  m = {p.m:+.17g}  (log|m| = {p.log_abs_m:.17g})  {p.stability}")
        return "\n".join(lines)


def classify_stationary(cB, gamma):
    """Stationary points of ``m' = (c^2 B^2/(1+m^2)^2 - |m|^{2(gamma-1)}) m``.

    Nonzero points solve ``h_gamma(m) = (cB)^2``.  Points are listed in
    increasing order along the m axis.
    """
    if gamma < 0.5:
        raise ValueError("classification covers gamma >= 1/2")
    if cB < 0:
        raise ValueError("cB must be non-negative")
    logs = positive_log_roots(cB, gamma)
    # the derivative of the rate at a positive root has the sign of -(d/ds) log h
    labels = []
    for s in logs:
        slope = 2 * (gamma - 1) + 4 * special.expit(2 * s)
        if len(logs) == 1 and gamma < 1:
            labels.append("semistable")
        else:
            labels.append("stable" if slope > 0 else "unstable")
    if gamma < 1:
        zero = "stable"
    elif gamma == 1:
        zero = "unstable" if cB > 1 else "stable"
    else:
        zero = "unstable" if cB > 0 else "stable"
    pos = [StationaryPoint(math.exp(s), s, lab) for s, lab in zip(logs, labels)]
    neg = [StationaryPoint(-p.m, p.log_abs_m, p.stability) for p in reversed(pos)]
    return ClassificationReport(float(gamma), float(cB), tuple(neg + [StationaryPoint(0.0, -math.inf, zero)] + pos))


# -- decay margins ---------------------------------------------------------------------------


def _golden_max(f, a, b, iters=200):
    c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if b - a <= 1e-15 * max(1.0, abs(b)):
            break
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return max(fc, fd)


def breakdown_margin(gamma, c, B_sup, M, n_grid=4001):
    """Decay margin on ``0 < |m| <= M`` under ``c B_sup < Z_gamma``.

    For ``1/2 <= gamma <= 1`` returns ``delta = -max(c^2 B^2/(1+m^2)^2 - m^{2(gamma-1)})``;
    for ``-1 <= gamma < 1/2`` returns ``delta~ = -max(c^2 B^2 m/(1+m^2)^2 - m^{2 gamma - 1})``.
    The maximum is taken over a log-spaced grid and refined by golden-section
    search around the best grid point; the limit ``m -> 0`` is included.
    """
    if not -1 <= gamma <= 1:
        raise ValueError("gamma must lie in [-1, 1]")
    if not M > 0:
        raise ValueError("M must be positive")
    cb = c * B_sup
    if not cb < z_constant(gamma):
        raise ValueError("margin requires c * B_sup < Z_gamma")
    if gamma >= 0.5:
        def f(m):
            return cb**2 / (1 + m * m) ** 2 - m ** (2 * (gamma - 1))
        at_zero = cb**2 - 1 if gamma == 1 else -math.inf
    else:
        def f(m):
            return cb**2 * m / (1 + m * m) ** 2 - m ** (2 * gamma - 1)
        at_zero = -math.inf if gamma < 0.5 else None
    grid = M * np.logspace(-12, 0, n_grid)
    vals = np.array([f(m) for m in grid])
    i = int(np.argmax(vals))
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, n_grid - 1)]
    best = max(float(vals[i]), _golden_max(f, a, b), f(M), at_zero)
    return -best


# -- time integration ---------------------------------------------------------------------------


@dataclass
class Trajectory1D:
    t: np.ndarray
    l1: np.ndarray
    sup: np.ndarray
    min_abs: np.ndarray
    snapshots: list
    final: np.ndarray
    reason: str
    T_ex: float = None

    def decay_rate(self):
        """Least-squares rate ``-d log ||m||_{L1} / dt`` over the trajectory."""
        mask = self.l1 > 0
        slope = np.polyfit(self.t[mask], np.log(self.l1[mask]), 1)[0]
        return -float(slope)


def _neumann_banded(n, coef):
    """Banded form of ``I - coef * L`` with the second-order Neumann Laplacian."""
    ab = np.zeros((3, n))
    ab[0, 1:] = -coef
    ab[1, :] = 1 + 2 * coef
    ab[2, :-1] = -coef
    ab[0, 1] = -2 * coef  # ghost point reflection at x = 0
    ab[2, -2] = -2 * coef  # and at x = 1
    return ab


def integrate_1d(profile, D, c, gamma, T=None, extinction=1e-8, theta=0.5, dt_max=1e-2,
                 dt_min=1e-14, stride=0, max_steps=10_000_000):
    """Integrate the reduced equation from ``profile.m``.

    Diffusion is implicit (centered differences, Neumann ends), the reaction
    explicit.  The step obeys ``dt <= theta / max|g|`` so no node loses more
    than the fraction ``theta`` of its value; once ``min|m|`` comes within 100x
    of the extinction threshold the last step is stretched to land it at about
    half the threshold.

    Returns a :class:`Trajectory1D`; ``T_ex`` is the first time ``min|m|``
    drops below ``extinction``.  For ``gamma < 1/2`` without an extinction
    threshold a :class:`BreakdownError` is raised when ``m`` reaches zero.
    For ``1/2 <= gamma < 1`` nodes also vanish in finite time; a node that
    would reach zero within ``100 dt_min`` is set to zero and stays there.
    """
    if D < 0:
        raise ValueError("D must be non-negative")
    if T is None and extinction is None:
        raise ValueError("need a final time or an extinction threshold")
    cB = c * profile.B
    m = profile.m.copy()
    n = len(m)
    h = profile.dx
    t = 0.0
    ts, l1, sup, mins, snaps = [0.0], [profile.l1_norm(m)], [np.max(np.abs(m))], [np.min(np.abs(m))], []
    if stride:
        snaps.append((0.0, m.copy()))
    reason, T_ex, k = None, None, 0
    while True:
        amin = float(np.min(np.abs(m)))
        if extinction is not None and amin < extinction:
            reason, T_ex = "extinction", t
            break
        if T is not None and t >= T * (1 - 1e-14):
            reason = "final_time"
            break
        if k >= max_steps:
            reason = "max_steps"
            break
        if gamma < 0.5 and amin == 0:
            raise BreakdownError(f"m reached zero at t={t}")
        g = np.where(m == 0, 0.0, reaction_rate(m, cB, gamma))
        if 0.5 <= gamma < 1:
            # a node that would vanish within 100 dt_min has reached zero at this resolution
            gone = (g < 0) & (-g * 100 * dt_min > theta)
            if gone.any():
                m = np.where(gone, 0.0, m)
                g = np.where(gone, 0.0, g)
        gmax = float(np.max(np.abs(g)))
        dt = dt_max if gmax == 0 else min(dt_max, theta / gmax)
        if extinction is not None and 0 < amin <= 100 * extinction:
            i = int(np.argmin(np.abs(m)))
            if g[i] < 0:
                # final step: the smallest node lands near extinction / 2, no node changes sign
                dt = (1 - 0.5 * extinction / amin) / -g[i]
                dt = min(dt, dt_max, (1 - 1e-12) / max(-float(np.min(g)), 1e-300))
        if T is not None:
            dt = min(dt, T - t)
        if dt < dt_min:
            if gamma < 0.5:
                raise BreakdownError(f"step size collapsed near m = 0 at t={t}")
            raise RuntimeError(f"step size {dt:.3e} below {dt_min:.1e} at t={t}")
        rhs = m + dt * g * m
        if D > 0:
            m = linalg.solve_banded((1, 1), _neumann_banded(n, dt * D**2 / h**2), rhs)
        else:
            m = rhs
        t += dt
        k += 1
        ts.append(t)
        l1.append(profile.l1_norm(m))
        sup.append(float(np.max(np.abs(m))))
        mins.append(float(np.min(np.abs(m))))
        if stride and k % stride == 0:
            snaps.append((t, m.copy()))
    return Trajectory1D(np.array(ts), np.array(l1), np.array(sup), np.array(mins), snaps, m, reason, T_ex)
