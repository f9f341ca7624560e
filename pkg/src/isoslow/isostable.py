"""Isostable-coordinate machinery along trajectories.

Gradient covectors I_k ride the adjoint equation dI/dt = -(J^T - lam_k) I;
their duals g_k ride dg/dt = (J - lam_k) g.  Backward-in-time propagation of
the slow I_k is numerically stable (errors decay), which is what makes
manifold tracing viable; forward propagation of g is provided for property
checks.  Isostable values are read off the forward flow once it enters a
small ball around the fixed point where the linearization is trusted.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import BasinEscape, GridMismatch, HorizonExceeded
from .numerics import IntegratorConfig, Path, hermite_eval

__all__ = [
    "STM",
    "propagate_I_backward",
    "propagate_g_forward",
    "evaluate_psi",
    "state_transition",
    "entry_radius",
    "seed_radius",
]


def entry_radius(x0, scale=1e-3):
    """Ball radius around x0 inside which the linear regime is trusted."""
    return scale * (1.0 + np.linalg.norm(x0))


def seed_radius(x0, scale=1e-6):
    """Much tighter ball used for seeding I_k = w_k."""
    return scale * (1.0 + np.linalg.norm(x0))


def propagate_I_backward(model, traj, lams, i_init):
    """Propagate gradient covectors along a backward-time trajectory.

    ``traj`` is a Path parametrized by backward time (t=0 at the end nearest
    the fixed point); ``i_init`` (L, n) seeds the covectors there, typically
    the left eigenvectors w_k.  Solves dI/dt~ = (J^T - lam) I on the
    trajectory's own grid and returns (len(traj), L, n) complex samples.
    """
    i_init = np.atleast_2d(np.asarray(i_init, dtype=complex))
    if i_init.shape[1] != model.dim:
        raise GridMismatch("covector length must match model dimension")
    fwd = traj.reversed_time()
    out = kernels.adjoint_backward(model, fwd, lams, i_init)
    return out[::-1]


def propagate_g_forward(model, traj, lam, g_init):
    """Propagate a dual vector dg/dt = (J - lam) g along a forward path.

    Returns samples at the trajectory's nodes.  Property-test machinery:
    backward propagation of g amplifies fast-mode errors and is deliberately
    not offered.
    """
    g = np.asarray(g_init, dtype=complex).copy()
    t, X, F = traj.t, traj.x, traj.f
    out = np.empty((t.size, g.size), dtype=complex)
    out[0] = g
    jac = model.jac
    lam = complex(lam)
    for k in range(t.size - 1):
        t0, t1 = t[k], t[k + 1]
        h = t1 - t0
        xm = hermite_eval(0.5 * (t0 + t1), t0, t1, X[k], X[k + 1], F[k], F[k + 1])

        def d(xs, gv):
            return (jac(xs) - lam * np.eye(gv.size)) @ gv

        k1 = d(X[k], g)
        k2 = d(xm, g + 0.5 * h * k1)
        k3 = d(xm, g + 0.5 * h * k2)
        k4 = d(X[k + 1], g + h * k3)
        g = g + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = g
    return out


def evaluate_psi(model, spectrum, x, cfg=None, ball_scale=1e-3,
                 horizon_factor=60.0):
    """Slow isostable coordinates of a state via the forward flow.

    Integrates until the trajectory first enters the linear-regime ball and
    reads ``psi_k = w_k (x(T) - x0) exp(-lam_k T)``.  Conjugate pairs are
    renormalized to be exactly conjugate.  Returns a complex array of the
    ``beta`` slow values.
    """
    if spectrum.beta is None:
        raise GridMismatch("spectrum.beta must be set (call select_beta)")
    cfg = cfg or IntegratorConfig()
    x = np.asarray(x, dtype=float)
    r = entry_radius(spectrum.x0, ball_scale)
    lam1 = spectrum.values[0]
    horizon = horizon_factor / max(abs(lam1.real), 1e-12)
    if np.linalg.norm(x - spectrum.x0) <= r:
        path = None
        T = 0.0
        xT = x
    else:
        try:
            path = kernels.simulate(model, x, horizon, cfg,
                                    stop_center=spectrum.x0, stop_radius=r)
        except Exception as exc:
            raise BasinEscape("forward flow left the basin of attraction",
                              x=x) from exc
        if path.status != "stopped":
            raise HorizonExceeded(
                "trajectory did not reach the linear-regime ball",
                horizon=horizon, final_distance=float(
                    np.linalg.norm(path.x[-1] - spectrum.x0)))
        T = float(path.t[-1])
        xT = path.x[-1]
    dx = xT - spectrum.x0
    out = np.empty(spectrum.beta, dtype=complex)
    for k in range(spectrum.beta):
        out[k] = (spectrum.left[k] @ dx) * np.exp(-spectrum.values[k] * T)
    for k in range(spectrum.beta):
        j = spectrum.pair_partner(k)
        if j != k and j < spectrum.beta and j > k:
            avg = 0.5 * (out[k] + np.conj(out[j]))
            out[k], out[j] = avg, np.conj(avg)
    return out


@dataclass(frozen=True)
class STM:
    """State-transition matrix over [t1, t2] with shifted-variant access."""

    t1: float
    t2: float
    phi: np.ndarray

    def shifted(self, lam):
        """Phi_k = Phi_J * exp(-lam (t2 - t1)), the STM of the lam-shifted system."""
        return self.phi * np.exp(-lam * (self.t2 - self.t1))

    def compose(self, earlier):
        """Phi(t2, t0) from Phi(t2, t1) and an earlier Phi(t1, t0)."""
        if abs(earlier.t2 - self.t1) > 1e-9 * (1 + abs(self.t1)):
            raise GridMismatch("intervals do not chain",
                               t1=self.t1, earlier_t2=earlier.t2)
        return STM(t1=earlier.t1, t2=self.t2, phi=self.phi @ earlier.phi)


def state_transition(model, traj):
    """Integrate the variational system along a stored forward trajectory.

    Returns an STM over the trajectory's full span; the N x N system
    dM/dt = J(x(t)) M is advanced with RK4 on the trajectory's grid using
    cubic-Hermite states at half-steps.
    """
    t, X, F = traj.t, traj.x, traj.f
    n = X.shape[1]
    M = np.eye(n)
    jac = model.jac
    for k in range(t.size - 1):
        t0, t1 = t[k], t[k + 1]
        h = t1 - t0
        xm = hermite_eval(0.5 * (t0 + t1), t0, t1, X[k], X[k + 1], F[k], F[k + 1])
        k1 = jac(X[k]) @ M
        k2 = jac(xm) @ (M + 0.5 * h * k1)
        k3 = jac(xm) @ (M + 0.5 * h * k2)
        k4 = jac(X[k + 1]) @ (M + h * k3)
        M = M + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
    return STM(t1=float(t[0]), t2=float(t[-1]), phi=M)
