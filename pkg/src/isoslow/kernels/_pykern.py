"""Pure-Python integration lane (numpy + model callbacks).

Mirrors the compiled lane's semantics exactly: same Runge-Kutta
coefficients, same PI step controller, same stop handling, so the two
lanes agree to rounding error and either can back the rest of the library.
"""

import numpy as np

from ..numerics import Path, hermite_eval, integrate

BACKEND = "python"


def _rhs_factory(model, signal, channel, direction):
    base = model.rhs
    if signal is None or signal.kind == "zero" or channel is None:
        if direction == 1.0:
            return lambda t, x: base(x)
        return lambda t, x: direction * base(x)

    u = signal.u
    b = np.asarray(channel, dtype=float)

    def rhs(t, x):
        return direction * (base(x) + b * u(direction * t))

    if direction == 1.0:
        def rhs(t, x):  # noqa: F811 - fast path without the sign multiply
            return base(x) + b * u(t)
    return rhs


def _stop_factory(stop_center, stop_radius):
    if stop_center is None or not stop_radius:
        return None
    c = np.asarray(stop_center, dtype=float)
    n = c.size

    def stop(t, y):
        return np.linalg.norm(y[:n] - c) - stop_radius

    return stop


def sim(model, x0, t_end, cfg, signal=None, channel=None, direction=1.0,
        stop_center=None, stop_radius=0.0, record=True):
    rhs = _rhs_factory(model, signal, channel, direction)
    path = integrate(rhs, x0, (0.0, t_end), cfg,
                     stop=_stop_factory(stop_center, stop_radius),
                     record=record)
    return path


def sim_stm(model, x0, t_end, cfg, stop_center=None, stop_radius=0.0):
    n = model.dim
    eye = np.eye(n).ravel()

    def rhs(t, y):
        x = y[:n]
        M = y[n:].reshape(n, n)
        return np.concatenate([model.rhs(x), (model.jac(x) @ M).ravel()])

    y0 = np.concatenate([np.asarray(x0, dtype=float), eye])
    aug = integrate(rhs, y0, (0.0, t_end), cfg,
                    stop=_stop_factory(stop_center, stop_radius))
    path = Path(aug.t, aug.x[:, :n], aug.f[:, :n])
    path.status = aug.status
    M_end = aug.x[-1, n:].reshape(n, n)
    return path, M_end


def adjoint_backward(model, path, lams, i_end, substeps=2):
    """Propagate dI/dt = -(J^T - lam*I) I backward along a forward path.

    ``path`` is a forward-time trajectory; ``i_end`` (L, n) holds the values
    at the final node.  Returns (len(path), L, n) complex with the values at
    every node; the integration runs in reversed time (the stable direction
    for slow-mode gradients), RK4 with cubic-Hermite states at stage points.
    """
    lams = np.atleast_1d(np.asarray(lams, dtype=complex))
    I = np.array(np.atleast_2d(i_end), dtype=complex)
    n = model.dim
    t, X, F = path.t, path.x, path.f
    m = t.size
    out = np.empty((m, I.shape[0], n), dtype=complex)
    out[-1] = I

    jac = model.jac

    def deriv(x, I_arr):
        J = jac(x)
        return I_arr @ J - lams[:, None] * I_arr

    for k in range(m - 1, 0, -1):
        t0, t1 = t[k - 1], t[k]
        h_int = (t1 - t0) / substeps
        for s in range(substeps):
            # integrating in sigma = t1 - t; state evaluated at decreasing t
            ta = t1 - s * h_int
            tm = ta - h_int / 2
            tb = ta - h_int
            xa = X[k] if s == 0 else hermite_eval(ta, t0, t1, X[k - 1], X[k],
                                                  F[k - 1], F[k])
            xm = hermite_eval(tm, t0, t1, X[k - 1], X[k], F[k - 1], F[k])
            xb = X[k - 1] if s == substeps - 1 else hermite_eval(
                tb, t0, t1, X[k - 1], X[k], F[k - 1], F[k])
            k1 = deriv(xa, I)
            k2 = deriv(xm, I + 0.5 * h_int * k1)
            k3 = deriv(xm, I + 0.5 * h_int * k2)
            k4 = deriv(xb, I + h_int * k3)
            I = I + (h_int / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k - 1] = I
    return out
