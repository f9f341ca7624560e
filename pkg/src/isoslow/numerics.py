"""Dense linear algebra and ODE integration kernels.

Everything here is pure and deterministic: identical inputs produce
identical outputs (no randomized pivoting, no wall-clock dependence).
Complex eigen data follow a fixed ordering and phase convention so that
downstream isostable coordinates are reproducible across runs.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    BlowUp,
    NonDiagonalizable,
    NonFinite,
    Singular,
    StepLimitExceeded,
)

__all__ = [
    "EigenSystem",
    "IntegratorConfig",
    "Path",
    "eig",
    "pinv",
    "solve",
    "integrate",
    "hermite_eval",
]


def check_finite(name, a):
    a = np.asarray(a)
    if not np.all(np.isfinite(a.view(np.float64) if np.iscomplexobj(a) else a)):
        raise NonFinite(f"{name} contains NaN or Inf")
    return a


# ---------------------------------------------------------------------------
# eigendecomposition with biorthonormal left/right pairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EigenSystem:
    """Sorted eigenvalues with biorthonormal right (columns) / left (rows) vectors.

    Satisfies ``left @ right ~= I`` and ``A @ right[:, k] ~= values[k] * right[:, k]``.
    """

    values: np.ndarray   # (n,) complex
    right: np.ndarray    # (n, n) complex, eigenvectors in columns
    left: np.ndarray     # (n, n) complex, dual covectors in rows

    @property
    def n(self):
        return self.values.size

    def conj_partner(self):
        """index map k -> j with values[j] == conj(values[k]); k for real ones."""
        vals = self.values
        partner = np.arange(vals.size)
        used = set()
        for k in range(vals.size):
            if k in used or abs(vals[k].imag) < 1e-13 * (1 + abs(vals[k])):
                continue
            for j in range(k + 1, vals.size):
                if j in used and partner[j] != j:
                    continue
                if abs(vals[j] - np.conj(vals[k])) < 1e-8 * (1 + abs(vals[k])):
                    partner[k], partner[j] = j, k
                    used.update((k, j))
                    break
        return partner


def _sort_order(values):
    # ascending |Re|, ties broken by ascending Im
    return np.lexsort((values.imag, np.abs(values.real)))


def _fix_phase(v):
    v = v / np.linalg.norm(v)
    k = int(np.argmax(np.abs(v)))
    ph = v[k] / abs(v[k])
    return v / ph


def eig(A, cond_tol=1e12, pair_tol=1e-8):
    """Eigendecomposition with deterministic order, phase and conjugate pairing.

    Ordering is ascending ``|Re lambda|`` with ties broken by ascending
    imaginary part.  Each right eigenvector is unit norm with its
    largest-magnitude component rotated to the positive real axis; left
    vectors are the rows of the inverse of the right-eigenvector matrix,
    so ``left[j] @ right[:, k] = delta_jk``.  Detected conjugate pairs are
    made exactly conjugate by averaging.
    """
    A = check_finite("matrix", np.asarray(A))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise NonFinite("matrix must be square")
    vals, vecs = np.linalg.eig(A)
    order = _sort_order(vals)
    vals, vecs = vals[order], vecs[:, order]
    vecs = np.array([_fix_phase(vecs[:, k]) for k in range(vals.size)]).T

    # enforce exact conjugacy on detected pairs (keeping value/vector pairing)
    scale = np.max(np.abs(vals)) + 1.0
    used = set()
    for k in range(vals.size):
        if k in used or abs(vals[k].imag) <= pair_tol * scale:
            continue
        for j in range(k + 1, vals.size):
            if j in used:
                continue
            if abs(vals[j] - np.conj(vals[k])) <= pair_tol * scale:
                lam = 0.5 * (vals[k] + np.conj(vals[j]))
                v = _fix_phase(0.5 * (vecs[:, k] + np.conj(vecs[:, j])))
                vals[k], vals[j] = lam, np.conj(lam)
                vecs[:, k], vecs[:, j] = v, np.conj(v)
                if vals[k].imag > vals[j].imag:
                    vals[[k, j]] = vals[[j, k]]
                    vecs[:, [k, j]] = vecs[:, [j, k]]
                used.update((k, j))
                break

    resid = np.max(np.abs(A @ vecs - vecs * vals))
    norm_a = np.linalg.norm(A)
    if resid > 1e-9 * max(norm_a, 1.0):
        raise NonDiagonalizable(
            "eigen residual too large after pairing",
            residual=float(resid / max(norm_a, 1.0)))
    sv = np.linalg.svd(vecs, compute_uv=False)
    if sv[-1] <= 0 or sv[0] / sv[-1] > cond_tol:
        raise NonDiagonalizable(
            "eigenvector matrix is numerically singular",
            condition=float(sv[0] / max(sv[-1], 1e-300)),
        )
    left = np.linalg.inv(vecs)
    return EigenSystem(values=vals, right=vecs, left=left)


def pinv(A, rank_tol=1e-12):
    """Moore-Penrose pseudoinverse via SVD truncation at ``rank_tol`` (relative)."""
    A = check_finite("matrix", np.asarray(A))
    return np.linalg.pinv(A, rcond=rank_tol)


def solve(A, b, pivot_tol=1e-14):
    """Linear solve returning the solution and a 2-norm condition estimate."""
    A = check_finite("matrix", np.asarray(A))
    b = check_finite("rhs", np.asarray(b))
    sv = np.linalg.svd(A, compute_uv=False)
    cond = float(sv[0] / max(sv[-1], 1e-300))
    if sv[-1] <= pivot_tol * max(sv[0], 1.0):
        raise Singular("matrix numerically singular", condition=cond)
    x = np.linalg.solve(A, b)
    return x, cond


# ---------------------------------------------------------------------------
# ODE integration: fixed-step RK4 and adaptive Dormand-Prince 5(4)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntegratorConfig:
    """Step-control settings shared by the python and compiled lanes.

    ``method`` is "dp54" (adaptive embedded 5(4) pair with PI control) or
    "rk4" (fixed step ``h``).  ``blowup`` bounds the state norm; crossing it
    signals leaving the basin of attraction.
    """

    method: str = "dp54"
    h: float = 0.01
    rtol: float = 1e-9
    atol: float = 1e-12
    max_steps: int = 5_000_000
    blowup: float = 1e8
    max_step: float = np.inf
    first_step: float = 1e-4

    def __post_init__(self):
        if self.method not in ("dp54", "rk4"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.h <= 0 or self.rtol <= 0 or self.atol <= 0:
            raise ValueError("step size and tolerances must be positive")

    def with_(self, **kw):
        return replace(self, **kw)


# Dormand-Prince coefficients (shared verbatim with the compiled lane)
DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
DP_A = np.array([
    [0, 0, 0, 0, 0, 0],
    [1 / 5, 0, 0, 0, 0, 0],
    [3 / 40, 9 / 40, 0, 0, 0, 0],
    [44 / 45, -56 / 15, 32 / 9, 0, 0, 0],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0, 0],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0],
])
DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
# b - b_hat: weights of the embedded 4th-order error estimate
DP_E = np.array([
    35 / 384 - 5179 / 57600,
    0.0,
    500 / 1113 - 7571 / 16695,
    125 / 192 - 393 / 640,
    -2187 / 6784 + 92097 / 339200,
    11 / 84 - 187 / 2100,
    -1 / 40,
])


def hermite_eval(t, t0, t1, x0, x1, f0, f1, deriv=False):
    """Cubic Hermite interpolation on one interval (vectorized over t)."""
    h = t1 - t0
    s = (np.asarray(t) - t0) / h
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    val = (
        np.multiply.outer(h00, x0)
        + np.multiply.outer(h10 * h, f0)
        + np.multiply.outer(h01, x1)
        + np.multiply.outer(h11 * h, f1)
    )
    if not deriv:
        return val
    d00 = (6 * s**2 - 6 * s) / h
    d10 = 3 * s**2 - 4 * s + 1
    d01 = (-6 * s**2 + 6 * s) / h
    d11 = 3 * s**2 - 2 * s
    der = (
        np.multiply.outer(d00, x0)
        + np.multiply.outer(d10, f0)
        + np.multiply.outer(d01, x1)
        + np.multiply.outer(d11, f1)
    )
    return val, der


class Path:
    """Sampled trajectory with node derivatives for cubic Hermite dense output."""

    def __init__(self, t, x, f):
        self.t = np.asarray(t, dtype=float)
        self.x = np.asarray(x, dtype=float)
        self.f = np.asarray(f, dtype=float)

    def __len__(self):
        return self.t.size

    @property
    def duration(self):
        return float(self.t[-1] - self.t[0])

    def _locate(self, s):
        idx = np.searchsorted(self.t, s, side="right") - 1
        return np.clip(idx, 0, self.t.size - 2)

    def __call__(self, s):
        """Interpolated state(s) at time(s) ``s``."""
        s = np.asarray(s, dtype=float)
        scalar = s.ndim == 0
        s1 = np.atleast_1d(s)
        out = np.empty((s1.size, self.x.shape[1]))
        idx = self._locate(s1)
        for i, (si, k) in enumerate(zip(s1, idx)):
            out[i] = hermite_eval(
                si, self.t[k], self.t[k + 1],
                self.x[k], self.x[k + 1], self.f[k], self.f[k + 1],
            )
        return out[0] if scalar else out

    def reversed_time(self):
        """Same geometric path, parametrized by s = t_end - t."""
        tr = self.t[-1] - self.t[::-1]
        return Path(tr, self.x[::-1].copy(), -self.f[::-1])


def _error_norm(err, y_old, y_new, rtol, atol):
    sc = atol + rtol * np.maximum(np.abs(y_old), np.abs(y_new))
    return float(np.sqrt(np.mean((err / sc) ** 2)))


def integrate(rhs, x0, t_span, cfg=None, stop=None, record=True):
    """Integrate ``dx/dt = rhs(t, x)`` over ``t_span`` with dense node output.

    Parameters
    ----------
    rhs : callable(t, x) -> array
    x0 : initial state
    t_span : (t0, t1) with t1 > t0
    cfg : IntegratorConfig
    stop : optional callable(t, x) -> float; integration terminates at the
        first accepted node where the value is <= 0 (node granularity; both
        integration lanes share this convention).
    record : if False, only the final node is kept (still returns a Path of
        the first/last nodes).

    Returns
    -------
    Path
        Accepted-step nodes (t, x, f).  ``path.status`` is "done" or "stopped".

    Raises
    ------
    BlowUp, StepLimitExceeded
    """
    cfg = cfg or IntegratorConfig()
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ValueError("t_span must be increasing")
    x = np.array(x0, dtype=float)
    f = np.asarray(rhs(t0, x), dtype=float)
    ts, xs, fs = [t0], [x.copy()], [f.copy()]
    status = "done"

    def step_out(t_new, x_new, f_new):
        if record:
            ts.append(t_new)
            xs.append(x_new.copy())
            fs.append(f_new.copy())
        else:
            ts[-1:], xs[-1:], fs[-1:] = [t_new], [x_new.copy()], [f_new.copy()]

    def fail(exc_type, msg, **details):
        exc = exc_type(msg, **details)
        exc.partial = Path(np.array(ts), np.array(xs), np.array(fs))
        exc.partial.status = "blowup" if exc_type is BlowUp else "steplimit"
        raise exc

    def check_state(x_new):
        if not np.all(np.isfinite(x_new)) or np.linalg.norm(x_new) > cfg.blowup:
            fail(BlowUp, "trajectory norm exceeded configured bound",
                 t=ts[-1], norm=float(np.linalg.norm(x_new)))

    if cfg.method == "rk4":
        n_steps = max(1, int(np.ceil((t1 - t0) / cfg.h - 1e-12)))
        h = (t1 - t0) / n_steps
        t = t0
        for i in range(n_steps):
            k1 = f
            k2 = np.asarray(rhs(t + h / 2, x + h / 2 * k1))
            k3 = np.asarray(rhs(t + h / 2, x + h / 2 * k2))
            k4 = np.asarray(rhs(t + h, x + h * k3))
            x_new = x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            check_state(x_new)
            t_new = t0 + (i + 1) * h
            f_new = np.asarray(rhs(t_new, x_new))
            step_out(t_new, x_new, f_new)
            t, x, f = t_new, x_new, f_new
            if stop is not None and stop(t_new, x_new) <= 0:
                status = "stopped"
                break
    else:
        t = t0
        h = min(cfg.first_step, t1 - t0, cfg.max_step)
        err_prev = 1.0
        n = 0
        K = np.empty((7, x.size))
        while t < t1 - 1e-14 * max(1.0, abs(t1)):
            n += 1
            if n > cfg.max_steps:
                fail(StepLimitExceeded, "adaptive step cap reached", t=t,
                     max_steps=cfg.max_steps)
            h = min(h, t1 - t, cfg.max_step)
            K[0] = f
            for i in range(1, 6):
                xi = x + h * (DP_A[i, :i] @ K[:i])
                K[i] = rhs(t + DP_C[i] * h, xi)
            x_new = x + h * (DP_B @ K[:6])
            K[6] = rhs(t + h, x_new)
            err_vec = h * (DP_E @ K)
            err = _error_norm(err_vec, x, x_new, cfg.rtol, cfg.atol)
            if err <= 1.0:
                check_state(x_new)
                t_new = t + h
                f_new = K[6].copy()
                step_out(t_new, x_new, f_new)
                t, x, f = t_new, x_new, f_new
                if stop is not None and stop(t_new, x_new) <= 0:
                    status = "stopped"
                    break
                fac = 0.9 * err ** -0.14 * err_prev ** 0.08 if err > 0 else 10.0
                err_prev = max(err, 1e-10)
                h *= min(10.0, max(0.2, fac))
            else:
                h *= max(0.2, 0.9 * err ** -0.2)

    path = Path(np.array(ts), np.array(xs), np.array(fs))
    path.status = status
    return path
