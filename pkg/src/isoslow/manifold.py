"""Backward-time tracing of slow invariant manifolds.

Two strategies trace rays of the slow manifold backward from seeds near the
fixed point:

* ``trace_asym`` follows the backward evolution equation with the dual
  vectors g_j evaluated from the isostable-coordinate series expansion.
* ``trace_pc`` alternates prediction (complement frozen to the slow
  eigenvectors) with a correction built from the spectral split of the
  state-transition matrix over the trailing trajectory, refreshing the
  gradient covectors by forward re-simulation after every correction.
  Optional refinement passes re-run the trace with the dual vectors read
  from a polynomial fit of the previous pass, which contracts the
  correction bias toward the exact invariance condition.

Both produce ManifoldTrajectory rays carrying states, slow isostable values
(closed form in backward time), gradient covectors and per-step diagnostics.
"""

import io
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import kernels
from .errors import (
    AbortOnDivergence,
    BlowUp,
    DegenerateFastBasis,
    IllConditioned,
    InsufficientCoverage,
    NonDiagonalizable,
    StepLimitExceeded,
)
from .isostable import entry_radius
from .numerics import IntegratorConfig, Path, solve

__all__ = [
    "TraceConfig",
    "ManifoldTrajectory",
    "SlowManifold",
    "backward_rhs",
    "trace_asym",
    "trace_pc",
    "trace_naive",
    "build_manifold",
    "tube_deviation",
    "ray_to_csv",
]


@dataclass(frozen=True)
class TraceConfig:
    """Settings shared by the tracing strategies.

    ``dt`` is the predictor-corrector cadence (and the node spacing of the
    stored rays is ``dt / substeps``).  ``passes`` > 1 enables refinement
    passes of the predictor-corrector; pass 1 always uses the spectral-split
    dual vectors.  ``psi_cap`` stops a ray once |psi_1| exceeds it.
    """

    T: float = 100.0
    dt: float = 0.25
    substeps: int = 5
    passes: int = 60               # continuation-pass cap (1 = spectral only)
    growth: float = 1.25           # trusted-radius extension per pass
    noise_ratio: float = 0.03      # correction/local-scale trust criterion
    delta_ratio: float = 0.01      # pass-delta/local-scale trust criterion
    settle_tol: float = 2e-4       # pass-delta stop once fully covered
    stall_limit: int = 8           # passes without radius growth before giving up
    ext_relax: float = 0.7         # correction damping beyond the fitted radius
    spec_frac: float = 0.5         # fraction of pass-1 trust served by spectral g
    expansion_order: int = 4
    fit_degree: int = 10
    angular_cap: int = 4
    psi_cap: float = np.inf
    ball_scale: float = 1e-3
    refresh_cap: float = 5.0       # times 1/|Re lam_1|
    cond_limit: float = 1e10
    fast_sv_min: float = 1e-6
    angle_warn: float = 0.5        # radians
    abort_frac: float = 1.0
    integ: IntegratorConfig = field(
        default_factory=lambda: IntegratorConfig(rtol=1e-10, atol=1e-13))

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class ManifoldTrajectory:
    """One traced ray: backward-time grid, states, slow coordinates, gradients.

    ``psi`` and ``grad`` hold one column per slow representative (one member
    of each conjugate pair).  ``psi[i, k] = psi_k(0) exp(-lam_k t[i])`` holds
    exactly by construction.  ``diag`` carries per-node solve condition
    numbers and correction magnitudes (zero away from correction nodes).
    """

    t: np.ndarray
    x: np.ndarray
    psi: np.ndarray
    grad: np.ndarray
    lam: np.ndarray
    pair_mask: np.ndarray
    method: str
    seed_psi: np.ndarray
    diag: dict

    @property
    def n_nodes(self):
        return self.t.size

    def radius(self):
        return np.abs(self.psi[:, 0])

    def state_at_radius(self, r):
        """Interpolated state where |psi_1| = r (rays grow monotonically)."""
        rr = self.radius()
        return _interp_rows(rr, self.x, r)

    def values_at_radius(self, r):
        rr = self.radius()
        x = _interp_rows(rr, self.x, r)
        g_re = _interp_rows(rr, self.grad[:, 0, :].real, r)
        g_im = _interp_rows(rr, self.grad[:, 0, :].imag, r)
        lam1 = self.lam[0]
        t_at = np.log(r / rr[0]) / abs(lam1.real)
        psi1 = self.psi[0, 0] * np.exp(-lam1 * t_at)
        return x, g_re + 1j * g_im, psi1


def _interp_rows(xgrid, Y, xq):
    out = np.empty(Y.shape[1])
    for c in range(Y.shape[1]):
        out[c] = np.interp(xq, xgrid, Y[:, c])
    return out


# ---------------------------------------------------------------------------
# realification helpers
# ---------------------------------------------------------------------------

def _slow_reps(spectrum):
    reps = spectrum.slow_representatives()
    pair = np.array([spectrum.pair_partner(k) != k for k in reps])
    lam = spectrum.values[reps]
    return np.array(reps), pair, lam


def _real_rows(I_rep, pair_mask):
    rows = []
    for Ik, is_pair in zip(I_rep, pair_mask):
        if is_pair:
            rows.append(Ik.real)
            rows.append(Ik.imag)
        else:
            rows.append(Ik.real)
    return np.array(rows)


def _real_rhs(vals, pair_mask):
    rhs = []
    for v, is_pair in zip(vals, pair_mask):
        if is_pair:
            rhs.extend((v.real, v.imag))
        else:
            rhs.append(v.real)
    return np.array(rhs)


def complement_basis(vectors, pair_mask, n):
    """Real orthonormal rows spanning the bilinear-orthogonal complement of
    the given slow (co)vectors: c @ v = 0 for every row c."""
    cols = []
    for v, is_pair in zip(vectors, pair_mask):
        cols.append(v.real)
        if is_pair:
            cols.append(v.imag)
    B = np.array(cols).T  # n x beta
    q, _ = np.linalg.qr(B, mode="complete")
    return q[:, B.shape[1]:].T


def backward_rhs(I_rep, complement, psi_rep, lam_rep, pair_mask,
                 cond_limit=1e10):
    """Backward-time velocity on the slow manifold.

    Solves the stacked system [slow gradient rows; complement rows] dx =
    [-lam psi (slow); 0] in realified form; returns (dx/dt~, condition).
    """
    A = np.vstack([_real_rows(I_rep, pair_mask), complement])
    b = np.concatenate([_real_rhs(-lam_rep * psi_rep, pair_mask),
                        np.zeros(complement.shape[0])])
    dx, cond = solve(A, b)
    if cond > cond_limit:
        raise IllConditioned("slow-manifold velocity solve is ill conditioned",
                             condition=cond)
    return dx, cond


def seed_state(spectrum, psi_rep, pair_mask=None, reps=None):
    """State x0 + sum of seed isostable displacements along eigenvectors."""
    if reps is None:
        reps, pair_mask, _ = _slow_reps(spectrum)
    x = spectrum.x0.astype(float).copy()
    for val, k, is_pair in zip(np.atleast_1d(psi_rep), reps, pair_mask):
        contrib = val * spectrum.right[:, k]
        x = x + (2 * contrib.real if is_pair else contrib.real)
    return x


# ---------------------------------------------------------------------------
# asymptotic-expansion strategy
# ---------------------------------------------------------------------------

def _full_psi(exp, reps, psi_rep):
    """Expand representative values to the expansion's index set."""
    psi = np.zeros(len(exp.indices), dtype=complex)
    lookup = {k: i for i, k in enumerate(exp.indices)}
    sp = exp.spectrum
    for val, k in zip(np.atleast_1d(psi_rep), reps):
        psi[lookup[k]] = val
        j = sp.pair_partner(k)
        if j != k and j in lookup:
            psi[lookup[j]] = np.conj(val)
    return psi


def trace_asym(model, spectrum, exp, psi_init, cfg):
    """Trace one ray with dual vectors from the series expansion.

    Integrates the packed system (state + gradient covectors) in backward
    time with the adaptive integrator; the complement basis is rebuilt from
    the g-series at the closed-form isostable values every stage.
    """
    reps, pair_mask, lam_rep = _slow_reps(spectrum)
    psi0 = np.atleast_1d(np.asarray(psi_init, dtype=complex))
    from .expansion import g_series

    n = model.dim
    n_rep = len(reps)
    t_end = _horizon(cfg, lam_rep[0], np.abs(psi0[0]))

    def psi_of(tb):
        return psi0 * np.exp(-lam_rep * tb)

    def pack(x, I):
        return np.concatenate([x, I.real.ravel(), I.imag.ravel()])

    def unpack(y):
        x = y[:n]
        I = (y[n:n + n_rep * n] + 1j * y[n + n_rep * n:]).reshape(n_rep, n)
        return x, I

    def rhs(tb, y):
        x, I = unpack(y)
        psi = psi_of(tb)
        psi_full = _full_psi(exp, reps, psi)
        g = np.array([g_series(exp, psi_full, j) for j in reps])
        C = complement_basis(g, pair_mask, n)
        dx, _ = backward_rhs(I, C, psi, lam_rep, pair_mask, cfg.cond_limit)
        J = model.jac(x)
        dI = I @ J - lam_rep[:, None] * I
        return pack(dx, dI)

    x_seed = seed_state(spectrum, psi0, pair_mask, reps)
    I_seed = spectrum.left[reps].astype(complex)
    traj = _integrate_backward(rhs, pack(x_seed, I_seed), t_end, cfg)
    ts = traj.t
    xs = np.empty((ts.size, n))
    Is = np.empty((ts.size, n_rep, n), dtype=complex)
    conds = np.empty(ts.size)
    for i in range(ts.size):
        x, I = unpack(traj.x[i])
        xs[i] = x
        Is[i] = I
        psi = psi_of(ts[i])
        psi_full = _full_psi(exp, reps, psi)
        g = np.array([g_series(exp, psi_full, j) for j in reps])
        C = complement_basis(g, pair_mask, n)
        _, conds[i] = backward_rhs(I, C, psi, lam_rep, pair_mask,
                                   cfg.cond_limit)
    psis = psi0[None, :] * np.exp(np.multiply.outer(-ts, lam_rep) * 1.0)
    return ManifoldTrajectory(
        t=ts, x=xs, psi=psis, grad=Is, lam=lam_rep, pair_mask=pair_mask,
        method=f"asym{exp.order}", seed_psi=psi0,
        diag={"cond": conds, "corr_norm": np.zeros(ts.size)})


def _horizon(cfg, lam1, r0):
    t_end = cfg.T
    if np.isfinite(cfg.psi_cap) and cfg.psi_cap > r0:
        t_end = min(t_end, np.log(cfg.psi_cap / r0) / abs(lam1.real))
    return t_end


def _integrate_backward(rhs, y0, t_end, cfg):
    from . import numerics

    return numerics.integrate(rhs, y0, (0.0, t_end), cfg.integ)


# ---------------------------------------------------------------------------
# predictor-corrector strategy
# ---------------------------------------------------------------------------

def _refresh(model, spectrum, x, reps, cfg):
    """Forward re-simulation to the linear ball: fresh Phi and covectors."""
    lam1 = spectrum.values[0]
    ball = min(entry_radius(spectrum.x0, cfg.ball_scale),
               0.3 * np.linalg.norm(x - spectrum.x0))
    cap = cfg.refresh_cap / abs(lam1.real)
    path, M = kernels.simulate_stm(model, x, cap, cfg.integ,
                                   stop_center=spectrum.x0, stop_radius=ball)
    w_end = spectrum.left[reps].astype(complex)
    I_nodes = kernels.adjoint_backward(model, path, spectrum.values[reps],
                                       w_end)
    return float(path.t[-1]), M, I_nodes[0]


def predict(model, x, I_rep, psi0, lam_rep, pair_mask, tb, dt, substeps,
            complement, cond_limit):
    """Extend the trace backward by dt with the frozen complement basis.

    Concurrently advances the gradient covectors and the segment transition
    matrix (for later composition with the accumulated one).  Returns the
    node samples over the segment and the segment STM.
    """
    n = x.size
    h = dt / substeps
    Mseg = np.eye(n)
    jac = model.jac
    cond_worst = 0.0
    cond_last = 0.0

    def derivs(tb_loc, xx, II, MM):
        nonlocal cond_last
        psi = psi0 * np.exp(-lam_rep * tb_loc)
        dx, cond_last = backward_rhs(II, complement, psi, lam_rep, pair_mask,
                                     cond_limit)
        J = jac(xx)
        dI = II @ J - lam_rep[:, None] * II
        return dx, dI, MM @ J

    for s in range(substeps):
        k1 = derivs(tb, x, I_rep, Mseg)
        cond_worst = max(cond_worst, cond_last)
        k2 = derivs(tb + h / 2, x + h / 2 * k1[0], I_rep + h / 2 * k1[1],
                    Mseg + h / 2 * k1[2])
        k3 = derivs(tb + h / 2, x + h / 2 * k2[0], I_rep + h / 2 * k2[1],
                    Mseg + h / 2 * k2[2])
        k4 = derivs(tb + h, x + h * k3[0], I_rep + h * k3[1],
                    Mseg + h * k3[2])
        x = x + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        I_rep = I_rep + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        Mseg = Mseg + h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        tb = tb + h
        cond_worst = max(cond_worst, cond_last)
    return x, I_rep, Mseg, tb, cond_worst


def _phi_split(Phi, beta):
    """Eigen split of the accumulated STM: slow block first."""
    lams, V = np.linalg.eig(Phi)
    order = np.argsort(-np.abs(lams))
    lams, V = lams[order], V[:, order]
    try:
        W = np.linalg.inv(V)
    except np.linalg.LinAlgError as exc:
        raise NonDiagonalizable("transition matrix eigenbasis is singular") \
            from exc
    return lams, V, W


def correct(model, spectrum, Phi, span, x, psi_rep, lam_rep, pair_mask,
            reps, cfg, g_rep=None):
    """Correction step: residual between the dual-vector velocity and F.

    ``g_rep`` overrides the dual vectors (refinement passes); by default
    they come from the slow spectral block of Phi (truncated inverse).
    Returns (dx, diagnostics); dx lies in the fast eigenvector span of Phi
    and leaves the slow isostable coordinates unchanged to first order.
    """
    n = x.size
    beta = spectrum.beta
    lams, V, W = _phi_split(Phi, beta)
    Vf = V[:, beta:]
    sv = np.linalg.svd(Vf, compute_uv=False)
    sigma_min = float(sv[-1]) if sv.size else 1.0
    if sigma_min < cfg.fast_sv_min:
        raise DegenerateFastBasis(
            "fast eigenvector basis of the transition matrix is degenerate",
            sigma_min=sigma_min)
    # principal angle between the slow block and span(v_1..v_beta)
    qa = np.linalg.qr(V[:, :beta])[0]
    qb = np.linalg.qr(spectrum.right[:, :beta])[0]
    svals = np.linalg.svd(qa.conj().T @ qb, compute_uv=False)
    angle = float(np.arccos(np.clip(svals.min(), -1.0, 1.0)))
    if angle > cfg.angle_warn:
        warnings.warn(f"slow subspace of Phi drifted {angle:.2f} rad from "
                      "the eigenvector span; correction quality degrades")
    if g_rep is None:
        g_rep = []
        for j, k in enumerate(reps):
            gj = np.zeros(n, dtype=complex)
            for m in range(beta):
                gj += (np.exp(spectrum.values[k] * span) / lams[m]) * V[:, m] \
                    * (W[m] @ spectrum.right[:, k])
            g_rep.append(gj)
        g_rep = np.array(g_rep)
    vel = np.zeros(n)
    for gj, val, lam, is_pair in zip(g_rep, psi_rep, lam_rep, pair_mask):
        term = lam * val * gj
        vel = vel + (2 * term.real if is_pair else term.real)
    resid = vel - model.rhs(x)
    z = np.linalg.pinv(model.jac(x)) @ resid
    dx = (Vf @ (np.linalg.pinv(Vf) @ z)).real
    w_slow = spectrum.left[:beta]
    denom = max(np.linalg.norm(dx), 1e-300)
    slow_leak = float(np.max(np.abs(w_slow @ dx)) / denom)
    return dx, {"sigma_min_fast": sigma_min, "angle": angle,
                "slow_leak": slow_leak, "corr_norm": float(np.linalg.norm(dx))}


class RayFit:
    """Series fit x(psi_1) of a traced ray, for refinement passes.

    The basis is the manifold expansion's own structure: real and imaginary
    parts of ``psi^a conj(psi)^b`` with total order ``a + b <= degree`` and
    angular order ``a - b <= angular_cap`` (high angular orders carry no
    manifold content and would chase node noise).  For a real slow mode the
    basis reduces to powers of the real coordinate.  The dual vector is the
    Wirtinger derivative of the fit; evaluation beyond the node support is
    clamped radially (polynomial extrapolation amplifies noise).
    """

    def __init__(self, psi1, X, degree, is_pair, weights=None,
                 angular_cap=4, ridge=1e-4):
        self.is_pair = is_pair
        self.scale = float(np.abs(psi1).max())
        z = psi1 / self.scale
        self.terms = []
        cols = []
        for a in range(degree + 1):
            for b in range(min(a, degree - a) + 1):
                if a + b > degree:
                    continue
                if is_pair and a - b > angular_cap:
                    continue
                if not is_pair and b > 0:
                    continue
                mono = z ** a * np.conj(z) ** b
                self.terms.append((a, b, "re"))
                cols.append(mono.real)
                if is_pair and a > b:
                    self.terms.append((a, b, "im"))
                    cols.append(mono.imag)
        B = np.stack(cols, axis=1)
        if weights is not None:
            B = B * weights[:, None]
            X = X * weights[:, None]
        # ridge keeps rim derivatives bounded: ill-conditioned weighted
        # Vandermonde systems otherwise develop huge cancelling coefficients
        lam = ridge * np.linalg.norm(B) / np.sqrt(B.shape[1])
        B_aug = np.vstack([B, lam * np.eye(B.shape[1])])
        X_aug = np.vstack([X, np.zeros((B.shape[1], X.shape[1]))])
        self.coef, *_ = np.linalg.lstsq(B_aug, X_aug, rcond=None)

    def g1(self, psi1):
        if abs(psi1) > self.scale:
            psi1 = psi1 * (self.scale / abs(psi1))
        z = psi1 / self.scale
        g = np.zeros(self.coef.shape[1], dtype=complex)
        if not self.is_pair:
            for (a, _b, _part), c in zip(self.terms, self.coef):
                if a > 0:
                    g = g + a * z ** (a - 1) * c
            return g / self.scale
        for (a, b, part), c in zip(self.terms, self.coef):
            d = a * z ** (a - 1) * np.conj(z) ** b if a > 0 else 0.0
            e = b * np.conj(z) ** a * z ** (b - 1) if b > 0 else 0.0
            if part == "re":
                g = g + 0.5 * (d + e) * c
            else:
                g = g + (0.5 / 1j) * (d - e) * c
        return g / self.scale


def trace_pc(model, spectrum, psi_init, cfg):
    """Predictor-corrector ray trace with radial-continuation refinement.

    Pass 1 computes the dual vectors from the spectral split of the
    accumulated state-transition matrix (the correction's native estimate);
    after every correction the trajectory is re-simulated forward to the
    linear ball to refresh the transition matrix and the gradient covectors.
    The spectral estimate degrades with distance from the fixed point, so
    pass 1 stops where its corrections start exceeding the noise criterion.
    Subsequent passes fit the previous pass's curve with a polynomial in the
    slow isostable coordinate and re-trace with the fitted dual vectors,
    extending the trusted radius by ``cfg.growth`` per pass until the full
    horizon is covered, then settle until pass-to-pass changes stop
    improving (or the ``cfg.passes`` cap is hit).
    """
    reps, pair_mask, lam_rep = _slow_reps(spectrum)
    psi0 = np.atleast_1d(np.asarray(psi_init, dtype=complex))
    n = model.dim
    C_frozen = complement_basis(
        [spectrum.right[:, k] for k in reps], pair_mask, n)
    r0 = float(np.abs(psi0[0]))
    t_end = _horizon(cfg, lam_rep[0], r0)
    r_final = r0 * np.exp(abs(lam_rep[0].real) * t_end)
    single = cfg.passes <= 1 or len(reps) > 1

    ray = _trace_pc_once(model, spectrum, psi0, reps, pair_mask, lam_rep,
                         C_frozen, cfg, None, t_end,
                         noise_stop=None if single else cfg.noise_ratio)
    if single:
        ray.diag["pass_deltas"] = np.array([])
        return ray

    lam_abs = abs(lam_rep[0].real)
    r_sup = max(_trusted_radius(ray, spectrum, cfg), 2.0 * r0)
    # the spectral dual-vector estimate stays in charge of the region where
    # pass 1 found it inside the noise band (with margin)
    r_spec = max(cfg.spec_frac * r_sup, 4.0 * r0)
    pass_deltas = []
    n_pass = 1
    stall = 0
    growth = cfg.growth
    while n_pass < cfg.passes:
        n_pass += 1
        fit = _ray_fit(ray, spectrum, r_sup, cfg, pair_mask, r_spec)

        def g_fit(psi_rep, _fit=fit):
            return _fit.g1(psi_rep[0])[None, :]

        r_use = min(r_final, growth * r_sup)
        t_use = min(t_end, np.log(r_use / r0) / lam_abs) if r_use > r0 else t_end
        new = _trace_pc_once(model, spectrum, psi0, reps, pair_mask, lam_rep,
                             C_frozen, cfg, g_fit, t_use,
                             noise_stop=cfg.noise_ratio, ext_from=r_sup,
                             r_spec=r_spec)
        if new.t.size < 3 or new.t[-1] < 0.7 * ray.t[-1]:
            # extension collapsed; keep the previous curve, back off
            growth = max(1.05, growth / 1.5)
            stall += 1
            if stall >= cfg.stall_limit:
                warnings.warn(
                    f"refinement collapsed at |psi_1| = {r_sup:.3g}; "
                    "returning the last good pass")
                break
            continue
        r_trust, delta = _delta_trust(new, ray, spectrum, cfg)
        pass_deltas.append(delta)
        ray = new
        r_prev = r_sup
        r_sup = min(r_use, max(r_sup, r_trust))
        covered = (r_use >= r_final * (1 - 1e-9)
                   and ray.t[-1] >= t_use * (1 - 1e-9))
        scale = np.max(np.linalg.norm(ray.x - spectrum.x0, axis=1))
        if covered and delta <= cfg.settle_tol * scale:
            break
        # adapt the extension rate to how well the last extension digested
        if r_sup >= r_use * 0.999:
            growth = min(growth * 1.25, 2.0)
        else:
            growth = max(1.06, growth / 1.4)
        stall = stall + 1 if r_sup <= r_prev * 1.0001 else 0
        if stall >= cfg.stall_limit:
            warnings.warn(
                f"refinement stalled at |psi_1| = {r_sup:.3g} "
                f"(target {r_final:.3g}); returning best effort")
            break
    ray.diag["pass_deltas"] = np.array(pass_deltas)
    ray.method = f"pc(passes={n_pass})"
    return ray


def _trusted_radius(ray, spectrum, cfg):
    """Largest |psi_1| below which corrections stay inside the noise band."""
    scale = np.max(np.linalg.norm(ray.x - spectrum.x0, axis=1))
    floor = 2e-3 * scale
    rr = ray.radius()
    r_ok = rr[0]
    bad = 0
    for i in range(1, ray.t.size):
        loc = max(np.linalg.norm(ray.x[i] - spectrum.x0), 1e-12)
        if ray.diag["corr_norm"][i] <= max(cfg.noise_ratio * loc, floor):
            r_ok = rr[i]
            bad = 0
        else:
            bad += 1
            if bad >= 2:
                break
    return float(r_ok)


def _delta_trust(new, old, spectrum, cfg):
    """Radius of pass-to-pass agreement, plus the worst node change."""
    m = min(new.t.size, old.t.size)
    d = np.linalg.norm(new.x[:m] - old.x[:m], axis=1)
    loc = np.linalg.norm(new.x[:m] - spectrum.x0, axis=1)
    band = np.maximum(cfg.delta_ratio * loc, 1e-3 * loc.max())
    rr = new.radius()[:m]
    r_ok = rr[0]
    bad = 0
    for i in range(m):
        if d[i] <= band[i]:
            r_ok = rr[i]
            bad = 0
        else:
            bad += 1
            if bad >= 2:
                break
    return float(r_ok), float(d.max())


def _ray_fit(ray, spectrum, r_sup, cfg, pair_mask, r_spec=0.0):
    rr = ray.radius()
    sel = rr <= r_sup * 1.0001
    if pair_mask[0]:
        # bounded dynamic range: the spectral estimate covers r <= r_spec,
        # so the fit only needs the outer annulus (keeps the basis sane)
        sel &= rr >= r_spec / 1.5
    scale_loc = np.linalg.norm(ray.x[sel] - spectrum.x0, axis=1)
    w = 1.0 / (scale_loc + 0.03 * scale_loc.max() + 1e-300)
    return RayFit(ray.psi[sel, 0], ray.x[sel], cfg.fit_degree,
                  bool(pair_mask[0]), weights=w,
                  angular_cap=cfg.angular_cap)


def _trace_pc_once(model, spectrum, psi0, reps, pair_mask, lam_rep, C_frozen,
                   cfg, g_fit, t_end, noise_stop=None, ext_from=None,
                   r_spec=0.0):
    x = seed_state(spectrum, psi0, pair_mask, reps)
    span, Phi_acc, I_rep = _refresh(model, spectrum, x, reps, cfg)
    tb = 0.0
    n_steps = int(np.ceil(t_end / cfg.dt - 1e-9))
    ts = [0.0]
    xs = [x.copy()]
    Is = [I_rep.copy()]
    conds = [0.0]
    corr = [0.0]
    extras = {"sigma_min_fast": [], "angle": [], "slow_leak": []}
    scale_ref = max(np.linalg.norm(x - spectrum.x0), 1e-12)
    noisy_run = 0
    for step in range(n_steps):
        dt = min(cfg.dt, t_end - tb)
        x, I_rep, Mseg, tb, cond_worst = predict(
            model, x, I_rep, psi0, lam_rep, pair_mask, tb, dt, cfg.substeps,
            C_frozen, cfg.cond_limit)
        Phi = Phi_acc @ Mseg
        psi_rep = psi0 * np.exp(-lam_rep * tb)
        # close to the fixed point the spectral estimate is exact; the
        # fitted dual vectors take over beyond the spectral-trust radius
        use_fit = g_fit is not None and abs(psi_rep[0]) > r_spec
        g_rep = g_fit(psi_rep) if use_fit else None
        dx, cdiag = correct(model, spectrum, Phi, span + dt, x, psi_rep,
                            lam_rep, pair_mask, reps, cfg, g_rep)
        if ext_from is not None and abs(psi_rep[0]) > ext_from:
            dx = cfg.ext_relax * dx
            cdiag["corr_norm"] *= cfg.ext_relax
        scale_ref = max(scale_ref, np.linalg.norm(x - spectrum.x0))
        if cdiag["corr_norm"] > cfg.abort_frac * scale_ref:
            if noise_stop is not None:
                break  # truncate: refinement handles the uncovered tail
            raise AbortOnDivergence(
                "correction exceeded the divergence threshold",
                t_back=tb, corr_norm=cdiag["corr_norm"], scale=scale_ref)
        x = x + dx
        try:
            span, Phi_acc, I_rep = _refresh(model, spectrum, x, reps, cfg)
        except (BlowUp, StepLimitExceeded):
            break  # left the basin: keep the trace up to the previous node
        ts.append(tb)
        xs.append(x.copy())
        Is.append(I_rep.copy())
        conds.append(cond_worst)
        corr.append(cdiag["corr_norm"])
        for k in extras:
            extras[k].append(cdiag[k])
        if noise_stop is not None and abs(psi_rep[0]) > 3 * abs(psi0[0]):
            loc = max(np.linalg.norm(x - spectrum.x0), 1e-12)
            if cdiag["corr_norm"] > max(3 * noise_stop * loc,
                                        6e-3 * scale_ref):
                noisy_run += 1
                if noisy_run >= 2:
                    break
            else:
                noisy_run = 0
    ts = np.array(ts)
    psis = psi0[None, :] * np.exp(np.multiply.outer(-ts, lam_rep))
    return ManifoldTrajectory(
        t=ts, x=np.array(xs), psi=psis, grad=np.array(Is), lam=lam_rep,
        pair_mask=pair_mask, method="pc", seed_psi=psi0,
        diag={"cond": np.array(conds), "corr_norm": np.array(corr),
              **{k: np.array(v) for k, v in extras.items()}})


def trace_naive(model, spectrum, psi_init, cfg):
    """Plain backward integration from the same seed (the failing baseline)."""
    reps, pair_mask, lam_rep = _slow_reps(spectrum)
    psi0 = np.atleast_1d(np.asarray(psi_init, dtype=complex))
    x_seed = seed_state(spectrum, psi0, pair_mask, reps)
    t_end = _horizon(cfg, lam_rep[0], np.abs(psi0[0]))
    path = kernels.simulate(model, x_seed, t_end, cfg.integ, direction=-1.0,
                            raise_on=("steplimit",))
    psis = psi0[None, :] * np.exp(np.multiply.outer(-path.t, lam_rep))
    grad = np.zeros((path.t.size, len(reps), model.dim), dtype=complex)
    ray = ManifoldTrajectory(
        t=path.t, x=path.x, psi=psis, grad=grad, lam=lam_rep,
        pair_mask=pair_mask, method="naive", seed_psi=psi0,
        diag={"cond": np.zeros(path.t.size),
              "corr_norm": np.zeros(path.t.size)})
    ray.diag["status"] = path.status
    return ray


# ---------------------------------------------------------------------------
# manifold families
# ---------------------------------------------------------------------------

@dataclass
class SlowManifold:
    """Family of rays indexed by the seed phase of psi_1 (or sign for beta=1)."""

    spectrum: object
    method: str
    seed_radius: float
    phases: np.ndarray
    rays: list
    failures: dict
    cfg: TraceConfig

    @property
    def beta(self):
        return self.spectrum.beta

    def common_radius(self, coverage=0.9):
        """Largest |psi_1| reached by at least the given fraction of rays."""
        maxima = sorted(r.radius()[-1] for r in self.rays)
        k = int(np.ceil((1 - coverage) * len(maxima)))
        return maxima[min(k, len(maxima) - 1)]

    def level_set(self, r):
        """One point per ray at |psi_1| = r (rays not reaching r are skipped)."""
        pts = [ray.state_at_radius(r) for ray in self.rays
               if ray.radius()[-1] >= r]
        return np.array(pts)


def _trace_one(model, spectrum, method, psi_seed, cfg, exp=None):
    if method == "pc":
        return trace_pc(model, spectrum, psi_seed, cfg)
    if method == "asym":
        return trace_asym(model, spectrum, exp, psi_seed, cfg)
    if method == "naive":
        return trace_naive(model, spectrum, psi_seed, cfg)
    raise ValueError(f"unknown trace method {method!r}")


_WORKER = {}


def _worker_init(model_name, model_params, beta, method, cfg, order):
    from .models import builtin
    from .spectrum import find_fixed_point, linearize, select_beta

    model = builtin(model_name, **model_params)
    guess = model_params.get("_guess", np.zeros(model.dim))
    x0 = find_fixed_point(model, guess)
    sp = select_beta(linearize(model, x0), beta)
    exp = None
    if method == "asym":
        from .expansion import expand_model

        exp = expand_model(model, sp, order)
    _WORKER.update(model=model, spectrum=sp, method=method, cfg=cfg, exp=exp)


def _worker_ray(args):
    idx, seed = args
    try:
        ray = _trace_one(_WORKER["model"], _WORKER["spectrum"],
                         _WORKER["method"], seed, _WORKER["cfg"],
                         _WORKER["exp"])
        return idx, ray, None
    except Exception as exc:  # per-ray failures are reported, not fatal
        return idx, None, repr(exc)


def build_manifold(model, spectrum, method, cfg, rays=200, seed_radius=0.01,
                   exp=None, workers=1, model_spec=None, guess=None,
                   min_success=0.9):
    """Trace a family of rays covering the slow manifold.

    For a conjugate slow pair the seeds are ``psi_1 = r exp(i 2 pi k/K)``;
    for a single real slow mode the two signed seeds.  Rays run in parallel
    worker processes when ``workers > 1`` and ``model_spec=(name, params)``
    identifies a builtin model (workers rebuild it locally).
    """
    reps, pair_mask, lam_rep = _slow_reps(spectrum)
    if len(reps) != 1:
        raise InsufficientCoverage(
            "family construction is implemented for one slow representative "
            "(beta in {1, 2})", beta=spectrum.beta)
    if pair_mask[0]:
        phases = 2 * np.pi * np.arange(rays) / rays
        seeds = [np.array([seed_radius * np.exp(1j * th)]) for th in phases]
    else:
        phases = np.array([0.0, np.pi])
        seeds = [np.array([seed_radius + 0j]), np.array([-seed_radius + 0j])]
    if method == "asym" and exp is None:
        from .expansion import expand_model

        exp = expand_model(model, spectrum, cfg.expansion_order)

    results = [None] * len(seeds)
    failures = {}
    if workers > 1 and model_spec is not None:
        name, params = model_spec
        params = dict(params)
        if guess is not None:
            params["_guess"] = np.asarray(guess, dtype=float)
        with ProcessPoolExecutor(
                max_workers=workers, initializer=_worker_init,
                initargs=(name, params, spectrum.beta, method, cfg,
                          cfg.expansion_order)) as ex:
            for idx, ray, err in ex.map(_worker_ray, enumerate(seeds)):
                if err is None:
                    results[idx] = ray
                else:
                    failures[idx] = err
    else:
        for idx, seed in enumerate(seeds):
            try:
                results[idx] = _trace_one(model, spectrum, method, seed, cfg,
                                          exp)
            except Exception as exc:
                failures[idx] = repr(exc)
    ok = [r for r in results if r is not None]
    if len(ok) < min_success * len(seeds):
        raise InsufficientCoverage(
            "too many rays failed", failed=len(failures), total=len(seeds),
            errors=list(failures.values())[:5])
    kept_phases = np.array([ph for ph, r in zip(phases, results)
                            if r is not None])
    return SlowManifold(spectrum=spectrum, method=method,
                        seed_radius=seed_radius, phases=kept_phases, rays=ok,
                        failures=failures, cfg=cfg)


# ---------------------------------------------------------------------------
# invariance checks and export
# ---------------------------------------------------------------------------

def tube_deviation(model, ray, spectrum, cfg=None, skip_fast_constants=1.0,
                   dense_factor=4):
    """Forward re-integration test that a traced ray lies on the manifold.

    Integrates the model forward from the ray's far endpoint for the ray's
    full backward duration and measures the nearest-node distance to a
    densified copy of the ray, relative to the ray's amplitude.  Distances
    are reported only after ``skip_fast_constants`` multiples of the fast
    time constant (the initial off-manifold transient).
    """
    from scipy.interpolate import CubicSpline
    from scipy.spatial import cKDTree

    cfg = cfg or IntegratorConfig(rtol=1e-10, atol=1e-13)
    t_fast = skip_fast_constants / abs(spectrum.values[spectrum.beta].real)
    fwd = kernels.simulate(model, ray.x[-1], float(ray.t[-1]), cfg)
    # resample by arc length so nearest-node distance approximates the
    # distance to the curve well below the tolerance scale
    spline = CubicSpline(ray.t, ray.x, axis=0)
    chord = np.linalg.norm(np.diff(ray.x, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(chord)])
    scale0 = np.max(np.linalg.norm(ray.x - spectrum.x0, axis=1))
    n_dense = int(min(2e6, max(dense_factor * ray.t.size,
                               np.ceil(arc[-1] / (2e-4 * scale0)))))
    dense_t = np.interp(np.linspace(0, arc[-1], n_dense), arc, ray.t)
    dense_x = spline(dense_t)
    tree = cKDTree(dense_x)
    scale = np.max(np.linalg.norm(ray.x - spectrum.x0, axis=1))
    mask = fwd.t >= t_fast
    d, _ = tree.query(fwd.x[mask])
    return {
        "max_rel_distance": float(d.max() / scale),
        "scale": float(scale),
        "skipped_time": float(t_fast),
        "fwd_status": fwd.status,
    }


def ray_to_csv(ray, fh=None):
    """Serialize a ray to CSV (17 significant digits, round-trip stable)."""
    own = fh is None
    if own:
        fh = io.StringIO()
    n = ray.x.shape[1]
    cols = (["t_back"] + [f"x_{i + 1}" for i in range(n)]
            + ["psi1_re", "psi1_im"]
            + [f"I1_re_{i + 1}" for i in range(n)]
            + [f"I1_im_{i + 1}" for i in range(n)]
            + ["cond", "corr_norm"])
    fh.write(",".join(cols) + "\n")
    for i in range(ray.n_nodes):
        row = ([ray.t[i]] + list(ray.x[i])
               + [ray.psi[i, 0].real, ray.psi[i, 0].imag]
               + list(ray.grad[i, 0].real) + list(ray.grad[i, 0].imag)
               + [ray.diag["cond"][i], ray.diag["corr_norm"][i]])
        fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    if own:
        return fh.getvalue()
    return None
