"""Fixed points, linearization spectra, and slow-mode selection.

A Spectrum bundles the validated fixed point with the sorted biorthonormal
eigen data of its Jacobian and the number of retained slow modes.  All
downstream machinery (gradients, expansions, manifold tracing) keys off the
ordering and phase conventions fixed here via numerics.eig.
"""

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import numerics
from .errors import (
    NoConvergence,
    NonDiagonalizable,
    OutOfRange,
    PairSplit,
    UnstableFixedPoint,
)

__all__ = ["Spectrum", "find_fixed_point", "linearize", "select_beta"]


@dataclass(frozen=True)
class Spectrum:
    """Fixed point with sorted eigenvalues and biorthonormal vector pairs.

    ``right[:, k]`` is the right eigenvector for ``values[k]``; ``left[k]``
    is the dual covector (``left @ right = I``).  ``beta`` is the retained
    slow-mode count; ``gap_ratio = |Re values[beta]| / |Re values[beta-1]|``.
    """

    x0: np.ndarray
    values: np.ndarray
    right: np.ndarray
    left: np.ndarray
    beta: Optional[int] = None
    gap_ratio: Optional[float] = None

    @property
    def n(self):
        return self.values.size

    def slow(self):
        return self.values[: self.beta]

    def pair_partner(self, k):
        """Index of the conjugate partner of mode k (k itself if real)."""
        lam = self.values[k]
        if abs(lam.imag) < 1e-12 * (1 + abs(lam)):
            return k
        other = np.conj(lam)
        for j in range(self.n):
            if j != k and abs(self.values[j] - other) < 1e-10 * (1 + abs(lam)):
                return j
        return k

    def slow_representatives(self):
        """Slow mode indices keeping one member per conjugate pair."""
        reps = []
        seen = set()
        for k in range(self.beta):
            if k in seen:
                continue
            j = self.pair_partner(k)
            reps.append(k)
            seen.update((k, j))
        return reps

    def describe(self):
        return {
            "x0": self.x0.tolist(),
            "eigenvalues": [[float(v.real), float(v.imag)] for v in self.values],
            "beta": self.beta,
            "gap_ratio": self.gap_ratio,
        }


def find_fixed_point(model, guess, newton_tol=None, max_iter=30,
                     require_stable=True):
    """Damped Newton iteration for F(x0) = 0.

    Uses step-halving line search on ||F|| (at most 20 halvings per step).
    The returned point satisfies ``||F(x0)||_inf <= newton_tol`` with
    ``newton_tol`` defaulting to ``1e-12 * (1 + ||x0||)``; the Jacobian must
    be Hurwitz there unless ``require_stable`` is False.
    """
    x = np.asarray(guess, dtype=float).copy()
    tol = newton_tol
    for _ in range(max_iter):
        f = model.rhs(x)
        t = tol if tol is not None else 1e-12 * (1 + np.linalg.norm(x))
        if np.max(np.abs(f)) <= t:
            break
        try:
            step, _ = numerics.solve(model.jac(x), -f)
        except Exception as exc:
            raise NoConvergence("Newton step failed (singular Jacobian)",
                                x=x) from exc
        base = np.linalg.norm(f)
        alpha = 1.0
        for _ in range(20):
            x_new = x + alpha * step
            if np.linalg.norm(model.rhs(x_new)) < base:
                break
            alpha *= 0.5
        x = x + alpha * step
    else:
        raise NoConvergence("Newton did not converge", iterations=max_iter,
                            residual=float(np.max(np.abs(model.rhs(x)))))
    if require_stable:
        ev = np.linalg.eigvals(model.jac(x))
        if np.any(ev.real >= 0):
            raise UnstableFixedPoint(
                "fixed point is not attracting",
                eigenvalues=[[float(v.real), float(v.imag)] for v in ev])
    return x


def linearize(model, x0):
    """Spectrum of the Jacobian at a validated fixed point (beta unset)."""
    es = numerics.eig(model.jac(np.asarray(x0, dtype=float)))
    if np.any(es.values.real >= 0):
        raise UnstableFixedPoint(
            "linearization has non-decaying modes",
            eigenvalues=[[float(v.real), float(v.imag)] for v in es.values])
    return Spectrum(x0=np.asarray(x0, dtype=float), values=es.values,
                    right=es.right, left=es.left)


def _splits_pair(values, beta):
    lam = values[beta - 1]
    if abs(lam.imag) < 1e-12 * (1 + abs(lam)):
        return False
    return abs(values[beta] - np.conj(lam)) < 1e-10 * (1 + abs(lam))


def select_beta(spectrum, requested=None, warn_gap=2.0):
    """Pick the slow-mode count.

    With ``requested=None`` the admissible beta maximizing the decay-rate
    ratio ``|Re lambda_{beta+1}| / |Re lambda_beta|`` wins; conjugate pairs
    are never split.  Returns a new Spectrum with ``beta`` and ``gap_ratio``
    set.
    """
    vals = spectrum.values
    n = vals.size

    def gap(b):
        denom = abs(vals[b - 1].real)
        return abs(vals[b].real) / max(denom, 1e-300)

    if requested is not None:
        b = int(requested)
        if not 1 <= b < n:
            raise OutOfRange(f"beta must be in [1, {n - 1}]", requested=b)
        if _splits_pair(vals, b):
            raise PairSplit("requested beta splits a conjugate pair",
                            requested=b)
    else:
        candidates = [b for b in range(1, n) if not _splits_pair(vals, b)]
        if not candidates:
            raise NonDiagonalizable("no admissible slow-mode count")
        b = max(candidates, key=gap)
    g = gap(b)
    if g < warn_gap:
        import warnings

        warnings.warn(
            f"weak spectral gap |Re l{b + 1}|/|Re l{b}| = {g:.2f}; "
            "slow-manifold reduction may be inaccurate")
    return replace(spectrum, beta=b, gap_ratio=float(g))
