"""Taylor expansion of the state in isostable coordinates.

The state on (a neighborhood of) the slow manifold is written as

    x(psi) = x0 + sum_k psi_k v_k + sum_{tuples} psi^T h^T,

with one coefficient vector per sorted multi-index of isostable indices.
Matching powers of psi in the flow-invariance identity turns each
coefficient into the solution of a shifted linear system
``(J - sum(lam) I) h = -q`` whose inhomogeneity q collects strictly
lower-order terms through the rhs derivative tensors.  Tracing the slow
manifold only needs tuples over the slow indices, which keeps the solve
cheap even at high order.
"""

import json
import warnings
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import factorial

import numpy as np
from sympy.utilities.iterables import multiset_partitions

from .errors import OrderTooHigh, OutOfValidityRadius, Resonance

__all__ = ["ExpansionTensors", "solve_expansion", "expand_model",
           "reconstruct_state", "g_series"]

_MEMORY_CAP_ENTRIES = 3e8


@dataclass
class ExpansionTensors:
    """Solved series coefficients keyed by sorted index tuples (0-based).

    Order-1 entries ``(k,)`` are the right eigenvectors.  Conjugate-symmetric
    by construction: the coefficient of a conjugated tuple is the conjugate
    coefficient, so reconstructed states are real for conjugate-pair inputs.
    """

    spectrum: object
    order: int
    indices: tuple
    coeff: dict
    validity_radius: float = np.inf
    residuals: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.spectrum.x0.size

    def tuples_of_order(self, m):
        return [t for t in self.coeff if len(t) == m]

    def to_json(self):
        return json.dumps({
            "order": self.order,
            "indices": list(self.indices),
            "validity_radius": (None if np.isinf(self.validity_radius)
                                 else self.validity_radius),
            "tuples": [
                {"idx": list(t), "re": c.real.tolist(), "im": c.imag.tolist()}
                for t, c in sorted(self.coeff.items())
            ],
        }, indent=1)

    @staticmethod
    def tuples_from_json(text):
        doc = json.loads(text)
        return {tuple(e["idx"]): np.array(e["re"]) + 1j * np.array(e["im"])
                for e in doc["tuples"]}


def _conj_tuple(t, partner):
    return tuple(sorted(partner[i] for i in t))


def _assemble_q(target, coeff, deriv, n):
    """Inhomogeneity for one tuple from all lower-order coefficients."""
    m = len(target)
    q = np.zeros(n, dtype=complex)
    for parts in multiset_partitions(list(target)):
        i = len(parts)
        if i < 2 or i not in deriv:
            continue
        part_tuples = [tuple(sorted(p)) for p in parts]
        # number of ordered arrangements / i! = 1 / prod(count(identical)!)
        counts = {}
        for pt in part_tuples:
            counts[pt] = counts.get(pt, 0) + 1
        weight = 1.0
        for c in counts.values():
            weight /= factorial(c)
        T = deriv[i].astype(complex, copy=False)
        for pt in part_tuples:
            T = np.tensordot(T, coeff[pt], axes=([1], [0]))
        q += weight * T
    return q


def solve_expansion(spectrum, deriv, order, jac0=None, indices=None,
                    resonance_cond=1e12, residual_tol=1e-10):
    """Solve the expansion coefficients up to ``order``.

    Parameters
    ----------
    spectrum : Spectrum with beta set.
    deriv : {k: ndarray} rhs derivative arrays at the fixed point (k >= 2).
    order : highest total order M.
    jac0 : Jacobian at the fixed point; reconstructed from the eigen data
        when omitted.
    indices : eigen index set the tuples run over; defaults to the slow
        indices 0..beta-1 (all that manifold tracing needs).
    """
    n = spectrum.x0.size
    if indices is None:
        indices = tuple(range(spectrum.beta))
    indices = tuple(indices)
    if float(n) ** (order + 1) > _MEMORY_CAP_ENTRIES and len(indices) == n:
        raise OrderTooHigh("derivative tensors would exceed the memory cap",
                           n=n, order=order)
    if jac0 is None:
        jac0 = (spectrum.right * spectrum.values) @ spectrum.left
    jac0 = np.asarray(jac0)
    vals = spectrum.values
    partner = {k: spectrum.pair_partner(k) for k in indices}
    if any(partner[k] not in indices for k in indices):
        raise Resonance("index set splits a conjugate pair", indices=indices)

    coeff = {(k,): spectrum.right[:, k].astype(complex) for k in indices}
    residuals = {}
    eye = np.eye(n)
    for m in range(2, order + 1):
        for target in combinations_with_replacement(indices, m):
            mirror = _conj_tuple(target, partner)
            if mirror < target and mirror in coeff:
                coeff[target] = np.conj(coeff[mirror])
                residuals[target] = residuals.get(mirror, 0.0)
                continue
            q = _assemble_q(target, coeff, deriv, n)
            shift = sum(vals[i] for i in target)
            A = jac0 - shift * eye
            sv = np.linalg.svd(A, compute_uv=False)
            if sv[-1] <= 0 or sv[0] / sv[-1] > resonance_cond:
                raise Resonance(
                    "near-resonant eigenvalue combination",
                    tuple=list(target), shift=[shift.real, shift.imag],
                    condition=float(sv[0] / max(sv[-1], 1e-300)))
            h = np.linalg.solve(A, -q)
            res = np.linalg.norm(A @ h + q) / max(np.linalg.norm(q), 1e-300)
            if np.linalg.norm(q) > 0 and res > residual_tol:
                raise Resonance("expansion solve residual too large",
                                tuple=list(target), residual=float(res))
            coeff[target] = h
            residuals[target] = float(res)
    return ExpansionTensors(spectrum=spectrum, order=order, indices=indices,
                            coeff=coeff, residuals=residuals)


def expand_model(model, spectrum, order, indices=None):
    """Convenience: derivative tensors + expansion solve for a model."""
    from .models import derivative_tensors

    if float(model.dim) ** (order + 1) > _MEMORY_CAP_ENTRIES:
        raise OrderTooHigh("derivative tensors would exceed the memory cap",
                           n=model.dim, order=order)
    deriv = derivative_tensors(model, spectrum.x0, order)
    return solve_expansion(spectrum, deriv, order,
                           jac0=model.jac(spectrum.x0), indices=indices)


def _psi_power(psi_by_index, t):
    out = 1.0 + 0.0j
    for i in t:
        out *= psi_by_index[i]
    return out


def reconstruct_state(exp, psi, order=None, enforce_real=True):
    """Evaluate the series x(psi) = x0 + sum psi^T h^T.

    ``psi`` holds the values for ``exp.indices`` (fast coordinates are zero
    on the slow manifold by definition).  With conjugate-pair inputs the
    result is real; set ``enforce_real=False`` to get the raw complex sum.
    """
    order = exp.order if order is None else min(order, exp.order)
    psi = np.asarray(psi, dtype=complex)
    if np.max(np.abs(psi), initial=0.0) > exp.validity_radius:
        warnings.warn("isostable amplitude outside the configured validity "
                      "radius", OutOfValidityRadius)
    psi_by_index = dict(zip(exp.indices, psi))
    x = exp.spectrum.x0.astype(complex).copy()
    for t, h in exp.coeff.items():
        if len(t) <= order:
            x = x + _psi_power(psi_by_index, t) * h
    return x.real if enforce_real else x


def g_series(exp, psi, j, order=None):
    """Dual vector g_j(psi) = d x(psi) / d psi_j from the solved series.

    The leading term is v_j; each tuple containing j contributes its
    multiplicity times ``psi^(T minus one j) h^T``.
    """
    order = exp.order if order is None else min(order, exp.order)
    psi = np.asarray(psi, dtype=complex)
    psi_by_index = dict(zip(exp.indices, psi))
    g = np.zeros(exp.n, dtype=complex)
    for t, h in exp.coeff.items():
        if len(t) > order:
            continue
        mult = t.count(j)
        if mult == 0:
            continue
        rest = list(t)
        rest.remove(j)
        g = g + mult * _psi_power(psi_by_index, tuple(rest)) * h
    return g
