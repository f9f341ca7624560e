"""Dynamical-system abstraction, benchmark models, and derivative tensors.

Builtin models carry a kernel id so the compiled integration lane can run
them without Python callbacks; the pure lane uses the numpy ``rhs``/``jac``
closures.  Higher-order derivative tensors (needed by the state expansion
in isostable coordinates) come from exact per-model providers, with a
nested finite-difference fallback on the Jacobian for models without one.
"""

import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Optional

import numpy as np

from .errors import FDUnreliable, OrderUnavailable, UnknownModel, UnknownParameter

__all__ = [
    "DynamicalModel",
    "InputSignal",
    "ForcedModel",
    "builtin",
    "available_models",
    "derivative_tensors",
    "jacobian_fd",
]

# kernel kind codes shared with isoslow.kernels (both lanes)
KERNEL_AFFINE = 0
KERNEL_PLANAR = 1
KERNEL_GOODWIN = 2
KERNEL_PENDULUM = 3
KERNEL_COUPLED = 4

INPUT_ZERO = 0
INPUT_CONST = 1
INPUT_SINE = 2
INPUT_CHIRP = 3


@dataclass(frozen=True)
class DynamicalModel:
    """Autonomous vector field with Jacobian and optional exact tensors.

    ``tensors(x0, kmax)`` returns ``{k: ndarray of shape (dim,) + (dim,)*k}``
    holding the k-th derivative arrays of the rhs at ``x0`` for k = 2..kmax,
    symmetric in the trailing k axes.  ``tensor_order`` is the highest exact
    order available (None means unlimited).
    """

    name: str
    dim: int
    params: dict
    rhs: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray]
    tensors: Optional[Callable[[np.ndarray, int], dict]] = None
    tensor_order: Optional[int] = None
    kernel_kind: Optional[int] = None
    kernel_params: Optional[np.ndarray] = None

    def __repr__(self):
        return f"DynamicalModel({self.name!r}, dim={self.dim})"


@dataclass(frozen=True)
class InputSignal:
    """Scalar input u(t): zero, constant, sine a*sin(2*pi*t/period), or a
    swept sine (chirp) a*sin(omega(t)*t) with omega(t) = 2*pi/(c0 - c1*t)."""

    kind: str = "zero"
    a: float = 0.0
    period: float = 1.0
    c0: float = 1.0
    c1: float = 0.0

    def u(self, t):
        if self.kind == "zero":
            return np.zeros_like(np.asarray(t, dtype=float))
        if self.kind == "constant":
            return np.full_like(np.asarray(t, dtype=float), self.a)
        if self.kind == "sine":
            return self.a * np.sin(2 * np.pi * np.asarray(t) / self.period)
        if self.kind == "chirp":
            t = np.asarray(t, dtype=float)
            return self.a * np.sin(2 * np.pi * t / (self.c0 - self.c1 * t))
        raise UnknownParameter(f"unknown input kind {self.kind!r}")

    def omega(self, t):
        """Nominal angular frequency label for chirp inputs."""
        return 2 * np.pi / (self.c0 - self.c1 * np.asarray(t, dtype=float))

    def validate_span(self, t_end):
        if self.kind == "chirp" and self.c0 - self.c1 * t_end <= 0:
            raise UnknownParameter(
                "chirp denominator must stay positive over the run",
                c0=self.c0, c1=self.c1, t_end=t_end)

    def kernel_desc(self):
        kinds = {"zero": INPUT_ZERO, "constant": INPUT_CONST,
                 "sine": INPUT_SINE, "chirp": INPUT_CHIRP}
        if self.kind == "sine":
            return (kinds[self.kind], self.a, self.period, 0.0)
        if self.kind == "chirp":
            return (kinds[self.kind], self.a, self.c0, self.c1)
        return (kinds[self.kind], self.a, 0.0, 0.0)


@dataclass(frozen=True)
class ForcedModel:
    """Base model driven through an input channel: dx/dt = F(x) + b*u(t)."""

    base: DynamicalModel
    channel: np.ndarray
    signal: InputSignal = field(default_factory=InputSignal)

    def __post_init__(self):
        object.__setattr__(self, "channel",
                           np.asarray(self.channel, dtype=float))
        if self.channel.shape != (self.base.dim,):
            raise UnknownParameter("channel length must match model dimension")

    def rhs(self, t, x):
        return self.base.rhs(x) + self.channel * self.signal.u(t)

    def jac(self, t, x):
        return self.base.jac(x)


# ---------------------------------------------------------------------------
# builtins
# ---------------------------------------------------------------------------

def _planar(a=0.05, b=1.0):
    def rhs(x):
        return np.array([-a * x[0], -b * (x[1] - x[0] ** 4 + 2 * x[0] ** 2)])

    def jac(x):
        return np.array([[-a, 0.0],
                         [b * (4 * x[0] ** 3 - 4 * x[0]), -b]])

    def tensors(x0, kmax):
        out = {}
        for k in range(2, kmax + 1):
            T = np.zeros((2,) * (k + 1))
            if k == 2:
                T[1, 0, 0] = b * (12 * x0[0] ** 2 - 4)
            elif k == 3:
                T[1, 0, 0, 0] = b * 24 * x0[0]
            elif k == 4:
                T[1, 0, 0, 0, 0] = b * 24.0
            out[k] = T
        return out

    return DynamicalModel(
        name="planar", dim=2, params={"a": a, "b": b},
        rhs=rhs, jac=jac, tensors=tensors, tensor_order=None,
        kernel_kind=KERNEL_PLANAR, kernel_params=np.array([a, b]),
    )


def _goodwin(n=6.0, h1=0.84, h2=0.42, h3=0.7, h4=0.35, h5=0.7, h6=0.35,
             K1=1.0, K2=1.0, K4=1.0, K6=1.0, alpha=0.025):
    p = dict(n=n, h1=h1, h2=h2, h3=h3, h4=h4, h5=h5, h6=h6,
             K1=K1, K2=K2, K4=K4, K6=K6, alpha=alpha)

    def rhs(x):
        B, C, D = x
        return np.array([
            h1 * K1 ** n / (K1 ** n + D ** n) - h2 * B / (K2 + B) + alpha,
            h3 * B - h4 * C / (K4 + C),
            h5 * C - h6 * D / (K6 + D),
        ])

    def jac(x):
        B, C, D = x
        return np.array([
            [-h2 * K2 / (K2 + B) ** 2, 0.0,
             -h1 * K1 ** n * n * D ** (n - 1) / (K1 ** n + D ** n) ** 2],
            [h3, -h4 * K4 / (K4 + C) ** 2, 0.0],
            [0.0, h5, -h6 * K6 / (K6 + D) ** 2],
        ])

    # nonlinearity is separable in single variables, so only pure partials
    # survive; the Michaelis-Menten pieces have closed-form derivatives and
    # the Hill term is differentiated symbolically once per order.
    _hill_cache = {}

    def _hill_deriv(k, Dval):
        if k not in _hill_cache:
            import sympy as sp

            Ds = sp.Symbol("D")
            expr = h1 * K1 ** n / (K1 ** n + Ds ** n)
            _hill_cache[k] = sp.lambdify(Ds, sp.diff(expr, Ds, k), "math")
        return _hill_cache[k](Dval)

    def _mm_deriv(k, h, K, v):
        # k-th derivative of -h*v/(K+v)
        return h * K * (-1.0) ** k * math.factorial(k) / (K + v) ** (k + 1)

    def tensors(x0, kmax):
        B, C, D = x0
        out = {}
        for k in range(2, kmax + 1):
            T = np.zeros((3,) * (k + 1))
            T[(0,) + (2,) * k] = _hill_deriv(k, D)
            T[(0,) + (0,) * k] = _mm_deriv(k, h2, K2, B)
            T[(1,) + (1,) * k] = _mm_deriv(k, h4, K4, C)
            T[(2,) + (2,) * k] = _mm_deriv(k, h6, K6, D)
            out[k] = T
        return out

    return DynamicalModel(
        name="goodwin", dim=3, params=p, rhs=rhs, jac=jac,
        tensors=tensors, tensor_order=None,
        kernel_kind=KERNEL_GOODWIN,
        kernel_params=np.array([n, h1, h2, h3, h4, h5, h6, K1, K2, K4, K6, alpha]),
    )


def _pendulum(alpha=0.23, beta=0.1, gamma=0.01, kappa=8.0):
    p = dict(alpha=alpha, beta=beta, gamma=gamma, kappa=kappa)

    def rhs(x):
        r2 = x[0] ** 2 + x[1] ** 2
        return np.array([
            x[1],
            -alpha * x[0] - np.sin(x[0]) - (beta + gamma * x[2]) * x[1],
            -kappa * (x[2] - r2),
        ])

    def jac(x):
        return np.array([
            [0.0, 1.0, 0.0],
            [-alpha - np.cos(x[0]), -(beta + gamma * x[2]), -gamma * x[1]],
            [2 * kappa * x[0], 2 * kappa * x[1], -kappa],
        ])

    def tensors(x0, kmax):
        # d^k(-sin)/dx1^k cycles with period 4
        cyc = [-np.sin(x0[0]), -np.cos(x0[0]), np.sin(x0[0]), np.cos(x0[0])]
        out = {}
        for k in range(2, kmax + 1):
            T = np.zeros((3,) * (k + 1))
            T[(1,) + (0,) * k] = cyc[k % 4]
            if k == 2:
                T[1, 1, 2] = T[1, 2, 1] = -gamma
                T[2, 0, 0] = 2 * kappa
                T[2, 1, 1] = 2 * kappa
            out[k] = T
        return out

    return DynamicalModel(
        name="pendulum", dim=3, params=p, rhs=rhs, jac=jac,
        tensors=tensors, tensor_order=None,
        kernel_kind=KERNEL_PENDULUM,
        kernel_params=np.array([alpha, beta, gamma, kappa]),
    )


def _coupled(n_oscillators=10, coupling=1.54, mu=-4.5, sigma=0.05,
             rho0=-0.2, rho_slope=4.0 / 90.0):
    N = int(n_oscillators)
    rho = rho0 + rho_slope * np.arange(N)
    p = dict(n_oscillators=N, coupling=coupling, mu=mu, sigma=sigma,
             rho0=rho0, rho_slope=rho_slope)
    K = coupling

    def rhs(x):
        xs, ys = x[0::2], x[1::2]
        r2 = xs ** 2 + ys ** 2
        om = 1 + rho * (r2 - mu)
        sx = xs.sum()
        out = np.empty(2 * N)
        out[0::2] = sigma * xs * (mu - r2) - ys * om + (K / N) * (sx - xs)
        out[1::2] = sigma * ys * (mu - r2) + xs * om
        return out

    def jac(x):
        xs, ys = x[0::2], x[1::2]
        r2 = xs ** 2 + ys ** 2
        J = np.zeros((2 * N, 2 * N))
        J[0::2, 0::2] = K / N
        for j in range(N):
            xj, yj, rj = xs[j], ys[j], r2[j]
            J[2 * j, 2 * j] = sigma * (mu - rj) - 2 * sigma * xj ** 2 \
                - 2 * rho[j] * xj * yj
            J[2 * j, 2 * j + 1] = -2 * sigma * xj * yj - 1 \
                - rho[j] * (rj - mu) - 2 * rho[j] * yj ** 2
            J[2 * j + 1, 2 * j] = -2 * sigma * xj * yj + 1 \
                + rho[j] * (rj - mu) + 2 * rho[j] * xj ** 2
            J[2 * j + 1, 2 * j + 1] = sigma * (mu - rj) - 2 * sigma * yj ** 2 \
                + 2 * rho[j] * xj * yj
        return J

    def tensors(x0, kmax):
        xs, ys = x0[0::2], x0[1::2]
        out = {}
        for k in range(2, kmax + 1):
            T = np.zeros((2 * N,) * (k + 1))
            if k > 3:
                out[k] = T
                continue
            for j in range(N):
                a, b = 2 * j, 2 * j + 1  # local x, y indices
                if k == 2:
                    # second derivatives of the cubic part at x0
                    xj, yj, rj = xs[j], ys[j], rho[j]
                    d = {
                        (a, a, a): -6 * sigma * xj - 2 * rj * yj,
                        (a, a, b): -2 * sigma * yj - 2 * rj * xj,
                        (a, b, b): -2 * sigma * xj - 6 * rj * yj,
                        (b, a, a): 6 * rj * xj - 2 * sigma * yj,
                        (b, a, b): 2 * rj * yj - 2 * sigma * xj,
                        (b, b, b): -6 * sigma * yj + 2 * rj * xj,
                    }
                else:
                    rj = rho[j]
                    d = {
                        (a, a, a, a): -6 * sigma, (a, a, a, b): -2 * rj,
                        (a, a, b, b): -2 * sigma, (a, b, b, b): -6 * rj,
                        (b, a, a, a): 6 * rj, (b, a, a, b): -2 * sigma,
                        (b, a, b, b): 2 * rj, (b, b, b, b): -6 * sigma,
                    }
                for idx, val in d.items():
                    comp, rest = idx[0], idx[1:]
                    for perm in set(_permutations(rest)):
                        T[(comp,) + perm] = val
            out[k] = T
        return out

    return DynamicalModel(
        name="coupled", dim=2 * N, params=p, rhs=rhs, jac=jac,
        tensors=tensors, tensor_order=None,
        kernel_kind=KERNEL_COUPLED,
        kernel_params=np.concatenate(([N, K, mu, sigma], rho)),
    )


def _permutations(t):
    from itertools import permutations

    return permutations(t)


def _linear(matrix=None, shift=None):
    A = np.asarray(matrix, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise UnknownParameter("linear model needs a square matrix")
    N = A.shape[0]
    c = np.zeros(N) if shift is None else np.asarray(shift, dtype=float)

    def rhs(x):
        return A @ (x - c)

    def jac(x):
        return A

    def tensors(x0, kmax):
        return {k: np.zeros((N,) * (k + 1)) for k in range(2, kmax + 1)}

    return DynamicalModel(
        name="linear", dim=N, params={"matrix": A.tolist()},
        rhs=rhs, jac=jac, tensors=tensors, tensor_order=None,
        kernel_kind=KERNEL_AFFINE,
        kernel_params=np.concatenate([A.ravel(), c]),
    )


_REGISTRY = {
    "planar": _planar,
    "goodwin": _goodwin,
    "pendulum": _pendulum,
    "coupled": _coupled,
    "linear": _linear,
}


def available_models():
    return sorted(_REGISTRY)


def builtin(name, **overrides):
    """Construct a builtin model by name with optional parameter overrides."""
    if name not in _REGISTRY:
        raise UnknownModel(f"unknown model {name!r}; available: {available_models()}")
    factory = _REGISTRY[name]
    import inspect

    allowed = set(inspect.signature(factory).parameters)
    bad = set(overrides) - allowed
    if bad:
        raise UnknownParameter(
            f"unknown parameter(s) {sorted(bad)} for model {name!r}",
            allowed=sorted(allowed))
    return factory(**overrides)


def linearization_of(model, x0, matrix=None):
    """Affine model dx/dt = J(x0) (x - x0), the local-linear baseline."""
    A = model.jac(x0) if matrix is None else matrix
    return _linear(matrix=A, shift=x0)


# ---------------------------------------------------------------------------
# derivative tensors
# ---------------------------------------------------------------------------

def jacobian_fd(model, x, h=None):
    """Central finite-difference Jacobian of the rhs (test oracle)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    h = h or (np.finfo(float).eps ** (1 / 3)) * (1 + np.abs(x))
    h = np.broadcast_to(h, (n,))
    J = np.empty((n, n))
    for a in range(n):
        e = np.zeros(n)
        e[a] = h[a]
        J[:, a] = (model.rhs(x + e) - model.rhs(x - e)) / (2 * h[a])
    return J


def _fd_tensor(jac, x, k, h):
    """(k)-th derivative array of F from nested central differences of J."""
    n = x.size

    def nested(xc, idx):
        # d^len(idx) J / dx_idx at xc, by recursive central differences
        if not idx:
            return np.asarray(jac(xc), dtype=float)
        e = np.zeros(n)
        e[idx[0]] = h
        return (nested(xc + e, idx[1:]) - nested(xc - e, idx[1:])) / (2 * h)

    T = np.zeros((n,) * (k + 1))
    for idx in combinations_with_replacement(range(n), k - 1):
        block = nested(x, idx)
        # block[j, a] = d^{k-1} J[j, a] / dx_idx -> tensor entries (j, a, *idx)
        for j in range(n):
            for a in range(n):
                for perm in set(_permutations((a,) + idx)):
                    T[(j,) + perm] = block[j, a]
    return T


def derivative_tensors(model, x0, order, allow_fallback=True, fd_rel_tol=1e-3):
    """Derivative arrays {k: f^(k)} of the rhs at x0 for k = 2..order.

    Uses the model's exact provider when available; otherwise nested central
    differences of the analytic Jacobian (capped at order 4), with a
    two-step-size Richardson consistency check.
    """
    x0 = np.asarray(x0, dtype=float)
    if order < 2:
        return {}
    if model.tensors is not None and (model.tensor_order is None
                                      or order <= model.tensor_order):
        return model.tensors(x0, order)
    if not allow_fallback:
        raise OrderUnavailable(
            f"model {model.name!r} has no exact tensors to order {order}")
    if order > 4:
        raise OrderUnavailable(
            "finite-difference fallback is unreliable beyond order 4",
            requested=order)
    out = {}
    for k in range(2, order + 1):
        h = (np.finfo(float).eps ** (1 / (k + 2))) * (1 + np.linalg.norm(x0))
        T1 = _fd_tensor(model.jac, x0, k, h)
        T2 = _fd_tensor(model.jac, x0, k, h / 2)
        scale = np.max(np.abs(T2)) + 1e-12
        if np.max(np.abs(T1 - T2)) > fd_rel_tol * scale + 1e-8:
            raise FDUnreliable(
                f"finite-difference tensors disagree between step sizes at order {k}",
                order=k, disagreement=float(np.max(np.abs(T1 - T2)) / scale))
        out[k] = (4 * T2 - T1) / 3  # Richardson extrapolation
    return out
