"""Integration kernels: compiled extension core with pure-Python fallback.

The compiled lane (Cython, ``_ckern``) implements the builtin models' right
hand sides and the Runge-Kutta stepping in C; it is selected at import when
the extension built successfully and the model carries a kernel id.  The
pure lane (``_pykern``) implements identical semantics with numpy and is
always available.  ``BACKEND`` reports which lane backs builtin models.
"""

import numpy as np

from ..errors import BlowUp, StepLimitExceeded
from ..numerics import Path
from . import _pykern

try:  # pragma: no cover - exercised via BACKEND assertions in tests
    from . import _ckern

    _HAS_COMPILED = True
except ImportError:  # pragma: no cover
    _ckern = None
    _HAS_COMPILED = False

BACKEND = "compiled" if _HAS_COMPILED else "python"

# set True to force the pure lane even when the extension is available
FORCE_PYTHON = False

_STATUS = {0: "done", 1: "stopped", 2: "blowup", 3: "steplimit"}


def _compiled_ok(model):
    return (_HAS_COMPILED and not FORCE_PYTHON
            and getattr(model, "kernel_kind", None) is not None)


def _raise_for(path, raise_on):
    if path.status == "blowup" and "blowup" in raise_on:
        raise BlowUp("trajectory norm exceeded configured bound",
                     t=float(path.t[-1]))
    if path.status == "steplimit" and "steplimit" in raise_on:
        raise StepLimitExceeded("step cap reached", t=float(path.t[-1]))
    return path


def _method_code(cfg):
    return 0 if cfg.method == "dp54" else 1


def _input_desc(signal):
    if signal is None:
        return (0, 0.0, 0.0, 0.0)
    return signal.kernel_desc()


def simulate(model, x0, t_end, cfg, signal=None, channel=None, direction=1.0,
             stop_center=None, stop_radius=0.0,
             raise_on=("blowup", "steplimit")):
    """Integrate dx/dt = direction * (F(x) + channel*u(direction*t)) from 0 to t_end.

    Optionally stops when ``|x - stop_center| <= stop_radius`` (the crossing
    is located on the dense interpolant).  Returns a Path whose ``status`` is
    "done", "stopped", "blowup" or "steplimit"; the latter two raise unless
    excluded from ``raise_on``.
    """
    if _compiled_ok(model):
        ik, p0, p1, p2 = _input_desc(signal)
        ch = np.zeros(model.dim) if channel is None else np.asarray(channel, float)
        sc = np.zeros(model.dim) if stop_center is None else np.asarray(stop_center, float)
        ts, xs, fs, st = _ckern.sim(
            int(model.kernel_kind), np.asarray(model.kernel_params, float),
            model.dim, ik, p0, p1, p2, ch,
            np.asarray(x0, float), float(t_end), float(direction),
            _method_code(cfg), cfg.h, cfg.rtol, cfg.atol, int(cfg.max_steps),
            cfg.blowup, sc, float(stop_radius or 0.0), cfg.first_step,
            cfg.max_step if np.isfinite(cfg.max_step) else 0.0)
        path = Path(ts, xs, fs)
        path.status = _STATUS[st]
    else:
        try:
            path = _pykern.sim(model, x0, t_end, cfg, signal, channel,
                               direction, stop_center, stop_radius)
        except (BlowUp, StepLimitExceeded) as exc:
            path = exc.partial
    return _raise_for(path, raise_on)


def simulate_stm(model, x0, t_end, cfg, stop_center=None, stop_radius=0.0,
                 raise_on=("blowup", "steplimit")):
    """Forward trajectory plus state-transition matrix over the whole span."""
    if _compiled_ok(model):
        sc = np.zeros(model.dim) if stop_center is None else np.asarray(stop_center, float)
        ts, xs, fs, M, st = _ckern.sim_stm(
            int(model.kernel_kind), np.asarray(model.kernel_params, float),
            model.dim, np.asarray(x0, float), float(t_end),
            _method_code(cfg), cfg.h, cfg.rtol, cfg.atol, int(cfg.max_steps),
            cfg.blowup, sc, float(stop_radius or 0.0), cfg.first_step,
            cfg.max_step if np.isfinite(cfg.max_step) else 0.0)
        path = Path(ts, xs, fs)
        path.status = _STATUS[st]
        _raise_for(path, raise_on)
        return path, M
    path, M = _pykern.sim_stm(model, x0, t_end, cfg, stop_center, stop_radius)
    _raise_for(path, raise_on)
    return path, M


def adjoint_backward(model, path, lams, i_end, substeps=2):
    """Gradient covectors I_k at every node of a forward path, seeded at its end."""
    lams = np.atleast_1d(np.asarray(lams, dtype=complex))
    i_end = np.array(np.atleast_2d(i_end), dtype=complex)
    if _compiled_ok(model):
        return _ckern.adjoint_backward(
            int(model.kernel_kind), np.asarray(model.kernel_params, float),
            model.dim, np.asarray(path.t, float), np.asarray(path.x, float),
            np.asarray(path.f, float), lams, i_end, int(substeps))
    return _pykern.adjoint_backward(model, path, lams, i_end, substeps)
