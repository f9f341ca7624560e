# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled integration core: builtin model right-hand sides, Jacobians,
fixed-step RK4 and adaptive Dormand-Prince 5(4) drivers, state-transition
co-integration, and backward adjoint propagation along stored paths.

Semantics mirror isoslow.kernels._pykern step for step (same tableau, same
PI controller, same stop handling) so the two lanes agree to rounding error.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, fabs, isfinite, pow, sin, sqrt

cnp.import_array()

cdef double PI = 3.141592653589793238462643383279502884

cdef double[7] DP_C = [0.0, 1.0/5, 3.0/10, 4.0/5, 8.0/9, 1.0, 1.0]
cdef double[6][6] DP_A = [
    [0, 0, 0, 0, 0, 0],
    [1.0/5, 0, 0, 0, 0, 0],
    [3.0/40, 9.0/40, 0, 0, 0, 0],
    [44.0/45, -56.0/15, 32.0/9, 0, 0, 0],
    [19372.0/6561, -25360.0/2187, 64448.0/6561, -212.0/729, 0, 0],
    [9017.0/3168, -355.0/33, 46732.0/5247, 49.0/176, -5103.0/18656, 0],
]
cdef double[6] DP_B = [35.0/384, 0.0, 500.0/1113, 125.0/192, -2187.0/6784, 11.0/84]
cdef double[7] DP_E = [
    35.0/384 - 5179.0/57600, 0.0, 500.0/1113 - 7571.0/16695,
    125.0/192 - 393.0/640, -2187.0/6784 + 92097.0/339200,
    11.0/84 - 187.0/2100, -1.0/40,
]

cdef int KIND_AFFINE = 0
cdef int KIND_PLANAR = 1
cdef int KIND_GOODWIN = 2
cdef int KIND_PENDULUM = 3
cdef int KIND_COUPLED = 4


cdef void model_rhs(int kind, double* p, double* x, double* out, int n) noexcept nogil:
    cdef int i, j, N
    cdef double B, C, D, Kn, r2, om, sx, K, mu, sg
    if kind == KIND_AFFINE:
        for i in range(n):
            out[i] = 0.0
            for j in range(n):
                out[i] += p[i*n + j] * (x[j] - p[n*n + j])
    elif kind == KIND_PLANAR:
        out[0] = -p[0] * x[0]
        out[1] = -p[1] * (x[1] - x[0]*x[0]*x[0]*x[0] + 2.0*x[0]*x[0])
    elif kind == KIND_GOODWIN:
        B = x[0]; C = x[1]; D = x[2]
        Kn = pow(p[7], p[0])
        out[0] = p[1]*Kn/(Kn + pow(D, p[0])) - p[2]*B/(p[8] + B) + p[11]
        out[1] = p[3]*B - p[4]*C/(p[9] + C)
        out[2] = p[5]*C - p[6]*D/(p[10] + D)
    elif kind == KIND_PENDULUM:
        r2 = x[0]*x[0] + x[1]*x[1]
        out[0] = x[1]
        out[1] = -p[0]*x[0] - sin(x[0]) - (p[1] + p[2]*x[2])*x[1]
        out[2] = -p[3]*(x[2] - r2)
    else:  # coupled population of planar oscillators
        N = <int>p[0]; K = p[1]; mu = p[2]; sg = p[3]
        sx = 0.0
        for j in range(N):
            sx += x[2*j]
        for j in range(N):
            r2 = x[2*j]*x[2*j] + x[2*j+1]*x[2*j+1]
            om = 1.0 + p[4+j]*(r2 - mu)
            out[2*j] = sg*x[2*j]*(mu - r2) - x[2*j+1]*om + (K/N)*(sx - x[2*j])
            out[2*j+1] = sg*x[2*j+1]*(mu - r2) + x[2*j]*om


cdef void model_jac(int kind, double* p, double* x, double* J, int n) noexcept nogil:
    cdef int i, j, N
    cdef double B, C, D, Kn, Dn, r2, K, mu, sg, xj, yj, rj
    for i in range(n*n):
        J[i] = 0.0
    if kind == KIND_AFFINE:
        for i in range(n*n):
            J[i] = p[i]
    elif kind == KIND_PLANAR:
        J[0] = -p[0]
        J[2] = p[1]*(4.0*x[0]*x[0]*x[0] - 4.0*x[0])
        J[3] = -p[1]
    elif kind == KIND_GOODWIN:
        B = x[0]; C = x[1]; D = x[2]
        Kn = pow(p[7], p[0]); Dn = pow(D, p[0])
        J[0] = -p[2]*p[8]/((p[8]+B)*(p[8]+B))
        J[2] = -p[1]*Kn*p[0]*pow(D, p[0]-1.0)/((Kn+Dn)*(Kn+Dn))
        J[3] = p[3]
        J[4] = -p[4]*p[9]/((p[9]+C)*(p[9]+C))
        J[7] = p[5]
        J[8] = -p[6]*p[10]/((p[10]+D)*(p[10]+D))
    elif kind == KIND_PENDULUM:
        J[1] = 1.0
        J[3] = -p[0] - cos(x[0])
        J[4] = -(p[1] + p[2]*x[2])
        J[5] = -p[2]*x[1]
        J[6] = 2.0*p[3]*x[0]
        J[7] = 2.0*p[3]*x[1]
        J[8] = -p[3]
    else:
        N = <int>p[0]; K = p[1]; mu = p[2]; sg = p[3]
        for j in range(N):
            for i in range(N):
                if i != j:
                    J[(2*j)*n + 2*i] = K/N
            xj = x[2*j]; yj = x[2*j+1]; rj = p[4+j]
            r2 = xj*xj + yj*yj
            J[(2*j)*n + 2*j] = sg*(mu - r2) - 2.0*sg*xj*xj - 2.0*rj*xj*yj
            J[(2*j)*n + 2*j + 1] = -2.0*sg*xj*yj - 1.0 - rj*(r2 - mu) - 2.0*rj*yj*yj
            J[(2*j+1)*n + 2*j] = -2.0*sg*xj*yj + 1.0 + rj*(r2 - mu) + 2.0*rj*xj*xj
            J[(2*j+1)*n + 2*j + 1] = sg*(mu - r2) - 2.0*sg*yj*yj + 2.0*rj*xj*yj


cdef double input_u(int ik, double a, double b, double c, double t) noexcept nogil:
    if ik == 0:
        return 0.0
    if ik == 1:
        return a
    if ik == 2:
        return a * sin(2.0*PI*t/b)
    return a * sin(2.0*PI*t/(b - c*t))


cdef void full_rhs(int kind, double* p, int n, int ik, double ia, double ib,
                   double ic, double* ch, double direction, int with_stm,
                   double t, double* y, double* out, double* Jbuf) noexcept nogil:
    cdef int i, j, k
    cdef double u
    model_rhs(kind, p, y, out, n)
    if ik != 0:
        u = input_u(ik, ia, ib, ic, direction*t)
        for i in range(n):
            out[i] += ch[i]*u
    if direction != 1.0:
        for i in range(n):
            out[i] *= direction
    if with_stm:
        model_jac(kind, p, y, Jbuf, n)
        for i in range(n):
            for j in range(n):
                out[n + i*n + j] = 0.0
                for k in range(n):
                    out[n + i*n + j] += Jbuf[i*n + k] * y[n + k*n + j]


cdef void hermite(double s, double t0, double t1, double* x0, double* x1,
                  double* f0, double* f1, int n, double* out) noexcept nogil:
    cdef double h = t1 - t0
    cdef double u = (s - t0)/h
    cdef double h00 = 2*u*u*u - 3*u*u + 1
    cdef double h10 = u*u*u - 2*u*u + u
    cdef double h01 = -2*u*u*u + 3*u*u
    cdef double h11 = u*u*u - u*u
    cdef int i
    for i in range(n):
        out[i] = h00*x0[i] + h10*h*f0[i] + h01*x1[i] + h11*h*f1[i]


cdef double vec_norm(double* x, int n) noexcept nogil:
    cdef double s = 0.0
    cdef int i
    for i in range(n):
        s += x[i]*x[i]
    return sqrt(s)


cdef double stop_value(double* y, double* sc, double r, int n) noexcept nogil:
    cdef double s = 0.0
    cdef int i
    for i in range(n):
        s += (y[i] - sc[i])*(y[i] - sc[i])
    return sqrt(s) - r


cdef class _Store:
    cdef public object ts, xs, fs
    cdef double[:] tv
    cdef double[:, :] xv, fv
    cdef int count, cap, n

    def __cinit__(self, int n):
        self.n = n
        self.cap = 1024
        self.count = 0
        self.ts = np.empty(self.cap)
        self.xs = np.empty((self.cap, n))
        self.fs = np.empty((self.cap, n))
        self.tv = self.ts
        self.xv = self.xs
        self.fv = self.fs

    cdef void push(self, double t, double* x, double* f):
        cdef int i
        if self.count == self.cap:
            self.cap *= 2
            self.ts = np.resize(self.ts, self.cap)
            self.xs = np.resize(self.xs, (self.cap, self.n))
            self.fs = np.resize(self.fs, (self.cap, self.n))
            self.tv = self.ts
            self.xv = self.xs
            self.fv = self.fs
        self.tv[self.count] = t
        for i in range(self.n):
            self.xv[self.count, i] = x[i]
            self.fv[self.count, i] = f[i]
        self.count += 1

    def arrays(self):
        return (np.asarray(self.ts)[:self.count].copy(),
                np.asarray(self.xs)[:self.count].copy(),
                np.asarray(self.fs)[:self.count].copy())


cdef int _drive(int kind, double[:] params, int n, int ik, double ia, double ib,
                double ic, double[:] channel, double[:] y0, double t_end,
                double direction, int method, double h_fixed, double rtol,
                double atol, long max_steps, double blowup, double[:] stop_c,
                double stop_r, double first_step, double max_step,
                int with_stm, _Store store, double[:] y_final):
    cdef int m = n + (n*n if with_stm else 0)
    cdef cnp.ndarray work = np.empty((12, m))
    cdef double[:, :] W = work
    cdef cnp.ndarray jwork = np.empty(n*n)
    cdef double[:] Jbuf = jwork
    cdef double* p = &params[0]
    cdef double* ch = &channel[0]
    cdef double* sc = &stop_c[0]
    cdef double* y = &W[0, 0]
    cdef double* f = &W[1, 0]
    cdef double* ynew = &W[2, 0]
    cdef double* ytmp = &W[4, 0]
    cdef double* Jb = &Jbuf[0]
    cdef int i, j, s, status = 0
    cdef int have_stop = 1 if stop_r > 0.0 else 0
    cdef double t = 0.0, h, err, err_prev = 1.0, sck, fac, tiny
    cdef long nsteps = 0
    cdef int n_fixed

    for i in range(m):
        y[i] = y0[i]
    full_rhs(kind, p, n, ik, ia, ib, ic, ch, direction, with_stm, 0.0, y, f, Jb)
    store.push(0.0, y, f)
    tiny = 1e-14 if t_end < 1.0 else 1e-14*t_end

    if method == 1:  # fixed-step RK4
        n_fixed = <int>(t_end/h_fixed - 1e-12) + 1
        h = t_end/n_fixed
        for s in range(n_fixed):
            for i in range(m):
                ytmp[i] = y[i] + 0.5*h*f[i]
            full_rhs(kind, p, n, ik, ia, ib, ic, ch, direction, with_stm, t + 0.5*h, ytmp, &W[6, 0], Jb)
            for i in range(m):
                ytmp[i] = y[i] + 0.5*h*W[6, i]
            full_rhs(kind, p, n, ik, ia, ib, ic, ch, direction, with_stm, t + 0.5*h, ytmp, &W[7, 0], Jb)
            for i in range(m):
                ytmp[i] = y[i] + h*W[7, i]
            full_rhs(kind, p, n, ik, ia, ib, ic, ch, direction, with_stm, t + h, ytmp, &W[8, 0], Jb)
            for i in range(m):
                ynew[i] = y[i] + (h/6.0)*(f[i] + 2.0*W[6, i] + 2.0*W[7, i] + W[8, i])
            if vec_norm(ynew, n) > blowup or not isfinite(vec_norm(ynew, m)):
                status = 2
                break
            t = (s + 1)*h
            full_rhs(kind, p, n, ik, ia, ib, ic, ch, direction, with_stm, t, ynew, &W[3, 0], Jb)
            store.push(t, ynew, &W[3, 0])
            for i in range(m):
                y[i] = ynew[i]
                f[i] = W[3, i]
            if have_stop and stop_value(y, sc, stop_r, n) <= 0.0:
                status = 1
                break
        for i in range(m):
            y_final[i] = y[i]
        return status

    # adaptive DP54 with PI step control
    h = first_step
    if h > t_end:
        h = t_end
    if max_step > 0.0 and h > max_step:
        h = max_step
    while t < t_end - tiny:
        nsteps += 1
        if nsteps > max_steps:
            status = 3
            break
        if h > t_end - t:
            h = t_end - t
        if max_step > 0.0 and h > max_step:
            h = max_step
        for i in range(m):
            W[5, i] = f[i]
        for s in range(1, 6):
            for i in range(m):
                ytmp[i] = y[i]
                for j in range(s):
                    ytmp[i] += h*DP_A[s][j]*W[5 + j, i]
            full_rhs(kind, p, n, ik, ia, ib, ic, ch, direction, with_stm,
                     t + DP_C[s]*h, ytmp, &W[5 + s, 0], Jb)
        for i in range(m):
            ynew[i] = y[i]
            for j in range(6):
                ynew[i] += h*DP_B[j]*W[5 + j, i]
        full_rhs(kind, p, n, ik, ia, ib, ic, ch, direction, with_stm, t + h, ynew, &W[11, 0], Jb)
        err = 0.0
        for i in range(m):
            sck = atol + rtol*max(fabs(y[i]), fabs(ynew[i]))
            fac = 0.0
            for j in range(7):
                fac += DP_E[j]*W[5 + j, i]
            fac = h*fac/sck
            err += fac*fac
        err = sqrt(err/m)
        if err <= 1.0:
            if vec_norm(ynew, n) > blowup or not isfinite(vec_norm(ynew, m)):
                status = 2
                break
            t += h
            for i in range(m):
                y[i] = ynew[i]
                f[i] = W[11, i]
            store.push(t, y, f)
            if have_stop and stop_value(y, sc, stop_r, n) <= 0.0:
                status = 1
                break
            if err > 0.0:
                fac = 0.9*pow(err, -0.14)*pow(err_prev, 0.08)
            else:
                fac = 10.0
            err_prev = err if err > 1e-10 else 1e-10
            if fac > 10.0:
                fac = 10.0
            if fac < 0.2:
                fac = 0.2
            h *= fac
        else:
            fac = 0.9*pow(err, -0.2)
            if fac < 0.2:
                fac = 0.2
            h *= fac
    for i in range(m):
        y_final[i] = y[i]
    return status


def sim(int kind, double[:] params, int n, int ik, double ia, double ib, double ic,
        double[:] channel, double[:] x0, double t_end, double direction,
        int method, double h, double rtol, double atol, long max_steps,
        double blowup, double[:] stop_center, double stop_radius,
        double first_step, double max_step):
    store = _Store(n)
    yf = np.empty(n)
    cdef int status = _drive(kind, params, n, ik, ia, ib, ic, channel,
                             np.ascontiguousarray(x0), t_end, direction, method,
                             h, rtol, atol, max_steps, blowup,
                             np.ascontiguousarray(stop_center), stop_radius,
                             first_step, max_step, 0, store, yf)
    ts, xs, fs = store.arrays()
    return ts, xs, fs, status


def sim_stm(int kind, double[:] params, int n, double[:] x0, double t_end,
            int method, double h, double rtol, double atol, long max_steps,
            double blowup, double[:] stop_center, double stop_radius,
            double first_step, double max_step):
    cdef int m = n + n*n
    y0 = np.empty(m)
    y0[:n] = np.asarray(x0)
    y0[n:] = np.eye(n).ravel()
    store = _Store(n)
    yf = np.empty(m)
    zero_ch = np.zeros(n)
    cdef int status = _drive(kind, params, n, 0, 0.0, 0.0, 0.0, zero_ch, y0,
                             t_end, 1.0, method, h, rtol, atol, max_steps,
                             blowup, np.ascontiguousarray(stop_center),
                             stop_radius, first_step, max_step, 1, store, yf)
    ts, xs, fs = store.arrays()
    M = np.asarray(yf)[n:].reshape(n, n).copy()
    return ts, xs, fs, M, status


def adjoint_backward(int kind, double[:] params, int n, double[:] ts,
                     double[:, :] xs, double[:, :] fs, complex[:] lams,
                     complex[:, :] i_end, int substeps):
    """RK4 for dI/dsigma = (J^T - lam) I in reversed time along a stored path."""
    cdef int m = ts.shape[0]
    cdef int L = lams.shape[0]
    out_arr = np.empty((m, L, n), dtype=complex)
    cdef complex[:, :, :] out = out_arr
    # rows: 0 current I, 1..4 stage slopes k1..k4, 5 shifted argument
    cdef cnp.ndarray Iw = np.zeros((6, L, n), dtype=complex)
    cdef complex[:, :, :] I = Iw
    cdef cnp.ndarray Jw = np.empty(n*n)
    cdef double[:] Jv = Jw
    cdef double* Jb = &Jv[0]
    cdef cnp.ndarray xw = np.empty((3, n))
    cdef double[:, :] X = xw
    cdef double* p = &params[0]
    cdef int k, i, l, sub
    cdef double t0, t1, hseg, ta, tm, tb

    for l in range(L):
        for i in range(n):
            out[m-1, l, i] = i_end[l, i]
            I[0, l, i] = i_end[l, i]

    for k in range(m - 1, 0, -1):
        t0 = ts[k-1]
        t1 = ts[k]
        hseg = (t1 - t0)/substeps
        for sub in range(substeps):
            ta = t1 - sub*hseg
            tm = ta - 0.5*hseg
            tb = ta - hseg
            if sub == 0:
                for i in range(n):
                    X[0, i] = xs[k, i]
            else:
                hermite(ta, t0, t1, &xs[k-1, 0], &xs[k, 0], &fs[k-1, 0], &fs[k, 0], n, &X[0, 0])
            hermite(tm, t0, t1, &xs[k-1, 0], &xs[k, 0], &fs[k-1, 0], &fs[k, 0], n, &X[1, 0])
            if sub == substeps - 1:
                for i in range(n):
                    X[2, i] = xs[k-1, i]
            else:
                hermite(tb, t0, t1, &xs[k-1, 0], &xs[k, 0], &fs[k-1, 0], &fs[k, 0], n, &X[2, 0])
            _adj_deriv(kind, p, n, &X[0, 0], Jb, I, 0, 1, lams, L)       # k1
            _adj_shift(I, L, n, 1, 0.5*hseg)
            _adj_deriv(kind, p, n, &X[1, 0], Jb, I, 5, 2, lams, L)       # k2
            _adj_shift(I, L, n, 2, 0.5*hseg)
            _adj_deriv(kind, p, n, &X[1, 0], Jb, I, 5, 3, lams, L)       # k3
            _adj_shift(I, L, n, 3, hseg)
            _adj_deriv(kind, p, n, &X[2, 0], Jb, I, 5, 4, lams, L)       # k4
            for l in range(L):
                for i in range(n):
                    I[0, l, i] = I[0, l, i] + (hseg/6.0)*(
                        I[1, l, i] + 2.0*I[2, l, i] + 2.0*I[3, l, i] + I[4, l, i])
        for l in range(L):
            for i in range(n):
                out[k-1, l, i] = I[0, l, i]
    return out_arr


cdef void _adj_shift(complex[:, :, :] I, int L, int n, int ksrc, double frac) noexcept:
    # I[5] <- I[0] + frac * I[ksrc]
    cdef int l, i
    for l in range(L):
        for i in range(n):
            I[5, l, i] = I[0, l, i] + frac*I[ksrc, l, i]


cdef void _adj_deriv(int kind, double* p, int n, double* x, double* Jb,
                     complex[:, :, :] I, int src, int dst, complex[:] lams,
                     int L) noexcept:
    # I[dst] <- J(x)^T I[src] - lam I[src]
    cdef int l, i, j
    cdef complex acc
    model_jac(kind, p, x, Jb, n)
    for l in range(L):
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc = acc + Jb[j*n + i]*I[src, l, j]
            I[dst, l, i] = acc - lams[l]*I[src, l, i]
