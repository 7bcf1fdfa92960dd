# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Signatures and results match ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p

cnp.import_array()

BACKEND = "cython"


cdef inline double _expit(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double _log1pexp(double x) nogil:
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


def expit(x):
    cdef cnp.ndarray[double, ndim=1] flat = np.ascontiguousarray(x, dtype=float).ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(flat)
    cdef const double[::1] fv = flat
    cdef double[::1] ov = out
    cdef Py_ssize_t i, n = flat.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = _expit(fv[i])
    return out.reshape(np.shape(x))


def logistic_loglik_grad_hess(x, r, eta):
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=float)
    cdef const double[::1] rv = np.ascontiguousarray(r, dtype=float)
    cdef const double[::1] ev = np.ascontiguousarray(eta, dtype=float)
    cdef Py_ssize_t n = xv.shape[0], k = xv.shape[1]
    cdef cnp.ndarray[double, ndim=1] grad = np.zeros(k)
    cdef cnp.ndarray[double, ndim=2] hess = np.zeros((k, k))
    cdef double[::1] gv = grad
    cdef double[:, ::1] hv = hess
    cdef Py_ssize_t i, a, b
    cdef double lin, p, w, res, ll = 0.0
    with nogil:
        for i in range(n):
            lin = 0.0
            for a in range(k):
                lin += xv[i, a] * ev[a]
            ll += rv[i] * lin - _log1pexp(lin)
            p = _expit(lin)
            res = rv[i] - p
            w = p * (1.0 - p)
            for a in range(k):
                gv[a] += xv[i, a] * res
                for b in range(a + 1):
                    hv[a, b] -= w * xv[i, a] * xv[i, b]
        for a in range(k):
            for b in range(a):
                hv[b, a] = hv[a, b]
    return ll, grad, hess


def normal_expit_mean(center, scale, nodes, weights):
    cdef const double[::1] cv = np.ascontiguousarray(center, dtype=float)
    cdef const double[::1] sv = np.ascontiguousarray(scale, dtype=float)
    cdef const double[::1] nv = np.ascontiguousarray(nodes, dtype=float)
    cdef const double[::1] wv = np.ascontiguousarray(weights, dtype=float)
    cdef Py_ssize_t n = cv.shape[0], m = nv.shape[0], i, j
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n)
    cdef double[::1] ov = out
    cdef double acc
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(m):
                acc += wv[j] * _expit(cv[i] + sv[i] * nv[j])
            ov[i] = acc
    return out


def ipw_factor(r, w1, w0, y, mu):
    cdef const double[::1] rv = np.ascontiguousarray(r, dtype=float)
    cdef const double[::1] av = np.ascontiguousarray(w1, dtype=float)
    cdef const double[::1] bv = np.ascontiguousarray(w0, dtype=float)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=float)
    cdef const double[::1] mv = np.ascontiguousarray(mu, dtype=float)
    cdef Py_ssize_t n = rv.shape[0], i
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n)
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            ov[i] = rv[i] * av[i] * yv[i] - (1.0 - rv[i]) * bv[i] * mv[i]
    return out


def dr_factor(r, w1, w0, y, m, mu):
    cdef const double[::1] rv = np.ascontiguousarray(r, dtype=float)
    cdef const double[::1] av = np.ascontiguousarray(w1, dtype=float)
    cdef const double[::1] bv = np.ascontiguousarray(w0, dtype=float)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=float)
    cdef const double[::1] hv = np.ascontiguousarray(m, dtype=float)
    cdef const double[::1] mv = np.ascontiguousarray(mu, dtype=float)
    cdef Py_ssize_t n = rv.shape[0], i
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n)
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            ov[i] = rv[i] * av[i] * (yv[i] - hv[i]) + (1.0 - rv[i]) * bv[i] * (hv[i] - mv[i])
    return out


def k_rows(r, w1, w0, psi, e_v, e_vl):
    cdef const double[::1] rv = np.ascontiguousarray(r, dtype=float)
    cdef const double[::1] av = np.ascontiguousarray(w1, dtype=float)
    cdef const double[::1] bv = np.ascontiguousarray(w0, dtype=float)
    cdef const double[:, ::1] pv = np.ascontiguousarray(psi, dtype=float)
    cdef const double[:, ::1] ev = np.ascontiguousarray(e_v, dtype=float)
    cdef const double[:, ::1] lv = np.ascontiguousarray(e_vl, dtype=float)
    cdef Py_ssize_t n = pv.shape[0], k = pv.shape[1], i, j
    cdef cnp.ndarray[double, ndim=2] out = np.empty((n, k))
    cdef double[:, ::1] ov = out
    with nogil:
        for i in range(n):
            for j in range(k):
                ov[i, j] = rv[i] * av[i] * (pv[i, j] - ev[i, j]) + (1.0 - rv[i]) * bv[i] * (ev[i, j] - lv[i, j])
    return out
