"""Pure-numpy kernels. Reference implementation and fallback for ``_kernels``."""
import numpy as np

BACKEND = "python"


def expit(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logistic_loglik_grad_hess(x, r, eta):
    """Bernoulli-logit log-likelihood, its gradient and Hessian at ``eta``."""
    x = np.ascontiguousarray(x, dtype=float)
    r = np.ascontiguousarray(r, dtype=float)
    lin = x @ np.asarray(eta, dtype=float)
    # log(1 + e^lin) without overflow
    log1pexp = np.logaddexp(0.0, lin)
    loglik = float(np.sum(r * lin - log1pexp))
    p = expit(lin)
    grad = x.T @ (r - p)
    hess = -(x * (p * (1.0 - p))[:, None]).T @ x
    return loglik, grad, hess


def normal_expit_mean(center, scale, nodes, weights):
    """E[expit(center + scale * Z)] for standard normal Z, row by row.

    ``nodes``/``weights`` are a normal-measure quadrature rule (weights sum to 1).
    """
    center = np.asarray(center, dtype=float)
    scale = np.asarray(scale, dtype=float)
    z = center[:, None] + scale[:, None] * np.asarray(nodes)[None, :]
    return expit(z) @ np.asarray(weights)


def ipw_factor(r, w1, w0, y, mu):
    """Row factor R*w1*Y - (1-R)*w0*mu."""
    return r * w1 * y - (1.0 - r) * w0 * mu


def dr_factor(r, w1, w0, y, m, mu):
    """Row factor R*w1*(Y - m) + (1-R)*w0*(m - mu)."""
    return r * w1 * (y - m) + (1.0 - r) * w0 * (m - mu)


def k_rows(r, w1, w0, psi, e_v, e_vl):
    """Matrix form of ``dr_factor``: one column per basis function."""
    r = np.asarray(r, dtype=float)[:, None]
    w1 = np.asarray(w1, dtype=float)[:, None]
    w0 = np.asarray(w0, dtype=float)[:, None]
    return r * w1 * (psi - e_v) + (1.0 - r) * w0 * (e_v - e_vl)
