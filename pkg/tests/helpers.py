"""Shared test data builders and independent oracles."""
import itertools

import numpy as np

from fusereg.data import ColumnSchema, FusedDataset
from fusereg.efficiency import DiscreteCovariateLaw
from fusereg.nuisance import LOGISTIC, OutcomeModel, PropensityFit


def small_dataset(n=40, seed=0, p=1):
    """Random fused data with V = (A, C) and p covariates."""
    rng = np.random.default_rng(seed)
    schema = ColumnSchema(("A", "C"), tuple(f"L{j}" for j in range(p)), "Y")
    v = rng.normal(size=(n, 2))
    r = np.zeros(n, dtype=int)
    r[: n // 2] = 1
    rng.shuffle(r)
    l = v @ rng.normal(size=(2, p)) + rng.normal(size=(n, p))
    y = v @ np.array([0.5, -0.3]) + l.sum(axis=1) + rng.normal(size=n)
    return FusedDataset.from_full(schema, r, v, y, l)


def irls_oracle(x, r, iters=100):
    """Textbook IRLS: repeated weighted least squares on the working response."""
    beta = np.zeros(x.shape[1])
    for _ in range(iters):
        eta = x @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        w = p * (1 - p)
        z = eta + (r - p) / w
        sw = np.sqrt(w)
        new, *_ = np.linalg.lstsq(x * sw[:, None], z * sw, rcond=None)
        if np.max(np.abs(new - beta)) < 1e-14:
            return new
        beta = new
    return beta


# A finite-support binary-outcome world: V scalar, L in {0, 1}, Y in {0, 1}.
TOY_OUTCOME = OutcomeModel(LOGISTIC, ("1", "V"), np.array([-0.3, 0.8, 1.2]))
TOY_PROP = PropensityFit(("1", "V"), np.array([0.2, -0.5]), 0.0, True, 0)
TOY_LAW = DiscreteCovariateLaw(np.array([[0.0], [1.0]]),
                               lambda c: np.column_stack([0.7 - 0.4 * c["V"], 0.3 + 0.4 * c["V"]]))


def brute_force_h(v):
    """Independent oracle: enumerate all (R, L, Y) outcomes with scalar arithmetic."""
    expit = lambda t: 1.0 / (1.0 + np.exp(-t))  # noqa: E731
    pi = expit(0.2 - 0.5 * v)
    p_l1 = 0.3 + 0.4 * v
    laws = [(0.0, 1 - p_l1), (1.0, p_l1)]

    def mu(l, beta):
        return expit(beta[0] + beta[1] * v + beta[2] * l)

    def m(beta):
        return sum(p * mu(l, beta) for l, p in laws)

    def big_m(r, l, y, beta):
        return r / pi * (y - m(beta)) + (1 - r) / (1 - pi) * (m(beta) - mu(l, beta))

    beta = TOY_OUTCOME.beta
    grad = np.zeros(3)
    second = 0.0
    for r, (l, pl), y in itertools.product((0, 1), laws, (0, 1)):
        prob = (pi if r else 1 - pi) * pl * (mu(l, beta) if y else 1 - mu(l, beta))
        # exact gradient of M in beta, by the chain rule written out separately
        dmu = mu(l, beta) * (1 - mu(l, beta)) * np.array([1.0, v, l])
        dm = sum(p * mu(ll, beta) * (1 - mu(ll, beta)) * np.array([1.0, v, ll]) for ll, p in laws)
        dM = -r / pi * dm + (1 - r) / (1 - pi) * (dm - dmu)
        grad += prob * dM
        second += prob * big_m(r, l, y, beta) ** 2
    return -grad / second
