"""Slow, direct re-implementations used as test oracles."""

import math

import numpy as np
from scipy import stats


def all_configs(J):
    out = [(J, J)]
    out += [(r, J) for r in range(1, J)]
    out += [(a, b) for a in range(1, J - 1) for b in range(a + 1, J)]
    return out


def prior(rho, pi0, piR, J):
    r1, r2 = rho
    if r1 == r2:
        return 1 - pi0
    if r2 == J:
        return pi0 * (1 - piR) / (J - 1) if J > 2 else pi0
    return pi0 * piR / math.comb(J - 1, 2)


def objective(rho, s_table, post, alpha, pi0, piR):
    """Expected deviance of one configuration: -2 times its pixel's share of Q."""
    J = s_table.shape[0]
    r1, r2 = rho
    total = 0.0
    for i in range(1, J + 1):
        if i <= r1 or i > r2:
            total += s_table[i - 1, 0]
        else:
            total += sum(post[g] * s_table[i - 1, g + 1] for g in range(len(post)))
    if r1 < r2:
        total -= 2 * sum(post[g] * max(math.log(alpha[g]) if alpha[g] > 0 else -np.inf, -700.0) for g in range(len(post)))
    return total - 2 * math.log(prior(rho, pi0, piR, J))


def brute_force_rho(s_table, post, alpha, pi0, piR):
    J = s_table.shape[0]
    configs = all_configs(J)
    values = [objective(c, s_table, post, alpha, pi0, piR) for c in configs]
    return configs[int(np.argmin(values))], values


def alpha_update(rhos, posts, dirichlet):
    posts = np.asarray(posts, dtype=float)
    changed = [k for k, (a, b) in enumerate(rhos) if a < b]
    num = posts[changed].sum(axis=0) + np.asarray(dirichlet) - 1
    den = len(changed) + sum(dirichlet) - len(dirichlet)
    return num / den


def direct_conditional(mu, cov, x, miss):
    """Conditional mean and covariance from explicit inverses."""
    o, m = ~miss, miss
    soo_inv = np.linalg.inv(cov[np.ix_(o, o)])
    mean = mu[m] + cov[np.ix_(m, o)] @ soo_inv @ (x[o] - mu[o])
    var = cov[np.ix_(m, m)] - cov[np.ix_(m, o)] @ soo_inv @ cov[np.ix_(o, m)]
    return mean, var


def observed_loglik(mu, cov, x, miss):
    o = ~miss
    if not o.any():
        return 0.0
    return float(stats.multivariate_normal(mu[o], cov[np.ix_(o, o)]).logpdf(x[o]))


def s_direct(mu, cov, x, miss):
    """Expected complete-data deviance from explicit inverses, term by term."""
    prec = np.linalg.inv(cov)
    filled = x.astype(float).copy()
    V = np.zeros_like(cov)
    if miss.all():
        filled = mu.copy()
        V = cov.copy()
    elif miss.any():
        mean, var = direct_conditional(mu, cov, x, miss)
        filled[miss] = mean
        V[np.ix_(miss, miss)] = var
    r = filled - mu
    return np.linalg.slogdet(cov)[1] + r @ prec @ r + np.sum(prec * V)
