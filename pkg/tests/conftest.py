import numpy as np

from vqdiff import from_stepwise


def random_stepwise_table(rng, T, K):
    """Random valid schedule built from random per-step simplex coefficients."""
    alpha = rng.uniform(0.5, 1.0, size=T)
    rest = 1.0 - alpha
    split = rng.uniform(0.0, 1.0, size=T)
    gamma = rest * split
    beta = rest * (1.0 - split) / K
    return from_stepwise(alpha, beta, gamma, K)
