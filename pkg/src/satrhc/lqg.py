"""Finite-horizon LQ feedback gains by backward Riccati recursion."""

import numpy as np

from .model import ModelError, SystemModel


def riccati_gains(sys: SystemModel, q_stages, r_stages):
    """Gains K_0..K_{N-1} with u_t = K_t x_t minimizing the unconstrained cost.

    q_stages holds N+1 state weights (terminal last), r_stages N input
    weights.  Returns (gains, value matrices P_0..P_N).  Aborts if a Riccati
    iterate loses positive definiteness.
    """
    if len(q_stages) != len(r_stages) + 1:
        raise ModelError("need one more state weight than input weights")
    a, b = sys.a_mat, sys.b_mat
    p = np.asarray(q_stages[-1], dtype=float)
    values = [p]
    gains = []
    for t in range(len(r_stages) - 1, -1, -1):
        r_t = np.atleast_2d(np.asarray(r_stages[t], dtype=float))
        q_t = np.asarray(q_stages[t], dtype=float)
        gram = r_t + b.T @ p @ b
        try:
            np.linalg.cholesky(gram)
        except np.linalg.LinAlgError:
            raise ModelError(f"Riccati recursion lost definiteness at stage {t}")
        k_t = -np.linalg.solve(gram, b.T @ p @ a)
        p = q_t + a.T @ p @ a + a.T @ p @ b @ k_t
        p = 0.5 * (p + p.T)
        try:
            np.linalg.cholesky(p)
        except np.linalg.LinAlgError:
            raise ModelError(f"Riccati value matrix lost definiteness at stage {t}")
        gains.append(k_t)
        values.append(p)
    gains.reverse()
    values.reverse()
    return gains, values
