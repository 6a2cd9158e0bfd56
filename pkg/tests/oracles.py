"""Closed-form references for the linear-Gaussian special case of the runtime model."""

import math

import numpy as np
from scipy import stats

from cutoffsgd import ndmath as nd


def make_linear_gaussian(ckpt, q=0.3, r=0.2):
    """Pin the generative model to a linear-Gaussian state-space model.

    Returns (m0, P0, F, b, Q, H, c, R) in column-vector convention.
    """
    th, cfg = ckpt.theta, ckpt.dmm_config
    last = cfg.gate.n_layers - 1
    th[f"trans.gate.w{last}"][:] = 0.0
    th[f"trans.gate.b{last}"][:] = -1e3
    th["trans.std.w0"][:] = 0.0
    th["trans.std.b0"][:] = math.log(math.expm1(q))
    th["emit.std.w1"][:] = 0.0
    th["emit.std.b1"][:] = math.log(math.expm1(r))
    th["trans.lin.w0"][:] *= 0.5
    floor = nd.STD_FLOOR
    m0 = th["init.mu"].copy()
    s0 = nd.softplus_value(th["init.std_raw"]) + floor
    F, b = th["trans.lin.w0"].T, th["trans.lin.b0"]
    H = (th["emit.mean.w0"] @ th["emit.mean.w1"]).T
    c = th["emit.mean.b0"] @ th["emit.mean.w1"] + th["emit.mean.b1"]
    d_z, n = cfg.d_z, cfg.n_workers
    return m0, np.diag(s0**2), F, b, np.eye(d_z) * (q + floor) ** 2, H, c, np.eye(n) * (r + floor) ** 2


def kalman_log_likelihood(x, m0, P0, F, b, Q, H, c, R):
    m, P, total = m0, P0, 0.0
    for t, xt in enumerate(x):
        if t > 0:
            m, P = F @ m + b, F @ P @ F.T + Q
        S = H @ P @ H.T + R
        total += stats.multivariate_normal.logpdf(xt, H @ m + c, S)
        K = P @ H.T @ np.linalg.inv(S)
        m, P = m + K @ (xt - H @ m - c), (np.eye(len(m)) - K @ H) @ P
    return total
