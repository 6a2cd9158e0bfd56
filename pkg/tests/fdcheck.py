"""Central finite-difference gradient checks against the reverse-mode engine."""

import numpy as np

from cutoffsgd import ndmath as nd

STEP = 1e-5


def relative_error(analytic, numeric, floor=1e-3):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def check_store_gradients(stores, objective, n_entries=None, rng=None, step=STEP):
    """Compare d objective / d params from backward() with central differences.

    ``objective()`` must rebuild the graph from the current parameter values
    and return a scalar Node. ``n_entries`` limits how many scalar entries
    (drawn with ``rng``) are probed; None probes all of them.
    Returns the maximum relative error.
    """
    stores = list(stores)
    for s in stores:
        s.zero_grad()
    nd.backward(objective())
    probes = []
    for s in stores:
        for name in s.names():
            for idx in np.ndindex(s[name].shape):
                probes.append((s, name, idx))
    if n_entries is not None and n_entries < len(probes):
        rng = rng or np.random.default_rng(0)
        picked = rng.choice(len(probes), size=n_entries, replace=False)
        probes = [probes[i] for i in picked]
    worst = 0.0
    for s, name, idx in probes:
        analytic = s.grad(name)[idx]
        original = s[name][idx]
        s[name][idx] = original + step
        up = float(objective().value)
        s[name][idx] = original - step
        down = float(objective().value)
        s[name][idx] = original
        numeric = (up - down) / (2 * step)
        worst = max(worst, float(relative_error(analytic, numeric)))
    return worst


def check_input_gradient(fn, x, step=STEP):
    """Gradient of scalar fn(Node) w.r.t. an input array, analytic vs numeric."""
    x = np.array(x, dtype=np.float64)
    store = nd.ParameterStore()
    store.create("x", x)
    nd.backward(fn(store.node("x")))
    analytic = store.grad("x").copy()
    numeric = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        numeric[idx] = (float(fn(nd.Node(xp)).value) - float(fn(nd.Node(xm)).value)) / (2 * step)
    return float(np.max(relative_error(analytic, numeric))), analytic, numeric
