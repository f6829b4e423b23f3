import numpy as np
from gradlayer.nn_core import Activation, DenseNet, NetSpec, init_net

FD_STEP = 1e-6


def central_diff(fn, x, h=FD_STEP):
    """Central differences of scalar ``fn`` at flat ``x``; step scaled by ``max(1, |x_i|)``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        out[i] = (fn(xp) - fn(xm)) / (2 * step)
    return out


def rel_err(a, b):
    """Coordinatewise relative error, denominators floored at 1e-3 of the largest entry."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-3 * scale)))


def random_net(rng, dims=None, hidden="tanh", output="identity", scale=1.0):
    if dims is None:
        depth = rng.integers(2, 5)
        dims = [int(rng.integers(1, 5))] + [int(rng.integers(2, 7)) for _ in range(depth - 1)] + [1]
    spec = NetSpec(tuple(dims), Activation(hidden), Activation(output))
    net = init_net(spec, rng)
    p = net.params * scale + 0.1 * rng.standard_normal(spec.n_params)
    return DenseNet(spec, p)


# one line per acceptance criterion, echoed in the terminal summary by conftest
ACCEPTANCE_LINES = []


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
