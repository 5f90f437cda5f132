import numpy as np


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` at ``x`` (``x`` is perturbed in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    """Largest ``|a - b| / max(|a|, |b|, floor)``.

    Central differences with h = 1e-5 on an O(1) loss carry about
    eps * |L| / h ~ 1e-11 of round-off, so entries below ~1e-6 cannot be
    resolved to 1e-5 relative accuracy; the floor sits at that bound.
    """
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def network_fd_check(net, rng, shape=(2, 1, 12, 12), h=1e-5):
    """Max relative error of every parameter array and of the input gradient."""
    x = rng.normal(size=shape)
    y = rng.integers(0, net.config.classes, size=shape[0])
    # nonzero biases so their gradients are exercised away from the origin
    for name, arr, decays in net.parameters():
        if not decays:
            arr[...] = rng.normal(scale=0.1, size=arr.shape)
    _, _, gin = net.loss_and_grad(x, y)
    grads = [g.copy() for g in net.gradients()]

    def loss_at(_):
        return net.loss_and_grad(x, y)[0]

    errs = {}
    for (name, arr, _), g in zip(net.parameters(), grads):
        errs[name] = max_rel_err(g, numeric_grad(loss_at, arr, h))
    errs["input"] = max_rel_err(gin, numeric_grad(lambda z: net.loss_and_grad(z, y)[0], x, h))
    return errs
