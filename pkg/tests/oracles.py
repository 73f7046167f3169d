"""Independent oracles: central finite differences and scalar-loop
reimplementations of the batched math. Deliberately written as plain
per-element loops so they share no code path with the library."""

import numpy as np


def central_difference(f, arrays, step=1e-5):
    """Gradient of the scalar ``f()`` with respect to each array, one entry
    at a time. The arrays are perturbed in place and restored."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f())
            flat[i] = orig - step
            lo = float(f())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def assert_close_to_fd(analytic, fd, rtol=1e-4, atol=1e-7):
    np.testing.assert_allclose(analytic, fd, rtol=rtol, atol=atol)


def loop_logits(z, w):
    """o[n, k] = sum_j w[j, k] * z[n, j], one product at a time."""
    n, d = z.shape
    k = w.shape[1]
    out = np.zeros((n, k))
    for i in range(n):
        for c in range(k):
            for j in range(d):
                out[i, c] += w[j, c] * z[i, j]
    return out


def loop_rationale(z, w):
    """r[k, n, j] = w[j, k] * z[n, j]."""
    n, d = z.shape
    k = w.shape[1]
    out = np.zeros((k, n, d))
    for c in range(k):
        for i in range(n):
            for j in range(d):
                out[c, i, j] = w[j, c] * z[i, j]
    return out


def loop_momentum(prior, batch_mean, m):
    return (1.0 - m) * np.asarray(prior) + m * np.asarray(batch_mean)


def loop_momentum_closed_form(initial, batch_mean, m, t):
    decay = (1.0 - m) ** t
    return decay * np.asarray(initial) + (1.0 - decay) * np.asarray(batch_mean)


def _per_sample(values, i):
    v = np.asarray(values)
    return v[i] if v.ndim == 2 else v[:, i, :]


def loop_inv_loss_batch_norm(values, targets, labels):
    """Per-class squared deviations summed over every sample, divided by
    the batch size (targets: one array per class)."""
    y = np.asarray(labels)
    total = 0.0
    for c in np.unique(y):
        for i in np.flatnonzero(y == c):
            diff = _per_sample(values, i) - targets[int(c)]
            total += float((diff * diff).sum())
    return total / y.size


def loop_inv_loss_element_mean(values, targets, labels):
    """Sum over present classes of the elementwise mean squared deviation
    within each class group."""
    y = np.asarray(labels)
    total = 0.0
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        sq_sum = 0.0
        count = 0
        for i in idx:
            diff = _per_sample(values, i) - targets[int(c)]
            sq_sum += float((diff * diff).sum())
            count += diff.size
        total += sq_sum / count
    return total


def loop_scd(values, centers, labels):
    """Mean unsquared distance of each sample from its class center."""
    y = np.asarray(labels)
    total = 0.0
    for i in range(y.size):
        diff = _per_sample(values, i) - centers[int(y[i])]
        total += float(np.sqrt((diff * diff).sum()))
    return total / y.size


def loop_mean_squared(a, b, normalization):
    """Scalar-loop mirror of the two deviation normalizations; ``b`` may
    lack the batch axis (second-to-last of ``a``)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if b.ndim == a.ndim - 1:
        b = np.repeat(np.expand_dims(b, -2), a.shape[-2], axis=-2)
    total = 0.0
    for ai, bi in zip(a.reshape(-1), b.reshape(-1)):
        total += (ai - bi) ** 2
    if normalization == "element_mean":
        return total / a.size
    return total / a.shape[-2]
