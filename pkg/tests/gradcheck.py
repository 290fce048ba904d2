"""Finite-difference gradient checking on miniature float64 models."""

import numpy as np

from driftguard.nn import Architecture, SleepNet

TINY = Architecture(in_len=64, stem_channels=2, block_channels=(2, 2, 2))


def tiny_model(seed=1):
    rng = np.random.default_rng(seed)
    m = SleepNet(TINY, np.float64)
    for p in m.params.values():
        p[:] = rng.normal(0, 0.7, p.shape)
    for n, b in m.buffers.items():
        b[:] = rng.uniform(0.5, 1.5, b.shape) if "var" in n else rng.normal(0, 0.3, b.shape)
    m.mark_updated()
    return m


def relu_pattern(cache):
    """All ReLU on/off masks of a forward pass, including the SE bottlenecks."""
    masks = []
    for kind, _, c in cache.steps:
        if kind == "relu":
            masks.append(c)
        elif kind == "se":
            masks.append(c[2] > 0)
    return np.concatenate([m.ravel() for m in masks])


def fd_check(model, x, mode, loss_and_grad, h=1e-4):
    """Worst norm-relative error between backprop and central differences.

    Also asserts that no probe moves a ReLU across its kink, where a central
    difference measures the kink rather than the derivative.
    """
    res = model.forward(x, mode, update_stats=False)
    pattern = relu_pattern(res.cache)
    grads = model.backward(res.cache, loss_and_grad(res.logits)[1])

    def loss():
        out = model.forward(x, mode, update_stats=False)
        assert np.array_equal(relu_pattern(out.cache), pattern), "probe crossed a ReLU kink; pick another fixture"
        return loss_and_grad(out.logits)[0]

    errors = {}
    for name, p in model.params.items():
        num = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            orig = p[i]
            p[i] = orig + h
            lp = loss()
            p[i] = orig - h
            lm = loss()
            p[i] = orig
            num[i] = (lp - lm) / (2 * h)
        scale = max(np.linalg.norm(num), np.linalg.norm(grads[name]), 1e-8)
        errors[name] = float(np.linalg.norm(num - grads[name]) / scale)
    return errors
