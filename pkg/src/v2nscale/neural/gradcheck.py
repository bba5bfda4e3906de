"""Central finite-difference check of a layer stack's analytic gradients."""

from __future__ import annotations

import numpy as np

from .network import Network


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / (||a|| + ||b||), 0 when both vanish."""
    den = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def randomize(net: Network, rng: np.random.Generator, scale: float = 1.0) -> Network:
    """Replace every tensor, biases included, with normal draws (keeps ReLUs off their kinks)."""
    for k, v in net.params.items():
        net.params[k] = rng.normal(scale=scale, size=v.shape)
    return net


def check_network(net: Network, x: np.ndarray, rng: np.random.Generator, eps: float = 1e-5) -> dict[str, float]:
    """Relative error per parameter tensor (and the input) for a random linear loss."""
    out, _ = net.forward(x)
    proj = rng.normal(size=out.shape)

    def loss(xx=None):
        y, _ = net.forward(x if xx is None else xx)
        return float(np.sum(proj * y))

    _, caches = net.forward(x)
    dx, grads = net.backward(proj, caches)
    errors = {}
    for name, p in net.params.items():
        num = np.empty_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + eps
            up = loss()
            p[i] = old - eps
            down = loss()
            p[i] = old
            num[i] = (up - down) / (2 * eps)
        errors[name] = relative_error(grads[name], num)
    xn = np.empty_like(x)
    xp = x.copy()
    for i in np.ndindex(x.shape):
        old = xp[i]
        xp[i] = old + eps
        up = loss(xp)
        xp[i] = old - eps
        down = loss(xp)
        xp[i] = old
        xn[i] = (up - down) / (2 * eps)
    errors["input"] = relative_error(dx, xn)
    return errors
