"""Pure-Python hot loops. ``_kernels.pyx`` mirrors these operation-for-operation.

Both backends must produce bit-identical doubles, so the arithmetic order
here is the contract: do not "simplify" an expression in one file only.
"""

import heapq

import numpy as np


def smooth_step(level, trend, s_old, y, alpha, beta, gamma, tes, on_level):
    """One Holt/Holt-Winters update. Returns (level, trend, new seasonal)."""
    if tes:
        new_level = alpha * (y - s_old) + (1.0 - alpha) * (level + trend)
    else:
        new_level = alpha * y + (1.0 - alpha) * (level + trend)
    new_trend = beta * (new_level - level) + (1.0 - beta) * trend
    if not tes:
        return new_level, new_trend, s_old
    if on_level:
        new_s = gamma * (y - new_level) + (1.0 - gamma) * s_old
    else:
        new_s = gamma * (y - new_trend) + (1.0 - gamma) * s_old
    return new_level, new_trend, new_s


def smooth_replay(values, level, trend, season, alpha, beta, gamma, tes, on_level):
    """Absorb ``values`` in order.

    ``season`` is the ring ordered oldest first; a rotated copy (again oldest
    first) is returned together with the final level and trend.
    """
    ring = [float(v) for v in season]
    s = len(ring)
    pos = 0
    for y in values:
        y = float(y)
        s_old = ring[pos] if tes else 0.0
        level, trend, s_new = smooth_step(level, trend, s_old, y, alpha, beta, gamma, tes, on_level)
        if tes:
            ring[pos] = s_new
            pos = (pos + 1) % s
    out = np.array(ring[pos:] + ring[:pos], dtype=np.float64) if tes else np.zeros(0)
    return level, trend, out


def smooth_forecasts(values, level, trend, season, alpha, beta, gamma, tes, on_level, k, online):
    """Forecast each ``values[i]`` with lead ``k`` (origin ``i - k``).

    With ``online`` the state absorbs every value up to the origin before
    forecasting; otherwise it stays frozen at the end of training and the
    lead grows with ``i``. Forecasts are clamped at zero.
    """
    n = len(values)
    ring = [float(v) for v in season]
    s = len(ring)
    pos = 0
    cursor = -1
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        if online:
            while cursor < i - k:
                cursor += 1
                y = float(values[cursor])
                s_old = ring[pos] if tes else 0.0
                level, trend, s_new = smooth_step(level, trend, s_old, y, alpha, beta, gamma, tes, on_level)
                if tes:
                    ring[pos] = s_new
                    pos = (pos + 1) % s
        lead = i - cursor
        f = level + lead * trend
        if tes:
            f = f + ring[(pos + lead - 1) % s]
        out[i] = f if f > 0.0 else 0.0
    return out


def mmc_sojourn(arrivals, services, c):
    """FIFO c-server queue: sojourn time of each customer.

    ``arrivals`` are absolute, non-decreasing arrival instants. Each customer
    takes the server that frees up first.
    """
    n = len(arrivals)
    free = [0.0] * c
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        a = float(arrivals[i])
        f = heapq.heappop(free)
        start = a if a > f else f
        done = start + float(services[i])
        heapq.heappush(free, done)
        out[i] = done - a
    return out
