"""Vector-valued quadrature: adaptive Simpson and fixed-width trapezoid.

Integrands are vectorised: ``f(t)`` takes an array of ``m`` nodes and returns
an ``(m, c)`` array (or ``(m,)`` for scalar integrands).  The batched forms
integrate many pieces at once; ``f(t, piece)`` then also receives the piece
index of every node.
"""
from __future__ import annotations

import math

import numpy as np


class QuadratureError(RuntimeError):
    pass


def _as_2d(values, m):
    values = np.asarray(values, dtype=float)
    return values.reshape(m, -1)


def adaptive_simpson_batch(f, a, b, tol, max_depth: int = 30) -> np.ndarray:
    """Integrate ``f`` over each piece ``[a[p], b[p]]``.

    A panel is accepted once every component satisfies
    ``|S_left + S_right - S_whole| / 15 <= tol_panel`` where ``tol_panel`` is
    the piece tolerance halved at each bisection.  Panels are processed
    breadth first so each level costs one vectorised call to ``f``.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    tol = np.broadcast_to(np.asarray(tol, float), a.shape).copy()
    n_pieces = a.size
    if n_pieces == 0:
        return np.empty((0, 0))
    if np.any(b < a):
        raise ValueError("adaptive Simpson needs a <= b on every piece")
    if np.any(tol <= 0):
        raise ValueError("tolerance must be positive")

    piece = np.arange(n_pieces)
    mid = 0.5 * (a + b)
    vals = _as_2d(f(np.concatenate([a, mid, b]), np.concatenate([piece] * 3)), 3 * n_pieces)
    fa, fm, fb = vals[:n_pieces], vals[n_pieces:2 * n_pieces], vals[2 * n_pieces:]
    whole = ((b - a) / 6.0)[:, None] * (fa + 4.0 * fm + fb)
    result = np.zeros((n_pieces, vals.shape[1]))
    lo, hi, depth = a, b, 0

    while piece.size:
        m = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + m), 0.5 * (m + hi)
        k = piece.size
        quarter = _as_2d(f(np.concatenate([lm, rm]), np.concatenate([piece, piece])), 2 * k)
        flm, frm = quarter[:k], quarter[k:]
        half = ((hi - lo) / 12.0)[:, None]
        left = half * (fa + 4.0 * flm + fm)
        right = half * (fm + 4.0 * frm + fb)
        err = np.abs(left + right - whole) / 15.0
        done = np.all(err <= tol[:, None], axis=1) | (hi - lo <= 0)
        if done.any():
            np.add.at(result, piece[done], (left + right)[done])
        todo = ~done
        if not todo.any():
            break
        if depth >= max_depth:
            worst = int(np.argmax(np.max(err[todo] / tol[todo, None], axis=1)))
            p = int(piece[todo][worst])
            raise QuadratureError(
                f"adaptive Simpson exceeded depth {max_depth} on piece {p} "
                f"[{lo[todo][worst]!r}, {hi[todo][worst]!r}]"
            )
        piece = np.concatenate([piece[todo], piece[todo]])
        new_lo = np.concatenate([lo[todo], m[todo]])
        new_hi = np.concatenate([m[todo], hi[todo]])
        fa, fm, fb = (np.concatenate([fa[todo], fm[todo]]),
                      np.concatenate([flm[todo], frm[todo]]),
                      np.concatenate([fm[todo], fb[todo]]))
        whole = np.concatenate([left[todo], right[todo]])
        tol = np.concatenate([tol[todo], tol[todo]]) / 2.0
        lo, hi = new_lo, new_hi
        depth += 1
    return result


def adaptive_simpson(f, a: float, b: float, tol: float = 1e-6, max_depth: int = 30):
    """Adaptive Simpson integral of a vector-valued ``f`` over ``[a, b]``."""
    if not a < b:
        raise ValueError("adaptive_simpson needs a < b")
    scalar = np.ndim(f(np.array([a]))) == 1
    out = adaptive_simpson_batch(lambda t, _p: f(t), [a], [b], tol, max_depth)[0]
    return float(out[0]) if scalar else out


def trapezoid_nodes(a: float, b: float, resolution: int | None = None, delta: float | None = None):
    if resolution is None and delta is None:
        raise ValueError("give resolution or delta")
    if resolution is None:
        if not delta > 0:
            raise ValueError("delta must be positive")
        resolution = max(2, int(math.ceil((b - a) / delta - 1e-12)) + 1)
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    return np.linspace(a, b, int(resolution))


def fixed_trapezoid(f, a: float, b: float, resolution: int | None = None, delta: float | None = None):
    """Composite trapezoid rule on a uniform grid of ``resolution`` points
    (or spacing at most ``delta``)."""
    t = trapezoid_nodes(a, b, resolution, delta)
    vals = np.asarray(f(t), float)
    scalar = vals.ndim == 1
    vals = vals.reshape(len(t), -1)
    h = np.diff(t)[:, None]
    out = np.sum(0.5 * h * (vals[:-1] + vals[1:]), axis=0)
    return float(out[0]) if scalar else out


def fixed_trapezoid_batch(f, a, b, delta: float) -> np.ndarray:
    """Trapezoid rule on each piece with spacing at most ``delta``."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    counts = np.maximum(1, np.ceil((b - a) / delta - 1e-12).astype(int))
    nodes, owner = [], []
    for p, (lo, hi, n) in enumerate(zip(a, b, counts)):
        nodes.append(np.linspace(lo, hi, n + 1))
        owner.append(np.full(n + 1, p))
    t = np.concatenate(nodes)
    piece = np.concatenate(owner)
    vals = _as_2d(f(t, piece), t.size)
    result = np.zeros((a.size, vals.shape[1]))
    start = 0
    for p, n in enumerate(counts):
        v = vals[start:start + n + 1]
        h = (b[p] - a[p]) / n
        result[p] = h * (0.5 * v[0] + v[1:-1].sum(axis=0) + 0.5 * v[-1])
        start += n + 1
    return result
