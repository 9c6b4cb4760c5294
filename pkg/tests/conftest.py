"""Shared oracles: finite differences, brute-force rasterizer, distance map, components."""
from __future__ import annotations

import sys
from collections import deque

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from diffstate.autodiff import Tape, backward, value_of

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def fd_gradient(f, x0, step=1e-5):
    """Central-difference gradient of a scalar function of an array."""
    x0 = np.array(x0, dtype=float)
    g = np.zeros_like(x0)
    flat = g.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        flat[i] = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))) / (2 * step)
    return g


def tape_gradient(f, x0):
    """(value, gradient) of ``f`` at ``x0`` through the tape."""
    tape = Tape()
    x = tape.leaf(np.array(x0, dtype=float))
    out = f(x)
    return float(value_of(out)), backward(out)[x]


def rel_error(analytic, numeric):
    """Max over coordinates of |a - n| / max(1, |n|), the same measure as grad_check."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n)))) if n.size else 0.0


def check_gradient(f, x0, step=1e-5):
    """Relative error between tape and central-difference gradients of ``f``."""
    _, g = tape_gradient(f, x0)
    num = fd_gradient(lambda x: float(value_of(f(Tape().leaf(x)))), x0, step)
    return rel_error(g, num)


def hard_raster(uv, faces, shape):
    """Coverage by point-in-triangle tests at pixel centres; either winding counts."""
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W]
    px, py = xx + 0.5, yy + 0.5
    out = np.zeros(shape, dtype=bool)
    for f in np.asarray(faces):
        a, b, c = np.asarray(uv)[f]
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(area) < 1e-12:
            continue
        w0 = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
        w1 = (c[0] - b[0]) * (py - b[1]) - (c[1] - b[1]) * (px - b[0])
        w2 = (a[0] - c[0]) * (py - c[1]) - (a[1] - c[1]) * (px - c[0])
        s = np.sign(area)
        out |= (s * w0 >= 0) & (s * w1 >= 0) & (s * w2 >= 0)
    return out


def brute_distance_map(mask, gamma=1.0):
    """Distance from every pixel to the nearest positive pixel by exhaustive search."""
    mask = np.asarray(mask, dtype=bool)
    pos = np.argwhere(mask)
    H, W = mask.shape
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            if not mask[i, j]:
                out[i, j] = np.sqrt(np.min((pos[:, 0] - i) ** 2 + (pos[:, 1] - j) ** 2))
    return out / gamma


def brute_components(mask, connectivity=4):
    """Label image by breadth-first flood fill."""
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    labels = np.zeros((H, W), dtype=int)
    steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == 8:
        steps += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    n = 0
    for i in range(H):
        for j in range(W):
            if mask[i, j] and not labels[i, j]:
                n += 1
                labels[i, j] = n
                todo = deque([(i, j)])
                while todo:
                    a, b = todo.popleft()
                    for da, db in steps:
                        u, v = a + da, b + db
                        if 0 <= u < H and 0 <= v < W and mask[u, v] and not labels[u, v]:
                            labels[u, v] = n
                            todo.append((u, v))
    return labels, n


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
