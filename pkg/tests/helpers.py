"""Shared numerical helpers for the test suite."""

from __future__ import annotations

import numpy as np


def relative_error(a, b, floor: float = 1e-10) -> float:
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def finite_difference(loss_fn, arrays: list[np.ndarray], rng: np.random.Generator,
                      n_coords: int = 6, h: float = 1e-6) -> tuple[np.ndarray, list[tuple[int, tuple]]]:
    """Central differences of ``loss_fn()`` at random coordinates of ``arrays`` (perturbed in place)."""
    picks = []
    for _ in range(n_coords):
        i = int(rng.integers(len(arrays)))
        idx = tuple(int(rng.integers(s)) for s in arrays[i].shape)
        picks.append((i, idx))
    out = np.empty(len(picks))
    for n, (i, idx) in enumerate(picks):
        a = arrays[i]
        old = a[idx]
        a[idx] = old + h
        up = loss_fn()
        a[idx] = old - h
        down = loss_fn()
        a[idx] = old
        out[n] = (up - down) / (2 * h)
    return out, picks


def gradcheck(loss_fn, arrays, grads, rng, n_coords: int = 6, h: float = 1e-6) -> float:
    """Relative error between analytic ``grads`` and central differences on sampled coordinates."""
    fd, picks = finite_difference(loss_fn, arrays, rng, n_coords, h)
    analytic = np.array([grads[i][idx] for i, idx in picks])
    return relative_error(analytic, fd)


ACCEPTANCE_LINES: list[str] = []


def report(number: int, title: str, ok: bool | None, detail: str) -> str:
    """Record and print one acceptance line; ``ok=None`` marks a skipped criterion."""
    status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
    line = f"criterion {number}: {status} | {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line
