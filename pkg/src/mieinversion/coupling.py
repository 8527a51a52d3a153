"""Selection of the smoothest combination of per-wavelength candidates.

Within one optical window every wavelength l_1..l_s offers a list of candidate
indices.  A combination picks one per wavelength; its smoothness is

    S = sum_{i=2}^{s-1} (n_{i-1} - 2 n_i + n_{i+1})^2 + (k_{i-1} - 2 k_i + k_{i+1})^2.

:func:`greedy_smoothest` seeds every interior triple and extends it greedily
to both ends; :func:`brute_force_smoothest` enumerates all combinations and
serves as a reference for small instances.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "Combination",
    "smoothness_sum",
    "greedy_smoothest",
    "brute_force_smoothest",
    "as_point_lists",
    "BRUTE_FORCE_CAP",
]

BRUTE_FORCE_CAP = 1_000_000


@dataclass(frozen=True)
class Combination:
    """One pick per wavelength.

    ``smoothness`` is the full sum S of the picked points; ``s_cur`` is the
    running total accumulated by the greedy search (equal to ``smoothness``
    for greedy results, since every interior second difference is added
    exactly once).  ``evaluations`` counts local second-difference
    evaluations.
    """

    picks: tuple[int, ...]
    points: np.ndarray
    smoothness: float
    s_cur: float
    evaluations: int = 0


def _second_diff_sq(p0, p1, p2) -> np.ndarray:
    d = np.asarray(p0) - 2.0 * np.asarray(p1) + np.asarray(p2)
    return np.sum(d * d, axis=-1)


def smoothness_sum(points) -> float:
    """Sum of squared second differences of real and imaginary parts; 0 for s < 3."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] < 3:
        return 0.0
    d = pts[:-2] - 2.0 * pts[1:-1] + pts[2:]
    return float(np.sum(d * d))


def as_point_lists(candidates) -> list[np.ndarray]:
    """Normalise candidate lists (arrays, tuples or objects with ``.x``) to (N_k, 2) arrays."""
    return _check(candidates, None, None)


def _check(candidates, s, labels):
    lists = []
    for i, cands in enumerate(candidates):
        pts = [c.x if hasattr(c, "x") else c for c in cands]
        arr = np.asarray(pts, dtype=float).reshape(-1, 2)
        if arr.shape[0] == 0:
            name = labels[i] if labels is not None else f"position {i}"
            raise ValueError(f"no candidates at wavelength {name}")
        lists.append(arr)
    if s is not None and s != len(lists):
        raise ValueError(f"s={s} does not match {len(lists)} candidate lists")
    return lists


def greedy_smoothest(candidates: Sequence, s: int | None = None, labels: Sequence | None = None) -> Combination:
    """Greedy smoothest combination.

    For every interior position z and every triple of candidates at z-1, z,
    z+1 the combination is completed to the left and then to the right, each
    time taking the candidate with the smallest local squared second
    difference given the already fixed neighbours.  The completed combination
    with the smallest accumulated sum wins; ties go to the first one found
    (z ascending, then candidate indices ascending).

    Parameters
    ----------
    candidates : sequence of sequences
        Per-wavelength candidate points (pairs, arrays, or objects with ``.x``).
        For s < 3 the first candidate of each list is returned.
    s : int, optional
        Number of wavelengths; checked against ``len(candidates)``.
    labels : sequence, optional
        Wavelength labels for error messages.
    """
    lists = _check(candidates, s, labels)
    s = len(lists)
    if s < 3:
        picks = (0,) * s
        pts = np.array([lst[0] for lst in lists]).reshape(-1, 2)
        return Combination(picks, pts, 0.0, 0.0, 0)
    best_s = np.inf
    best_picks = None
    evals = 0
    picks = [0] * s
    for z in range(1, s - 1):
        for c1, c2, c3 in itertools.product(range(len(lists[z - 1])), range(len(lists[z])), range(len(lists[z + 1]))):
            picks[z - 1], picks[z], picks[z + 1] = c1, c2, c3
            s_cur = float(_second_diff_sq(lists[z - 1][c1], lists[z][c2], lists[z + 1][c3]))
            evals += 1
            for k in range(z - 2, -1, -1):
                d = _second_diff_sq(lists[k], lists[k + 1][picks[k + 1]], lists[k + 2][picks[k + 2]])
                evals += d.size
                j = int(np.argmin(d))
                picks[k] = j
                s_cur += float(d[j])
            for k in range(z + 2, s):
                d = _second_diff_sq(lists[k - 2][picks[k - 2]], lists[k - 1][picks[k - 1]], lists[k])
                evals += d.size
                j = int(np.argmin(d))
                picks[k] = j
                s_cur += float(d[j])
            if s_cur < best_s:
                best_s = s_cur
                best_picks = tuple(picks)
    pts = np.array([lists[i][p] for i, p in enumerate(best_picks)])
    return Combination(best_picks, pts, smoothness_sum(pts), float(best_s), evals)


def brute_force_smoothest(candidates: Sequence, s: int | None = None, cap: int = BRUTE_FORCE_CAP) -> Combination:
    """Exact minimiser of :func:`smoothness_sum` over all combinations.

    Raises
    ------
    ValueError
        If the number of combinations exceeds ``cap``.
    """
    lists = _check(candidates, s, None)
    total = int(np.prod([len(lst) for lst in lists], dtype=float))
    if total > cap:
        raise ValueError(f"{total} combinations exceed the enumeration cap {cap}")
    best, best_picks = np.inf, None
    for picks in itertools.product(*[range(len(lst)) for lst in lists]):
        val = smoothness_sum([lists[i][p] for i, p in enumerate(picks)])
        if val < best:
            best, best_picks = val, picks
    pts = np.array([lists[i][p] for i, p in enumerate(best_picks)]).reshape(-1, 2)
    return Combination(tuple(best_picks), pts, float(best), float(best), total)
