"""Small builders shared by the module tests."""

import math

import numpy as np

from aerostate.features import FeatureMap, hamming_matrix, random_descriptors
from aerostate.mcl import FeatureFrame


def make_map(positions, rng=None, bounds=(3.0, 3.0)):
    rng = rng or np.random.default_rng(0)
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    return FeatureMap(bounds, np.arange(len(positions)), positions,
                      random_descriptors(len(positions), rng))


def observe(fmap, pose, idx=None, height=0.5):
    """Exact frame of map features ``idx`` seen from ``pose``."""
    idx = np.arange(len(fmap)) if idx is None else np.asarray(idx, dtype=np.intp)
    x, y, th = pose
    c, s = math.cos(th), math.sin(th)
    rel = fmap.positions[idx] - np.array([x, y])
    offs = np.column_stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1]])
    return FeatureFrame(0.0, height, offs, fmap.descriptors[idx].copy())


def brute_force_matches(frame_desc, map_desc, ratio=0.7):
    """Reference matcher: popcount per pair in pure Python, stable ties."""
    out = []
    for i, d in enumerate(frame_desc):
        dist = [sum(bin(int(a) ^ int(b)).count("1") for a, b in zip(d, m)) for m in map_desc]
        if len(dist) < 2:
            continue
        order = sorted(range(len(dist)), key=lambda j: (dist[j], j))
        d1, d2 = dist[order[0]], dist[order[1]]
        if not d1 > ratio * d2:
            out.append((i, order[0]))
    return out


def hamming_reference(a, b):
    return np.array([[sum(bin(int(x) ^ int(y)).count("1") for x, y in zip(r, s)) for s in b] for r in a])
