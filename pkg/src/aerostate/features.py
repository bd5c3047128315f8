"""Binary descriptors, Hamming matching and the global feature map.

Descriptors are 256 bits, stored as four uint64 words per row so distance
matrices reduce to XOR plus popcount.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .estcore import InvalidArgumentError

DESCRIPTOR_BITS = 256
DESCRIPTOR_WORDS = DESCRIPTOR_BITS // 64
RATIO = 0.7


def random_descriptors(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, np.iinfo(np.uint64).max, size=(n, DESCRIPTOR_WORDS),
                        dtype=np.uint64, endpoint=True)


def flip_bits(desc: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    """Flip each bit independently with probability ``prob``."""
    desc = np.atleast_2d(desc)
    if prob <= 0:
        return desc.copy()
    flips = rng.random((desc.shape[0], DESCRIPTOR_BITS)) < prob
    mask = np.packbits(flips, axis=1, bitorder="little").view("<u8").astype(np.uint64)
    return desc ^ mask


def descriptor_to_hex(desc) -> str:
    return np.asarray(desc, dtype="<u8").tobytes().hex()


def descriptor_from_hex(text: str) -> np.ndarray:
    raw = bytes.fromhex(text)
    if len(raw) != DESCRIPTOR_BITS // 8:
        raise InvalidArgumentError(f"descriptor must be {DESCRIPTOR_BITS // 4} hex chars")
    return np.frombuffer(raw, dtype="<u8").astype(np.uint64)


def descriptors_from_hex(texts) -> np.ndarray:
    if len(texts) == 0:
        return np.zeros((0, DESCRIPTOR_WORDS), dtype=np.uint64)
    raw = bytes.fromhex("".join(texts))
    if len(raw) != len(texts) * DESCRIPTOR_BITS // 8:
        raise InvalidArgumentError("malformed descriptor hex")
    return np.frombuffer(raw, dtype="<u8").astype(np.uint64).reshape(-1, DESCRIPTOR_WORDS)


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between rows of ``a`` and rows of ``b``."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.int16)
    bt = np.ascontiguousarray(b.T)
    # one word at a time keeps the temporaries small
    d = np.bitwise_count(a[:, 0, None] ^ bt[0][None, :]).astype(np.int16)
    for w in range(1, DESCRIPTOR_WORDS):
        d += np.bitwise_count(a[:, w, None] ^ bt[w][None, :])
    return d


class Match2(NamedTuple):
    idx1: int
    dist1: int
    idx2: int
    dist2: int


def best_2_matches(desc, candidates: np.ndarray):
    """Two nearest candidates by Hamming distance, or None if fewer than two."""
    candidates = np.atleast_2d(candidates) if len(candidates) else candidates
    if len(candidates) < 2:
        return None
    d = hamming_matrix(np.atleast_2d(desc), candidates)[0]
    i1, i2 = _two_smallest(d)
    return Match2(int(i1), int(d[i1]), int(i2), int(d[i2]))


def _two_smallest(d: np.ndarray):
    # ties broken toward the lower index, like a stable sort
    order = np.argsort(d, kind="stable")
    return order[0], order[1]


def best_two_rows(D: np.ndarray):
    """Row-wise (idx1, dist1, idx2, dist2) for a distance matrix with >= 2 columns."""
    n_rows, n_cols = D.shape
    if n_cols < 2:
        raise InvalidArgumentError("need at least two candidates per row")
    rows = np.arange(n_rows)
    # argmin returns the first minimum, so ties go to the lower index
    i1 = np.argmin(D, axis=1)
    rest = D.astype(np.int64, copy=True)
    rest[rows, i1] = np.iinfo(np.int64).max
    i2 = np.argmin(rest, axis=1)
    return i1, D[rows, i1], i2, D[rows, i2]


def ratio_test(dist1, dist2, ratio: float = RATIO):
    """True where the best match is distinctive (dist1 <= ratio * dist2)."""
    return ~(np.asarray(dist1) > ratio * np.asarray(dist2))


@dataclass(frozen=True)
class MapFeature:
    id: int
    x: float
    y: float
    descriptor: np.ndarray


class FeatureMap:
    """Global 2D features with a KD-tree over positions."""

    def __init__(self, bounds, ids, positions, descriptors):
        self.bounds = (float(bounds[0]), float(bounds[1]))
        self.ids = np.asarray(ids, dtype=np.int64)
        self.positions = np.asarray(positions, dtype=float).reshape(-1, 2)
        self.descriptors = np.asarray(descriptors, dtype=np.uint64).reshape(-1, DESCRIPTOR_WORDS)
        if not (len(self.ids) == len(self.positions) == len(self.descriptors)):
            raise InvalidArgumentError("ids, positions and descriptors differ in length")
        self._tree = cKDTree(self.positions) if len(self.positions) else None

    def __len__(self):
        return len(self.ids)

    def feature(self, i: int) -> MapFeature:
        x, y = self.positions[i]
        return MapFeature(int(self.ids[i]), float(x), float(y), self.descriptors[i].copy())

    @property
    def features(self):
        return [self.feature(i) for i in range(len(self))]

    def query_radius(self, center, radius: float) -> np.ndarray:
        """Sorted indices of features within ``radius`` of ``center`` (inclusive)."""
        if self._tree is None:
            return np.zeros(0, dtype=np.intp)
        idx = self._tree.query_ball_point(np.asarray(center, dtype=float)[:2], radius)
        return np.asarray(sorted(idx), dtype=np.intp)

    def to_json(self) -> dict:
        return {
            "bounds": list(self.bounds),
            "features": [
                {"id": int(i), "x": float(p[0]), "y": float(p[1]), "descriptor": descriptor_to_hex(d)}
                for i, p, d in zip(self.ids, self.positions, self.descriptors)
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "FeatureMap":
        try:
            feats = data["features"]
            ids = [f["id"] for f in feats]
            pos = [(f["x"], f["y"]) for f in feats]
            desc = descriptors_from_hex([f["descriptor"] for f in feats])
            return cls(data["bounds"], ids, np.asarray(pos, float).reshape(-1, 2), desc)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"malformed map: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "FeatureMap":
        return cls.from_json(json.loads(Path(path).read_text()))
