"""Construction of the "what-to-compare" list of pose pairs."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .synthetic import FleetDataset

CROSS = "cross_drive"
CONSECUTIVE = "consecutive"

PoseKey = tuple[str, int]


@dataclass(frozen=True, order=True)
class PairCandidate:
    a: PoseKey
    b: PoseKey
    kind: str = CROSS

    def __post_init__(self):
        if self.kind == CROSS and self.a[0] == self.b[0]:
            raise ValueError(f"cross-drive pair within one drive: {self}")
        if self.kind == CONSECUTIVE and (self.a[0] != self.b[0] or self.b[1] != self.a[1] + 1):
            raise ValueError(f"not a consecutive pair: {self}")

    @property
    def unordered(self) -> frozenset:
        return frozenset((self.a, self.b))


def _positions(dataset: FleetDataset):
    keys: list[PoseKey] = []
    xy = []
    drive_idx = []
    for k, d in enumerate(dataset.drives):
        for i in range(len(d)):
            keys.append((d.drive_id, i))
        xy.append(d.noisy.xyt[:, :2])
        drive_idx.append(np.full(len(d), k))
    if not keys:
        return keys, np.zeros((0, 2)), np.zeros(0, dtype=int)
    return keys, np.concatenate(xy), np.concatenate(drive_idx)


def eligible_cross_pairs(dataset: FleetDataset, max_distance: float = 20.0) -> list[PairCandidate]:
    """All cross-drive pairs within ``max_distance`` (noisy positions), sorted.

    Candidate search hashes poses into square cells of side ``max_distance``
    and only compares neighbouring cells.
    """
    keys, xy, drive_idx = _positions(dataset)
    cells: dict[tuple[int, int], list[int]] = defaultdict(list)
    cell_of = np.floor(xy / max_distance).astype(np.int64)
    for i, (cx, cy) in enumerate(cell_of):
        cells[(int(cx), int(cy))].append(i)
    d2max = max_distance * max_distance
    out = []
    for (cx, cy), members in cells.items():
        near = []
        for ox in (-1, 0, 1):
            for oy in (-1, 0, 1):
                near.extend(cells.get((cx + ox, cy + oy), ()))
        near = np.array(sorted(near))
        for i in members:
            cand = near[near > i]
            cand = cand[drive_idx[cand] != drive_idx[i]]
            if len(cand) == 0:
                continue
            d2 = np.sum((xy[cand] - xy[i]) ** 2, axis=1)
            for j in cand[d2 <= d2max]:
                a, b = keys[i], keys[int(j)]
                if b < a:
                    a, b = b, a
                out.append(PairCandidate(a, b, CROSS))
    out.sort()
    return out


def consecutive_pairs(dataset: FleetDataset) -> list[PairCandidate]:
    out = []
    for d in dataset.drives:
        out.extend(
            PairCandidate((d.drive_id, i), (d.drive_id, i + 1), CONSECUTIVE) for i in range(len(d) - 1)
        )
    out.sort()
    return out


def sample_pairs(
    dataset: FleetDataset,
    max_distance: float = 20.0,
    rate: float = 0.10,
    seed: int = 0,
) -> list[PairCandidate]:
    """Bernoulli-subsampled cross-drive pairs plus every consecutive pair.

    The result is sorted (cross pairs first, then consecutive) so it does not
    depend on how the search was carried out.
    """
    if not (0.0 < rate <= 1.0):
        raise ValueError(f"rate must be in (0, 1], got {rate}")
    if not (max_distance > 0 and math.isfinite(max_distance)):
        raise ValueError(f"max_distance must be > 0, got {max_distance}")
    eligible = eligible_cross_pairs(dataset, max_distance)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0x9A125]))
    keep = rng.random(len(eligible)) < rate
    cross = [p for p, k in zip(eligible, keep) if k]
    return cross + consecutive_pairs(dataset)


def write_pairs_csv(pairs: Iterable[PairCandidate], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["drive_a", "idx_a", "drive_b", "idx_b", "kind"])
        for p in pairs:
            w.writerow([p.a[0], p.a[1], p.b[0], p.b[1], p.kind])


def read_pairs_csv(path) -> list[PairCandidate]:
    with open(Path(path), newline="") as fh:
        return [
            PairCandidate((r["drive_a"], int(r["idx_a"])), (r["drive_b"], int(r["idx_b"])), r["kind"])
            for r in csv.DictReader(fh)
        ]
