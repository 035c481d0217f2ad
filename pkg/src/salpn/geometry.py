"""Partition planning: concentric square parts, height-aware resizing of the
drone-side parts, the admissible range of the adjustment factor, and the
square-ring baseline used by earlier part-based methods.

All sizes are in feature-map pixels.  Plans are immutable.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

MIN_SIDE = 2


class PartitionClampWarning(UserWarning):
    """A drone part had to be clamped to the minimum side (alpha too large)."""


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def scale_factor(h_drone: float, h_sat: float, alpha: float) -> int:
    """Signed pixel adjustment theta from the drone/satellite height ratio.

    Positive when the drone flies above the satellite reference height,
    which shrinks the drone parts.
    """
    if h_sat <= 0:
        raise ValueError(f"satellite height must be positive, got {h_sat}")
    return round_half_away((h_drone - h_sat) / h_sat * alpha)


def alpha_bounds(h_sat: float, h_drone_max: float, h_drone_min: float,
                 n_parts: int, map_size: int) -> tuple[float, float]:
    """Upper limits on alpha as ``(shrink_bound, expand_bound)``.

    ``shrink_bound`` keeps the smallest drone part at least two pixels wide at
    the highest drone height; ``expand_bound`` stops the smallest part from
    outgrowing the map at the lowest height.  A bound whose height gap is
    zero (or of the wrong sign) is unbounded and reported as ``inf``.
    """
    if n_parts < 1:
        raise ValueError("n_parts must be >= 1")
    if h_sat <= 0:
        raise ValueError("satellite height must be positive")
    half = map_size / 2
    if h_drone_max > h_sat:
        shrink = (half - n_parts) / n_parts * h_sat / (h_drone_max - h_sat)
    else:
        shrink = math.inf
    if h_drone_min < h_sat:
        expand = half * (n_parts - 1) / n_parts * h_sat / (h_sat - h_drone_min)
    else:
        expand = math.inf
    return shrink, expand


def alpha_admissible(alpha: float, h_sat: float, h_drone_max: float, h_drone_min: float,
                     n_parts: int, map_size: int) -> bool:
    return 0 <= alpha <= min(alpha_bounds(h_sat, h_drone_max, h_drone_min, n_parts, map_size))


def estimate_sat_height(h_ref: float, gsd_sat: float, gsd_ref: float) -> float:
    """Satellite height from ground-meters-per-pixel, linear pinhole model.

    ``h_ref`` is the height of a reference drone image whose ground sampling
    distance is ``gsd_ref``.
    """
    if gsd_ref <= 0 or gsd_sat <= 0 or h_ref <= 0:
        raise ValueError("heights and sampling distances must be positive")
    return h_ref * gsd_sat / gsd_ref


@dataclass(frozen=True)
class HeightModel:
    h_drone: float
    h_sat: float
    alpha: float
    h_drone_max: float
    h_drone_min: float
    n_parts: int = 4
    map_size: int = 128

    def __post_init__(self):
        if self.h_sat <= 0:
            raise ValueError("h_sat must be positive")
        if not self.h_drone_min <= self.h_drone <= self.h_drone_max:
            raise ValueError(
                f"h_drone={self.h_drone} outside [{self.h_drone_min}, {self.h_drone_max}]")
        shrink, expand = self.bounds
        if self.alpha < 0 or self.alpha > min(shrink, expand):
            raise ValueError(
                f"alpha={self.alpha} not admissible: shrink bound {shrink:.4g}, "
                f"expand bound {expand:.4g}")

    @property
    def bounds(self) -> tuple[float, float]:
        return alpha_bounds(self.h_sat, self.h_drone_max, self.h_drone_min,
                            self.n_parts, self.map_size)

    @property
    def theta(self) -> int:
        return scale_factor(self.h_drone, self.h_sat, self.alpha)


@dataclass(frozen=True)
class SquareRegion:
    row: int
    col: int
    side: int

    @property
    def area(self) -> int:
        return self.side * self.side

    def contains(self, other: "SquareRegion") -> bool:
        return (self.row <= other.row and self.col <= other.col
                and other.row + other.side <= self.row + self.side
                and other.col + other.side <= self.col + self.side)

    def scaled(self, factor: int) -> "SquareRegion":
        return SquareRegion(self.row * factor, self.col * factor, self.side * factor)


@dataclass(frozen=True)
class PartitionPlan:
    map_size: int
    parts: tuple[SquareRegion, ...]
    theta: int = 0
    clamped: bool = False
    warning: bool = False

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    @property
    def sides(self) -> list[int]:
        return [p.side for p in self.parts]

    def to_dict(self) -> dict:
        return {
            "map_size": self.map_size,
            "theta": self.theta,
            "parts": [{"row": p.row, "col": p.col, "side": p.side} for p in self.parts],
            "clamped": self.clamped,
            "warning": self.warning,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionPlan":
        parts = tuple(SquareRegion(p["row"], p["col"], p["side"]) for p in d["parts"])
        return cls(d["map_size"], parts, d.get("theta", 0), d.get("clamped", False),
                   d.get("warning", False))


def _check_parts(map_size: int, n_parts: int) -> None:
    if map_size < 2:
        raise ValueError("map_size must be >= 2")
    if not 1 <= n_parts <= map_size // 2:
        raise ValueError(f"n_parts must be in [1, {map_size // 2}], got {n_parts}")


def _centered(map_size: int, side: int) -> SquareRegion:
    off = (map_size - side) // 2
    return SquareRegion(off, off, side)


def _base_sides(map_size: int, n_parts: int) -> list[int]:
    return [round_half_away(map_size * n / n_parts) for n in range(1, n_parts + 1)]


def plan_sps(map_size: int, n_parts: int) -> PartitionPlan:
    """N concentric squares with sides ``round(S*n/N)``."""
    _check_parts(map_size, n_parts)
    parts = tuple(_centered(map_size, s) for s in _base_sides(map_size, n_parts))
    return PartitionPlan(map_size, parts, theta=0)


def plan_haas(map_size: int, n_parts: int, theta: int) -> PartitionPlan:
    """Drone-side squares shrunk (theta > 0) or grown (theta < 0) by 2*theta.

    Sides are clamped into ``[2, map_size]``.  Growing past the map is the
    expected saturation towards the global part; shrinking below two pixels
    means alpha was outside its bounds and sets ``warning`` on the plan.
    """
    _check_parts(map_size, n_parts)
    theta = int(theta)
    raw = [s - 2 * theta for s in _base_sides(map_size, n_parts)]
    sides = [min(max(s, MIN_SIDE), map_size) for s in raw]
    clamped = sides != raw
    warn = any(s < MIN_SIDE for s in raw)
    if warn:
        warnings.warn(
            f"theta={theta} shrinks a part below {MIN_SIDE} px on a {map_size} px map",
            PartitionClampWarning, stacklevel=2)
    parts = tuple(_centered(map_size, s) for s in sides)
    return PartitionPlan(map_size, parts, theta=theta, clamped=clamped, warning=warn)


def plan_square_ring(map_size: int, n_parts: int) -> list[np.ndarray]:
    """Disjoint square rings (boolean masks) whose union is the whole map."""
    plan = plan_sps(map_size, n_parts)
    rings = []
    inner = np.zeros((map_size, map_size), dtype=bool)
    for p in plan.parts:
        solid = region_mask(map_size, p)
        rings.append(solid & ~inner)
        inner = solid
    return rings


def region_mask(map_size: int, region: SquareRegion) -> np.ndarray:
    m = np.zeros((map_size, map_size), dtype=bool)
    m[region.row:region.row + region.side, region.col:region.col + region.side] = True
    return m


def extract_partitions(t: np.ndarray, plan: PartitionPlan) -> list[np.ndarray]:
    """Slice a square ``(C, S, S)`` map into the plan's part-level maps (views)."""
    t = np.asarray(t)
    if t.ndim != 3 or t.shape[1] != t.shape[2] or t.shape[1] != plan.map_size:
        raise ValueError(f"tensor shape {t.shape} does not match plan map size {plan.map_size}")
    return [t[:, p.row:p.row + p.side, p.col:p.col + p.side] for p in plan.parts]
