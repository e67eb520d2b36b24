"""Visibility-based perception: what the agent can see from its pose.

Detection is ground truth filtered by range, horizontal field of view and wall
occlusion. Other objects never occlude. Clearance counts (``free_ahead`` and
the lateral ones) follow the cardinal heading the agent actually moves along,
and only register low-profile objects when the camera is tilted down.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Iterator

from ddnav.simulator import AgentState, snap_heading
from ddnav.world import CARDINAL_STEPS, CELL_SIZE, OBJECT, WALL, GridPos, Scene


@dataclass(frozen=True)
class PerceptionConfig:
    fov_deg: float = 90.0
    range_m: float = 5.0
    low_range_m: float = 2.0
    low_pitch: int = -30
    p_miss: float = 0.0

    @property
    def range_cells(self) -> int:
        return int(round(self.range_m / CELL_SIZE))


DEFAULT_PERCEPTION = PerceptionConfig()


@dataclass(frozen=True)
class DetectedObject:
    object_id: str
    category: str
    attributes: frozenset[str]
    bearing: float
    distance: float
    visible_extent: int
    cell: GridPos
    low: bool = False

    def to_dict(self) -> dict:
        return {
            "id": self.object_id,
            "category": self.category,
            "attributes": sorted(self.attributes),
            "bearing": round(self.bearing, 1),
            "distance": round(self.distance, 3),
            "visible_extent": self.visible_extent,
            "cell": [self.cell.x, self.cell.z],
        }

    def short(self) -> str:
        return f"{self.category}({self.object_id})@{self.bearing:+.0f}deg,{self.distance:.2f}m"


@dataclass(frozen=True)
class ViewSummary:
    free_ahead: int
    free_left: int
    free_right: int
    detected: tuple[DetectedObject, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "free_ahead": self.free_ahead,
            "free_left": self.free_left,
            "free_right": self.free_right,
            "detected": [d.to_dict() for d in self.detected],
        }


@dataclass(frozen=True)
class RayHit:
    cell: GridPos | None
    content: str
    """``Wall``, ``Object(<id>)`` or ``MaxRange``."""
    cells: int


def normalize_bearing(deg: float) -> float:
    """Wrap into (-180, 180]."""
    b = math.fmod(deg, 360.0)
    if b <= -180.0:
        b += 360.0
    elif b > 180.0:
        b -= 360.0
    return b


def bearing_to(state_pos: GridPos, yaw: float, cell: GridPos) -> float:
    dx, dz = cell.x - state_pos.x, cell.z - state_pos.z
    return normalize_bearing(math.degrees(math.atan2(dx, dz)) - yaw)


def _traverse(start: GridPos, dx: float, dz: float) -> Iterator[GridPos]:
    """Cells crossed by a ray from the centre of ``start`` (Amanatides-Woo).

    When the ray passes exactly through a lattice corner it steps diagonally.
    """
    x, z = start.x, start.z
    step_x = 1 if dx > 0 else -1
    step_z = 1 if dz > 0 else -1
    t_delta_x = abs(1.0 / dx) if dx else math.inf
    t_delta_z = abs(1.0 / dz) if dz else math.inf
    t_max_x = 0.5 * t_delta_x
    t_max_z = 0.5 * t_delta_z
    while True:
        if abs(t_max_x - t_max_z) < 1e-9:
            x += step_x
            z += step_z
            t_max_x += t_delta_x
            t_max_z += t_delta_z
        elif t_max_x < t_max_z:
            x += step_x
            t_max_x += t_delta_x
        else:
            z += step_z
            t_max_z += t_delta_z
        yield GridPos(x, z)


def _unit(heading_deg: float) -> tuple[float, float]:
    rad = math.radians(heading_deg)
    return round(math.sin(rad), 12), round(math.cos(rad), 12)


def raycast(scene: Scene, origin: GridPos, heading: float, max_cells: int) -> RayHit:
    """First non-free cell along ``heading`` within ``max_cells`` traversed cells."""
    dx, dz = _unit(heading)
    for n, cell in enumerate(_traverse(origin, dx, dz), start=1):
        if n > max_cells:
            break
        if not scene.is_free(cell):
            return RayHit(cell, scene.content(cell), n)
    return RayHit(None, "MaxRange", max_cells)


def line_of_sight(scene: Scene, a: GridPos, b: GridPos) -> bool:
    """True if the segment between cell centres reaches ``b`` before any wall."""
    if a == b:
        return True
    dx, dz = b.x - a.x, b.z - a.z
    for cell in _traverse(a, dx, dz):
        if cell == b:
            return True
        if scene.cell(cell) == WALL:
            return False
        if abs(cell.x - a.x) > abs(dx) or abs(cell.z - a.z) > abs(dz):
            return False  # overshot: cannot happen for exact arithmetic, guard anyway


def clearance(scene: Scene, origin: GridPos, heading: int, max_cells: int, see_low: bool = True) -> int:
    """Consecutive passable-looking cells from ``origin`` along a cardinal heading."""
    dx, dz = CARDINAL_STEPS[heading % 360]
    n = 0
    cur = origin
    while n < max_cells:
        cur = cur.offset(dx, dz)
        ch = scene.cell(cur)
        if ch == WALL:
            break
        if ch == OBJECT:
            obj = scene.object_at(cur)
            if see_low or obj is None or not obj.low:
                break
        n += 1
    return n


def observe(scene: Scene, state: AgentState, config: PerceptionConfig = DEFAULT_PERCEPTION,
            rng: random.Random | None = None) -> ViewSummary:
    cfg = config
    heading = snap_heading(state.yaw)
    looking_down = state.pitch <= cfg.low_pitch
    rc = cfg.range_cells
    free_ahead = clearance(scene, state.pos, heading, rc, see_low=looking_down)
    free_left = clearance(scene, state.pos, heading - 90, rc, see_low=looking_down)
    free_right = clearance(scene, state.pos, heading + 90, rc, see_low=looking_down)

    half_fov = cfg.fov_deg / 2.0
    detected = []
    for obj in scene.objects:
        limit = cfg.range_m
        if obj.low and not looking_down:
            limit = min(limit, cfg.low_range_m)
        best: tuple[float, GridPos] | None = None
        visible = 0
        for cell in obj.sorted_footprint():
            dist = math.hypot(cell.x - state.pos.x, cell.z - state.pos.z) * CELL_SIZE
            if dist > limit + 1e-9:
                continue
            if abs(bearing_to(state.pos, state.yaw, cell)) > half_fov + 1e-9:
                continue
            if not line_of_sight(scene, state.pos, cell):
                continue
            visible += 1
            if best is None or dist < best[0]:
                best = (dist, cell)
        if best is None:
            continue
        if cfg.p_miss > 0.0 and rng is not None and rng.random() < cfg.p_miss:
            continue
        detected.append(DetectedObject(
            object_id=obj.id,
            category=obj.category,
            attributes=obj.attributes,
            bearing=bearing_to(state.pos, state.yaw, best[1]),
            distance=best[0],
            visible_extent=visible,
            cell=best[1],
            low=obj.low,
        ))
    detected.sort(key=lambda d: (d.distance, d.object_id))
    return ViewSummary(free_ahead, free_left, free_right, tuple(detected))
