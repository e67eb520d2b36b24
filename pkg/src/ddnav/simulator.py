"""Action execution, success judgement and shortest-path distances."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, replace

from ddnav.errors import UnknownObject, Unreachable
from ddnav.world import CARDINAL_STEPS, CELL_SIZE, GridPos, Scene

SUCCESS_RADIUS = 1.5
SUCCESS_RADIUS_CELLS = int(SUCCESS_RADIUS / CELL_SIZE)
YAW_STEP = 30
PITCH_STEP = 30
PITCH_LIMIT = 60


class Action(str, enum.Enum):
    MoveAhead = "MoveAhead"
    RotateLeft = "RotateLeft"
    RotateRight = "RotateRight"
    LookUp = "LookUp"
    LookDown = "LookDown"
    Done = "Done"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, token: str) -> Action:
        try:
            return cls(token.strip())
        except ValueError:
            raise ValueError(f"unknown action {token!r}") from None


ROTATIONS = (Action.RotateLeft, Action.RotateRight)


def snap_heading(yaw: int) -> int:
    """Cardinal heading (0/90/180/270) nearest to ``yaw``; forward moves use it.

    With 30 degree yaw quanta there are no ties: each cardinal owns the yaws
    within +-30 degrees of it.
    """
    return (round((yaw % 360) / 90) * 90) % 360


def heading_step(yaw: int) -> tuple[int, int]:
    return CARDINAL_STEPS[snap_heading(yaw)]


@dataclass(frozen=True)
class AgentState:
    pos: GridPos
    yaw: int = 0
    pitch: int = 0
    steps_taken: int = 0
    path_length: float = 0.0

    def __post_init__(self) -> None:
        if self.yaw % YAW_STEP or not 0 <= self.yaw < 360:
            raise ValueError(f"yaw must be a multiple of {YAW_STEP} in [0, 360), got {self.yaw}")
        if self.pitch % PITCH_STEP or abs(self.pitch) > PITCH_LIMIT:
            raise ValueError(f"pitch must be a multiple of {PITCH_STEP} in [-60, 60], got {self.pitch}")

    @property
    def heading(self) -> int:
        return snap_heading(self.yaw)

    def ahead(self) -> GridPos:
        dx, dz = heading_step(self.yaw)
        return self.pos.offset(dx, dz)


@dataclass(frozen=True)
class StepOutcome:
    new_state: AgentState
    hindered: bool = False
    terminal: bool = False
    info: str | None = None
    blocked_cell: GridPos | None = None


def step(scene: Scene, state: AgentState, action: Action) -> StepOutcome:
    """Apply one action. Pure: the scene and the input state are untouched."""
    counted = replace(state, steps_taken=state.steps_taken + 1)
    if action is Action.MoveAhead:
        target = state.ahead()
        if scene.is_free(target):
            return StepOutcome(replace(counted, pos=target, path_length=state.path_length + CELL_SIZE))
        return StepOutcome(counted, hindered=True, info=scene.content(target), blocked_cell=target)
    if action is Action.RotateLeft:
        return StepOutcome(replace(counted, yaw=(state.yaw - YAW_STEP) % 360))
    if action is Action.RotateRight:
        return StepOutcome(replace(counted, yaw=(state.yaw + YAW_STEP) % 360))
    if action is Action.LookUp:
        return StepOutcome(replace(counted, pitch=min(state.pitch + PITCH_STEP, PITCH_LIMIT)))
    if action is Action.LookDown:
        return StepOutcome(replace(counted, pitch=max(state.pitch - PITCH_STEP, -PITCH_LIMIT)))
    if action is Action.Done:
        return StepOutcome(counted, terminal=True)
    raise ValueError(f"not an action: {action!r}")


def distance_to_object(scene: Scene, pos: GridPos, object_id: str) -> float:
    """Metres from ``pos`` to the nearest footprint cell of the object."""
    obj = scene.get_object(object_id)
    if obj is None:
        raise UnknownObject(object_id)
    return min(((pos.x - c.x) ** 2 + (pos.z - c.z) ** 2) ** 0.5 for c in obj.footprint) * CELL_SIZE


def within_radius(scene: Scene, pos: GridPos, object_id: str) -> bool:
    return distance_to_object(scene, pos, object_id) <= SUCCESS_RADIUS + 1e-9


@dataclass(frozen=True)
class SuccessJudgement:
    nav_success: bool
    sel_success: bool


def check_success(scene: Scene, state: AgentState, selected_object_id: str | None,
                  demand_attributes: set[str] | frozenset[str], done: bool = True) -> SuccessJudgement:
    """Judge an episode end.

    Navigation succeeds when Done was issued, the selected object satisfies the
    demand, and the agent stands within the success radius of it. Selection
    succeeds on attribute coverage alone.
    """
    if selected_object_id is None:
        return SuccessJudgement(False, False)
    obj = scene.get_object(selected_object_id)
    if obj is None:
        raise UnknownObject(selected_object_id)
    demand = set(demand_attributes)
    sel = bool(demand) and demand <= obj.attributes
    nav = done and sel and within_radius(scene, state.pos, selected_object_id)
    return SuccessJudgement(nav, sel)


def goal_cells(scene: Scene, object_ids: list[str] | str) -> set[GridPos]:
    """Free cells within the success radius of any of the given objects."""
    if isinstance(object_ids, str):
        object_ids = [object_ids]
    r = SUCCESS_RADIUS_CELLS
    out: set[GridPos] = set()
    for oid in object_ids:
        obj = scene.get_object(oid)
        if obj is None:
            raise UnknownObject(oid)
        for c in obj.footprint:
            for dx in range(-r, r + 1):
                for dz in range(-r, r + 1):
                    if dx * dx + dz * dz <= r * r:
                        p = c.offset(dx, dz)
                        if scene.is_free(p):
                            out.add(p)
    return out


def bfs_distances(scene: Scene, start: GridPos) -> dict[GridPos, int]:
    """Move counts from ``start`` to every reachable free cell."""
    dist = {start: 0}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for nxt in scene.free_neighbors(cur):
            if nxt not in dist:
                dist[nxt] = dist[cur] + 1
                queue.append(nxt)
    return dist


def nearest_goal(scene: Scene, start: GridPos, object_ids: list[str] | str) -> tuple[GridPos, int]:
    """Closest (by path) goal cell and its move count; ties go to the smallest cell."""
    goals = goal_cells(scene, object_ids)
    dist = bfs_distances(scene, start)
    reachable = [(dist[g], g) for g in goals if g in dist]
    if not reachable:
        raise Unreachable(f"no free cell within {SUCCESS_RADIUS} m of {object_ids} is reachable from {tuple(start)}")
    moves, cell = min(reachable)
    return cell, moves


def shortest_path_length(scene: Scene, start: GridPos, object_id: str | list[str]) -> float:
    """Metres along the shortest 4-connected path to the object's success radius."""
    if not scene.is_free(start):
        raise ValueError(f"start {tuple(start)} is not free")
    _, moves = nearest_goal(scene, start, object_id)
    return moves * CELL_SIZE
