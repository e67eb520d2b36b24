"""Knowledge base of navigation experiences.

Experiences are appended to a JSONL file, one record per line, each carrying a
schema version. Records come from two sources: bootstrapping (replaying
A*-optimal trajectories and recording a decision at every tick where the
target is in view) and reflection (corrected decisions after a collision).
"""

from __future__ import annotations

import fcntl
import heapq
import itertools
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from ddnav.errors import EmptyKnowledgeBase, NoPath, StorageError, ValidationError
from ddnav.perception import DEFAULT_PERCEPTION, DetectedObject, PerceptionConfig, ViewSummary, observe
from ddnav.policy import describe_view
from ddnav.simulator import Action, AgentState, nearest_goal, snap_heading, step
from ddnav.triple import DecisionTriple
from ddnav.world import CARDINAL_STEPS, GridPos, Scene

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SOURCES = ("bootstrap", "reflection")


@dataclass(frozen=True)
class Experience:
    scene: str
    instruction: str
    matched_object: dict | None
    view_digest: dict
    description: str
    reasoning: str
    decision: tuple[Action, ...]
    source: str
    round: int = 0
    pose: dict = field(default_factory=dict)
    hindrance: dict | None = None

    def validate(self) -> None:
        if not self.decision:
            raise ValidationError("experience decision is empty")
        for a in self.decision:
            if not isinstance(a, Action):
                try:
                    Action(a)
                except ValueError:
                    raise ValidationError(f"invalid action token {a!r} in decision") from None
        if self.source not in SOURCES:
            raise ValidationError(f"unknown experience source {self.source!r}")
        if self.source == "reflection" and not self.hindrance:
            raise ValidationError("reflection experiences must carry hindrance info")
        if self.round < 0:
            raise ValidationError("round must be >= 0")

    def to_dict(self) -> dict:
        return {
            "v": SCHEMA_VERSION,
            "scene": self.scene,
            "instruction": self.instruction,
            "matched_object": self.matched_object,
            "view_digest": self.view_digest,
            "description": self.description,
            "reasoning": self.reasoning,
            "decision": [a.value if isinstance(a, Action) else str(a) for a in self.decision],
            "source": self.source,
            "round": self.round,
            "pose": self.pose,
            "hindrance": self.hindrance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Experience:
        if d.get("v") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported experience schema version {d.get('v')!r}")
        try:
            decision = tuple(Action(a) for a in d["decision"])
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
        exp = cls(
            scene=d["scene"],
            instruction=d["instruction"],
            matched_object=d.get("matched_object"),
            view_digest=d["view_digest"],
            description=d["description"],
            reasoning=d["reasoning"],
            decision=decision,
            source=d["source"],
            round=int(d.get("round", 0)),
            pose=d.get("pose") or {},
            hindrance=d.get("hindrance"),
        )
        exp.validate()
        return exp

    def to_line(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    def triple(self) -> DecisionTriple:
        mode = "reflect" if self.source == "reflection" else "exploit"
        if mode == "exploit" and len(self.decision) != 1:
            mode = "explore"
        return DecisionTriple(self.description, self.reasoning, self.decision, mode)


def target_info(det: DetectedObject | None) -> dict | None:
    if det is None:
        return None
    return {"id": det.object_id, "category": det.category, "bearing": round(det.bearing, 1),
            "distance": round(det.distance, 3)}


def pose_of(state: AgentState) -> dict:
    return {"x": state.pos.x, "z": state.pos.z, "yaw": state.yaw, "pitch": state.pitch}


class KnowledgeBase:
    """Append-only JSONL store. Appends are serialized by a thread lock and an
    advisory file lock, so concurrent writers never interleave lines."""

    def __init__(self, path: str | Path, *, fsync: bool = True):
        self.path = Path(path)
        self.fsync = fsync
        self._lock = threading.Lock()
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.touch(exist_ok=True)
        except OSError as exc:
            raise StorageError(f"cannot open knowledge base at {self.path}: {exc}") from exc
        records = self.read()
        self.count = len(records)
        self.rounds: dict[int, int] = {}
        for r in records:
            self.rounds[r.round] = self.rounds.get(r.round, 0) + 1

    def __len__(self) -> int:
        return self.count

    def append(self, exp: Experience) -> int:
        exp.validate()
        line = exp.to_line().encode("utf-8")
        with self._lock:
            try:
                fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
                try:
                    fcntl.flock(fd, fcntl.LOCK_EX)
                    os.write(fd, line)
                    if self.fsync:
                        os.fsync(fd)
                finally:
                    fcntl.flock(fd, fcntl.LOCK_UN)
                    os.close(fd)
            except OSError as exc:
                raise StorageError(f"append to {self.path} failed: {exc}") from exc
            self.count += 1
            self.rounds[exp.round] = self.rounds.get(exp.round, 0) + 1
            return self.count

    def extend(self, exps: Iterable[Experience]) -> int:
        for e in exps:
            self.append(e)
        return self.count

    def read(self) -> list[Experience]:
        out = []
        try:
            text = self.path.read_text(encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot read {self.path}: {exc}") from exc
        for n, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                out.append(Experience.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValidationError) as exc:
                raise StorageError(f"{self.path}:{n}: corrupt experience record: {exc}") from exc
        return out


def reflection_memo(experiences: Iterable[Experience]) -> dict[str, dict[tuple[GridPos, int], DecisionTriple]]:
    """Per-scene map from ``(cell, heading)`` to the corrected decision learnt there.

    The first record for a key wins, so the memo does not depend on how many
    times the same collision was repeated.
    """
    memo: dict[str, dict[tuple[GridPos, int], DecisionTriple]] = {}
    for e in experiences:
        if e.source != "reflection" or not e.pose:
            continue
        key = (GridPos(e.pose["x"], e.pose["z"]), snap_heading(e.pose["yaw"]))
        memo.setdefault(e.scene, {}).setdefault(key, e.triple())
    return memo


# --------------------------------------------------------------------------- A* planning


def astar_cells(scene: Scene, start: GridPos, goal: GridPos) -> list[GridPos]:
    """Optimal 4-connected cell path (unit cost, Manhattan heuristic)."""
    if not scene.is_free(start):
        raise NoPath(f"start {tuple(start)} is not free")
    if not scene.is_free(goal):
        raise NoPath(f"goal {tuple(goal)} is not free")
    counter = itertools.count()
    def h(p: GridPos) -> int:
        return abs(p.x - goal.x) + abs(p.z - goal.z)
    open_heap = [(h(start), 0, next(counter), start)]
    g = {start: 0}
    parent: dict[GridPos, GridPos] = {}
    closed: set[GridPos] = set()
    while open_heap:
        _, gc, _, cur = heapq.heappop(open_heap)
        if cur in closed:
            continue
        if cur == goal:
            path = [cur]
            while cur in parent:
                cur = parent[cur]
                path.append(cur)
            return path[::-1]
        closed.add(cur)
        for nxt in scene.free_neighbors(cur):
            ng = gc + 1
            if ng < g.get(nxt, 1 << 30):
                g[nxt] = ng
                parent[nxt] = cur
                heapq.heappush(open_heap, (ng + h(nxt), ng, next(counter), nxt))
    raise NoPath(f"no path from {tuple(start)} to {tuple(goal)}")


def _heading_of(a: GridPos, b: GridPos) -> int:
    step_ = (b.x - a.x, b.z - a.z)
    for heading, d in CARDINAL_STEPS.items():
        if d == step_:
            return heading
    raise ValueError(f"{a} -> {b} is not a unit move")


def rotations_between(yaw: int, target: int) -> list[Action]:
    """Shortest rotation sequence from ``yaw`` to ``target`` (180 deg turns go right)."""
    diff = (target - yaw) % 360
    if diff <= 180:
        return [Action.RotateRight] * (diff // 30)
    return [Action.RotateLeft] * ((360 - diff) // 30)


def cells_to_actions(path: list[GridPos], yaw: int) -> list[Action]:
    actions: list[Action] = []
    for a, b in zip(path, path[1:]):
        heading = _heading_of(a, b)
        if snap_heading(yaw) != heading:
            actions.extend(rotations_between(yaw, heading))
            yaw = heading
        actions.append(Action.MoveAhead)
    return actions


def plan_astar(scene: Scene, start: AgentState, goal: GridPos) -> list[Action]:
    """Action sequence driving the agent from ``start`` to ``goal`` along an optimal path."""
    return cells_to_actions(astar_cells(scene, start.pos, goal), start.yaw)


def plan_to_object(scene: Scene, start: AgentState, object_id: str) -> list[Action]:
    goal, _ = nearest_goal(scene, start.pos, object_id)
    return plan_astar(scene, start, goal)


# --------------------------------------------------------------------------- bootstrap


Annotator = Callable[[ViewSummary, DetectedObject, Action], tuple[str, str]]


def rule_annotation(view: ViewSummary, target: DetectedObject, action: Action) -> tuple[str, str]:
    desc = describe_view(view)
    if action is Action.Done:
        why = f"{target.category} is {target.distance:.2f} m away, within reach, so the search is finished."
    elif action is Action.MoveAhead:
        why = (f"{target.category} is at {target.bearing:+.0f} deg, {target.distance:.2f} m. The next cell on the "
               f"shortest route is straight ahead and free, so move forward.")
    else:
        side = "left" if action is Action.RotateLeft else "right"
        why = (f"{target.category} is at {target.bearing:+.0f} deg, {target.distance:.2f} m. The shortest route "
               f"turns {side} here to get around the layout, so rotate {side}.")
    return desc, why


def bootstrap(scene: Scene, instruction: str, target_object: str, *, spawn_index: int = 0, start_yaw: int = 0,
              annotator: Annotator = rule_annotation, perception: PerceptionConfig = DEFAULT_PERCEPTION,
              round: int = 0) -> list[Experience]:
    """Replay the optimal trajectory to ``target_object`` and record one
    experience per tick at which the target is visible."""
    state = AgentState(scene.spawn_points[spawn_index], start_yaw)
    plan = plan_to_object(scene, state, target_object) + [Action.Done]
    out: list[Experience] = []
    for action in plan:
        view = observe(scene, state, perception)
        det = next((d for d in view.detected if d.object_id == target_object), None)
        if det is not None:
            desc, why = annotator(view, det, action)
            out.append(Experience(
                scene=scene.name,
                instruction=instruction,
                matched_object=target_info(det),
                view_digest=view.to_dict(),
                description=desc,
                reasoning=why,
                decision=(action,),
                source="bootstrap",
                round=round,
                pose=pose_of(state),
            ))
        outcome = step(scene, state, action)
        if outcome.hindered:
            raise NoPath(f"bootstrap plan collided at {tuple(state.pos)} in {scene.name}")
        state = outcome.new_state
    return out


# --------------------------------------------------------------------------- SFT export


def sft_record(exp: Experience) -> dict:
    target = exp.matched_object
    if target:
        q_target = (f"Target object: {target['category']} at bearing {target['bearing']:+.0f} deg, "
                    f"distance {target['distance']:.2f} m.")
    else:
        q_target = "Target object: none in view."
    view = exp.view_digest
    seen = ", ".join(f"{d['category']}@{d['bearing']:+.0f}deg,{d['distance']:.2f}m" for d in view.get("detected", []))
    question = (f"Demand: {exp.instruction}\n{q_target}\nView: free ahead {view.get('free_ahead')}, "
                f"left {view.get('free_left')}, right {view.get('free_right')}; visible: {seen or 'nothing'}.\n"
                f"What should the robot do next?")
    answer = (f"Description: {exp.description}\nReasoning: {exp.reasoning}\n"
              f"Decision: {', '.join(a.value for a in exp.decision)}")
    return {"question": question, "answer": answer, "source": exp.source}


def export_sft(kb: KnowledgeBase, path: str | Path) -> int:
    exps = kb.read()
    if not exps:
        raise EmptyKnowledgeBase(f"{kb.path} holds no experiences")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for e in exps:
                fh.write(json.dumps(sft_record(e), sort_keys=True) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    return len(exps)
