"""Dual-process decision core.

The heuristic process branches on the match result: with no matched object it
explores (multi-action plans consumed one action per tick), otherwise it
exploits (one action per tick toward the nearest target). A blocked forward
move triggers the analytic process, which produces a corrected decision and a
knowledge-base experience.

Reasoners are pluggable. ``RuleReasoner`` is deterministic and is also the
fallback for remote reasoners, so an episode never stalls on backend trouble.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Protocol

from ddnav.demand import DemandQuery, MatchResult, format_match_reply, match, match_llm, objects_text
from ddnav.errors import BackendError, ParseError, UnknownDemand
from ddnav.llm import ChatClient, PromptTemplate, load_templates, render
from ddnav.perception import DetectedObject, ViewSummary, bearing_to
from ddnav.simulator import ROTATIONS, SUCCESS_RADIUS, Action, AgentState, snap_heading
from ddnav.triple import DecisionTriple, format_triple, parse_triple
from ddnav.world import CARDINAL_STEPS, CELL_SIZE, DemandOntology, GridPos

logger = logging.getLogger(__name__)

BEARING_TOLERANCE = 15.0
EXPLORE_CAP = 6
EXPLORE_MOVES = 4
BYPASS_LIMIT = 16
OPEN_ASSUMED = 20  # clearance assumed when the description stage is ablated

L, R = Action.RotateLeft, Action.RotateRight


def opposite(rot: Action) -> Action:
    return R if rot is L else L


def turn(heading: int, rot: Action) -> int:
    return (heading + (-90 if rot is L else 90)) % 360


def turns_to_new_heading(yaw: int, rot: Action) -> int:
    """Rotations in direction ``rot`` until the movement heading changes (1-3)."""
    h0 = snap_heading(yaw)
    delta = -30 if rot is L else 30
    n, y = 0, yaw
    while True:
        y = (y + delta) % 360
        n += 1
        if snap_heading(y) != h0:
            return n


def wider_side(view: ViewSummary) -> Action:
    """Side with more lateral clearance; ties go Left."""
    return R if view.free_right > view.free_left else L


def rotation_runs(history: tuple[Action, ...] | list[Action]) -> list[tuple[Action, int]]:
    """Run-length compress the rotations in ``history`` (moves are skipped)."""
    runs: list[tuple[Action, int]] = []
    for a in history:
        if a not in ROTATIONS:
            continue
        if runs and runs[-1][0] is a:
            runs[-1] = (a, runs[-1][1] + 1)
        else:
            runs.append((a, 1))
    return runs


def describe_view(view: ViewSummary) -> str:
    seen = ", ".join(d.short() for d in view.detected[:6]) or "no objects"
    return (f"Free cells ahead {view.free_ahead}, left {view.free_left}, right {view.free_right}; "
            f"visible: {seen}.")


# --------------------------------------------------------------------------- contexts


@dataclass(frozen=True)
class ExploreContext:
    view: ViewSummary
    history: tuple[Action, ...] = ()
    recent_rotations: tuple[tuple[Action, int], ...] = ()
    obstacle_flag: bool = False
    yaw: int = 0

    @classmethod
    def build(cls, view: ViewSummary, history, obstacle_flag: bool, yaw: int, window: int = 8) -> ExploreContext:
        hist = tuple(history)[-window:]
        return cls(view, hist, tuple(rotation_runs(hist)), obstacle_flag, yaw)

    def to_dict(self) -> dict:
        return {
            "view": self.view.to_dict(),
            "history": [a.value for a in self.history],
            "recent_rotations": [[a.value, n] for a, n in self.recent_rotations],
            "obstacle": self.obstacle_flag,
            "yaw": self.yaw,
        }


@dataclass(frozen=True)
class Bypass:
    """A detour around something blocking the way to the target."""

    side: Action
    blocked_heading: int
    moves: int = 0

    def to_dict(self) -> dict:
        return {"side": self.side.value, "blocked_heading": self.blocked_heading, "moves": self.moves}

    @classmethod
    def from_dict(cls, d: dict | None) -> Bypass | None:
        if not d:
            return None
        return cls(Action(d["side"]), int(d["blocked_heading"]), int(d["moves"]))


@dataclass(frozen=True)
class ExploitContext:
    yaw: int = 0
    bypass: Bypass | None = None
    history: tuple[Action, ...] = ()

    def to_dict(self) -> dict:
        return {
            "yaw": self.yaw,
            "bypass": self.bypass.to_dict() if self.bypass else None,
            "history": [a.value for a in self.history],
        }


@dataclass(frozen=True)
class Hindrance:
    cell: GridPos
    content: str
    category: str | None
    bearing: float
    distance: float

    def to_dict(self) -> dict:
        return {"cell": [self.cell.x, self.cell.z], "content": self.content, "category": self.category,
                "bearing": self.bearing, "distance": self.distance}

    def short(self) -> str:
        what = self.category or self.content
        return f"{what} at {self.distance:.2f} m, bearing {self.bearing:+.0f} deg"


@dataclass(frozen=True)
class ReflectionInput:
    prior_triple: DecisionTriple
    failed_action: Action
    matched: MatchResult
    hindrance: Hindrance
    view: ViewSummary

    def to_dict(self) -> dict:
        return {
            "prior": self.prior_triple.to_dict(),
            "failed_action": self.failed_action.value,
            "matched": [d.to_dict() for d in self.matched.matched],
            "hindrance": self.hindrance.to_dict(),
            "view": self.view.to_dict(),
        }


# --------------------------------------------------------------------------- rule backends


def explore_rule(ctx: ExploreContext) -> DecisionTriple:
    view = ctx.view
    desc = describe_view(view)
    runs = ctx.recent_rotations or tuple(rotation_runs(ctx.history))
    if ctx.obstacle_flag:
        side = wider_side(view)
        plan = [side] * turns_to_new_heading(ctx.yaw, side)
        why = (f"The last move was blocked. More room to the {'left' if side is L else 'right'} "
               f"({max(view.free_left, view.free_right)} cells), so turn that way and retry.")
    elif view.free_ahead >= 2:
        plan = [Action.MoveAhead] * min(view.free_ahead, EXPLORE_MOVES)
        why = f"No target in view and {view.free_ahead} free cells ahead; advance to reveal new space."
    else:
        side = _anti_thrash(ctx.history, runs, view)
        plan = [side] * turns_to_new_heading(ctx.yaw, side)
        last = runs[-1][0].value if runs else "none"
        why = (f"The way ahead is closed. Last rotation run was {last}; "
               f"turn {'left' if side is L else 'right'} to face a new direction.")
    return DecisionTriple(desc, why, tuple(plan[:EXPLORE_CAP]), "explore")


def _anti_thrash(history, runs, view: ViewSummary) -> Action:
    """Direction for a blocked-ahead turn.

    Turn opposite to the last rotation run. If the last two runs already
    alternated without any forward move in between, keep the last direction
    instead so the agent does not swing back and forth between two dead ends.
    """
    if not runs:
        return wider_side(view)
    last = runs[-1][0]
    if len(runs) >= 2 and _alternated_in_place(history):
        return last
    return opposite(last)


def _alternated_in_place(history) -> bool:
    seq = [a for a in history if a in ROTATIONS or a is Action.MoveAhead]
    # walk back over the last run, then the previous run; a MoveAhead anywhere breaks it
    i = len(seq) - 1
    if i < 0 or seq[i] not in ROTATIONS:
        return False
    last = seq[i]
    while i >= 0 and seq[i] is last:
        i -= 1
    if i < 0 or seq[i] is not opposite(last):
        return False
    return True


def _target_of(matched: MatchResult) -> DetectedObject:
    target = matched.nearest()
    if target is None:
        raise ValueError("exploit needs a non-empty match")
    return target


def _lateral_toward(view: ViewSummary, bypass: Bypass) -> int:
    """Clearance on the side facing the original (blocked) heading."""
    return view.free_right if bypass.side is L else view.free_left


def _resolve_bypass(bypass: Bypass | None, view: ViewSummary, yaw: int) -> Bypass | None:
    if bypass is None:
        return None
    if bypass.moves >= BYPASS_LIMIT:
        return None
    want = turn(bypass.blocked_heading, bypass.side)
    if snap_heading(yaw) == want and bypass.moves >= 1 and _lateral_toward(view, bypass) >= 1:
        return None
    return bypass


def _exploit_core(view: ViewSummary, target: DetectedObject, yaw: int,
                  bypass: Bypass | None) -> tuple[Action, str]:
    if target.distance <= SUCCESS_RADIUS + 1e-9:
        return Action.Done, f"{target.object_id} is {target.distance:.2f} m away, within reach."
    if bypass is not None:
        want = turn(bypass.blocked_heading, bypass.side)
        if snap_heading(yaw) != want:
            return bypass.side, "Detouring around the obstruction; keep turning to the detour heading."
        if view.free_ahead >= 1:
            return Action.MoveAhead, "On the detour heading with room ahead; sidestep past the obstruction."
        return opposite(bypass.side), "The detour is closed as well; turn back to try the other side."
    if abs(target.bearing) > BEARING_TOLERANCE:
        rot = R if target.bearing > 0 else L
        return rot, (f"{target.object_id} is at {target.bearing:+.0f} deg; "
                     f"turn {'right' if rot is R else 'left'} to face it.")
    if view.free_ahead == 0:
        side = wider_side(view)
        return side, (f"{target.object_id} is straight ahead but the next cell is blocked; turn toward the "
                      f"{'left' if side is L else 'right'} where there is more room.")
    return Action.MoveAhead, f"{target.object_id} is ahead ({target.distance:.2f} m) with a clear path."


def advance_bypass(bypass: Bypass | None, view: ViewSummary, target: DetectedObject, yaw: int,
                   action: Action) -> Bypass | None:
    """Detour state after ``action`` was chosen in this view; same rules for every backend."""
    bypass = _resolve_bypass(bypass, view, yaw)
    if action is Action.Done:
        return None
    if bypass is None:
        aligned = abs(target.bearing) <= BEARING_TOLERANCE
        if action in ROTATIONS and aligned and view.free_ahead == 0:
            return Bypass(action, snap_heading(yaw))
        return None
    want = turn(bypass.blocked_heading, bypass.side)
    if action is Action.MoveAhead:
        return replace(bypass, moves=bypass.moves + 1)
    if snap_heading(yaw) == want and view.free_ahead == 0 and action is opposite(bypass.side):
        return Bypass(action, bypass.blocked_heading, bypass.moves)
    return bypass


def exploit_rule(view: ViewSummary, matched: MatchResult, yaw: int = 0,
                 bypass: Bypass | None = None) -> DecisionTriple:
    """Single-action approach toward the nearest matched object.

    Within reach: Done. Off-axis by more than 15 degrees: turn toward it.
    Aligned but blocked: turn toward the wider side. Otherwise: MoveAhead.
    An active ``bypass`` overrides the turn-toward rule until the obstruction
    has been sidestepped.
    """
    target = _target_of(matched)
    action, why = _exploit_core(view, target, yaw, _resolve_bypass(bypass, view, yaw))
    desc = describe_view(view)
    return DecisionTriple(desc, why, (action,), "exploit")


def generic_exploit_rule(view: ViewSummary, matched: MatchResult) -> DecisionTriple:
    """Stateless approach rule used when the tuned exploit backend is ablated."""
    target = _target_of(matched)
    action, why = _exploit_core(view, target, 0, None)
    return DecisionTriple(describe_view(view), why, (action,), "exploit")


def generic_sequence_rule(view: ViewSummary, matched: MatchResult, yaw: int) -> DecisionTriple:
    """Open-loop plan toward the target: turn to face it, then walk the distance."""
    target = _target_of(matched)
    if target.distance <= SUCCESS_RADIUS + 1e-9:
        return DecisionTriple(describe_view(view), "Target within reach.", (Action.Done,), "explore")
    plan: list[Action] = []
    b = target.bearing
    while abs(b) > BEARING_TOLERANCE and len(plan) < 5:
        rot = R if b > 0 else L
        plan.append(rot)
        b -= 30 if rot is R else -30
    cells = max(1, int(round((target.distance - SUCCESS_RADIUS) / CELL_SIZE)) + 1)
    plan.extend([Action.MoveAhead] * max(1, min(cells, EXPLORE_CAP - len(plan))))
    return DecisionTriple(describe_view(view), f"Plan a path to {target.object_id} in one go.",
                          tuple(plan[:EXPLORE_CAP]), "explore")


def reflect_rule(inp: ReflectionInput) -> DecisionTriple:
    """Correct a blocked move: turn toward the side with the most clearance (ties Left)."""
    view = inp.view
    side = wider_side(view)
    h = inp.hindrance
    desc = (f"The cell ahead is occupied by {h.category or h.content}; free cells left {view.free_left}, "
            f"right {view.free_right}.")
    why = (f"The previous decision {inp.failed_action.value} assumed the way ahead was passable, but "
           f"{h.category or h.content} blocks it. Turn {'left' if side is L else 'right'} toward the wider gap "
           f"before moving again.")
    return DecisionTriple(desc, why, (side,), "reflect")


def _no_cot_view(view: ViewSummary) -> ViewSummary:
    return replace(view, free_ahead=OPEN_ASSUMED, free_left=OPEN_ASSUMED, free_right=OPEN_ASSUMED)


# --------------------------------------------------------------------------- reasoners


@dataclass(frozen=True)
class ReasonerFlags:
    no_cot: bool = False
    no_exploit_ft: bool = False
    exploit_sequence: bool = False


class Reasoner(Protocol):
    flags: ReasonerFlags

    def match(self, query: DemandQuery) -> MatchResult: ...

    def explore(self, ctx: ExploreContext) -> DecisionTriple: ...

    def exploit(self, view: ViewSummary, matched: MatchResult, ctx: ExploitContext) -> DecisionTriple: ...

    def reflect(self, inp: ReflectionInput) -> DecisionTriple: ...


class RuleReasoner:
    """Deterministic reasoner; decisions depend only on their inputs."""

    def __init__(self, ontology: DemandOntology, flags: ReasonerFlags | None = None):
        self.ontology = ontology
        self.flags = flags or ReasonerFlags()

    def match(self, query: DemandQuery) -> MatchResult:
        return match(self.ontology, query)

    def explore(self, ctx: ExploreContext) -> DecisionTriple:
        if self.flags.no_cot:
            ctx = replace(ctx, view=_no_cot_view(ctx.view))
            t = explore_rule(ctx)
            return replace(t, description="", reasoning="")
        return explore_rule(ctx)

    def exploit(self, view: ViewSummary, matched: MatchResult, ctx: ExploitContext) -> DecisionTriple:
        if self.flags.no_exploit_ft:
            if self.flags.exploit_sequence:
                return generic_sequence_rule(view, matched, ctx.yaw)
            return generic_exploit_rule(view, matched)
        if self.flags.no_cot:
            t = exploit_rule(_no_cot_view(view), matched, ctx.yaw, None)
            return replace(t, description="", reasoning="")
        return exploit_rule(view, matched, ctx.yaw, ctx.bypass)

    def reflect(self, inp: ReflectionInput) -> DecisionTriple:
        if self.flags.no_cot:
            return DecisionTriple("", "", (L,), "reflect")
        return reflect_rule(inp)


def _context_json(kind: str, payload: dict) -> str:
    return "CONTEXT " + json.dumps({"kind": kind, **payload}, sort_keys=True)


class LLMReasoner:
    """Reasoner backed by a chat-completions endpoint.

    Every call renders the matching template as the system prompt and sends the
    structured context as JSON in the user message. Transport or parse failures
    fall back to the rule reasoner and are counted in ``fallbacks``.
    """

    def __init__(self, client: ChatClient, ontology: DemandOntology,
                 templates: dict[str, PromptTemplate] | None = None, flags: ReasonerFlags | None = None):
        self.client = client
        self.templates = templates or load_templates()
        self.flags = flags or ReasonerFlags()
        self.fallback = RuleReasoner(ontology, self.flags)
        self.fallbacks = 0
        self.warnings: list[str] = []

    def _ask(self, name: str, bindings: dict, kind: str, payload: dict, mode: str) -> DecisionTriple:
        system = render(self.templates[name], bindings)
        reply = self.client.complete(system, _context_json(kind, payload))
        return parse_triple(reply, require_cot=not self.flags.no_cot, mode=mode)

    def _fail(self, what: str, exc: Exception) -> None:
        self.fallbacks += 1
        msg = f"{what}: {exc}"
        self.warnings.append(msg)
        logger.warning("reasoner fallback (%s)", msg)

    def match(self, query: DemandQuery) -> MatchResult:
        result = match_llm(self.client, self.templates["P_m"], query)
        self.warnings.extend(result.warnings)
        return result

    def explore(self, ctx: ExploreContext) -> DecisionTriple:
        bindings = {
            "view": describe_view(ctx.view),
            "history": ", ".join(a.value for a in ctx.history) or "none",
            "rotations": ", ".join(a.value for a, _ in ctx.recent_rotations) or "none",
            "obstacle": "yes" if ctx.obstacle_flag else "no",
        }
        try:
            t = self._ask("P_e", bindings, "explore", {**ctx.to_dict(), "no_cot": self.flags.no_cot}, "explore")
        except (BackendError, ParseError) as exc:
            self._fail("explore", exc)
            return self.fallback.explore(ctx)
        if len(t.decision) > EXPLORE_CAP:
            t = replace(t, decision=t.decision[:EXPLORE_CAP])
        return t

    def exploit(self, view: ViewSummary, matched: MatchResult, ctx: ExploitContext) -> DecisionTriple:
        sequence = self.flags.no_exploit_ft and self.flags.exploit_sequence
        bindings = {
            "view": describe_view(view),
            "objects": "; ".join(d.short() for d in matched.matched),
            "bypass": json.dumps(ctx.bypass.to_dict()) if ctx.bypass else "none",
        }
        payload = {
            "view": view.to_dict(),
            "matched": [d.to_dict() for d in matched.matched],
            "properties": sorted(matched.properties),
            **ctx.to_dict(),
            "no_cot": self.flags.no_cot,
            "generic": self.flags.no_exploit_ft,
            "sequence": sequence,
        }
        try:
            return self._ask("P_x", bindings, "exploit", payload, "explore" if sequence else "exploit")
        except (BackendError, ParseError) as exc:
            self._fail("exploit", exc)
            return self.fallback.exploit(view, matched, ctx)

    def reflect(self, inp: ReflectionInput) -> DecisionTriple:
        bindings = {
            "previous": format_triple(inp.prior_triple).strip(),
            "hindrance": inp.hindrance.short(),
            "view": describe_view(inp.view),
            "objects": objects_text(inp.matched.matched),
        }
        try:
            t = self._ask("P_r", bindings, "reflect", {**inp.to_dict(), "no_cot": self.flags.no_cot}, "reflect")
        except (BackendError, ParseError) as exc:
            self._fail("reflect", exc)
            return self.fallback.reflect(inp)
        if t.decision[0] is inp.failed_action:
            self._fail("reflect", ParseError("corrected decision repeats the blocked action"))
            return self.fallback.reflect(inp)
        return replace(t, mode="reflect")


# --------------------------------------------------------------------------- faithful mock responder


def _view_from_dict(d: dict) -> ViewSummary:
    dets = tuple(_det_from_dict(o) for o in d.get("detected", []))
    return ViewSummary(d["free_ahead"], d["free_left"], d["free_right"], dets)


def _det_from_dict(o: dict) -> DetectedObject:
    return DetectedObject(o["id"], o["category"], frozenset(o["attributes"]), float(o["bearing"]),
                          float(o["distance"]), int(o["visible_extent"]), GridPos(*o["cell"]))


def rule_responder(ontology: DemandOntology):
    """Chat responder that answers every prompt the way ``RuleReasoner`` would.

    Used with ``MockChatServer`` to drive the remote-reasoner code path offline;
    with it, the remote path must reproduce the rule path decision for decision.
    """

    def respond(messages: list[dict]) -> str:
        user = messages[-1]["content"]
        if not user.startswith("CONTEXT "):
            # demand prompt
            data = json.loads(user)
            dets = tuple(_det_from_dict(o) for o in data["detected"])
            try:
                result = match(ontology, DemandQuery(data["instruction"], dets))
            except UnknownDemand:
                return "Attributes: \nObjects: none\n"
            return format_match_reply(result)
        data = json.loads(user[len("CONTEXT "):])
        flags = ReasonerFlags(no_cot=data.get("no_cot", False), no_exploit_ft=data.get("generic", False),
                              exploit_sequence=data.get("sequence", False))
        rr = RuleReasoner(ontology, flags)
        kind = data["kind"]
        if kind == "explore":
            ctx = ExploreContext(
                _view_from_dict(data["view"]),
                tuple(Action(a) for a in data["history"]),
                tuple((Action(a), n) for a, n in data["recent_rotations"]),
                bool(data["obstacle"]),
                int(data["yaw"]),
            )
            t = rr.explore(ctx)
        elif kind == "exploit":
            view = _view_from_dict(data["view"])
            matched = MatchResult(frozenset(data["properties"]), tuple(_det_from_dict(o) for o in data["matched"]))
            ctx = ExploitContext(int(data["yaw"]), Bypass.from_dict(data["bypass"]),
                                 tuple(Action(a) for a in data["history"]))
            t = rr.exploit(view, matched, ctx)
        elif kind == "reflect":
            h = data["hindrance"]
            inp = ReflectionInput(
                DecisionTriple.from_dict(data["prior"]),
                Action(data["failed_action"]),
                MatchResult(frozenset(), tuple(_det_from_dict(o) for o in data["matched"])),
                Hindrance(GridPos(*h["cell"]), h["content"], h["category"], h["bearing"], h["distance"]),
                _view_from_dict(data["view"]),
            )
            t = rr.reflect(inp)
        else:
            return "I cannot help with that."
        if flags.no_cot:
            return f"Decision: {', '.join(a.value for a in t.decision)}\n"
        return format_triple(t)

    return respond


# --------------------------------------------------------------------------- per-episode policy


@dataclass
class Tick:
    """What the policy decided on one tick."""

    action: Action
    triple: DecisionTriple
    source: str
    """explore, exploit, queue, memo or fallback."""


@dataclass
class Policy:
    """Per-episode decision state around a reasoner.

    ``memo`` maps ``(cell, heading)`` to a corrected decision learnt from past
    reflections in this scene; a forward move about to repeat a known collision
    is replaced by that decision.
    """

    reasoner: Reasoner
    instruction: str
    memo: dict[tuple[GridPos, int], DecisionTriple] = field(default_factory=dict)
    use_memo_in_exploit: bool = True
    window: int = 8
    queue: deque = field(default_factory=deque)
    queue_triple: DecisionTriple | None = None
    seq: deque = field(default_factory=deque)
    seq_triple: DecisionTriple | None = None
    history: list[Action] = field(default_factory=list)
    obstacle_flag: bool = False
    bypass: Bypass | None = None
    blocked: set[tuple[GridPos, int]] = field(default_factory=set)
    occupied: set[GridPos] = field(default_factory=set)
    targets: dict[str, DetectedObject] = field(default_factory=dict)
    properties: frozenset[str] = frozenset()
    match_errors: int = 0
    last_triple: DecisionTriple | None = None

    # -- matching ---------------------------------------------------------------

    def update_match(self, view: ViewSummary, state: AgentState) -> MatchResult:
        """Run demand matching on fresh detections and merge with remembered targets.

        Once a target has been matched it stays the goal for the episode; when it
        drops out of view its bearing and distance are recomputed from the
        agent's pose.
        """
        try:
            fresh = self.reasoner.match(DemandQuery(self.instruction, view.detected))
        except UnknownDemand:
            self.match_errors += 1
            fresh = MatchResult(frozenset(), (), "unknown demand")
        if fresh.properties:
            self.properties = fresh.properties
        for det in fresh.matched:
            self.targets[det.object_id] = det
        current = {d.object_id: d for d in fresh.matched}
        merged = []
        for oid, det in sorted(self.targets.items()):
            if oid in current:
                merged.append(current[oid])
            else:
                dist = math.hypot(det.cell.x - state.pos.x, det.cell.z - state.pos.z) * CELL_SIZE
                merged.append(replace(det, bearing=bearing_to(state.pos, state.yaw, det.cell), distance=dist))
        merged.sort(key=lambda d: (d.distance, d.object_id))
        return MatchResult(self.properties or fresh.properties, tuple(merged), fresh.rationale, fresh.warnings)

    # -- deciding ---------------------------------------------------------------

    def _known_clear(self, pos: GridPos, heading: int, seen: int) -> int:
        dx, dz = CARDINAL_STEPS[heading % 360]
        for n in range(seen):
            if pos.offset(dx * (n + 1), dz * (n + 1)) in self.occupied:
                return n
        return seen

    def effective_view(self, view: ViewSummary, state: AgentState) -> ViewSummary:
        """The view with clearances cut short at cells already bumped into."""
        heading = snap_heading(state.yaw)
        ahead = 0 if (state.pos, heading) in self.blocked else view.free_ahead
        if not self.occupied:
            return replace(view, free_ahead=ahead) if ahead != view.free_ahead else view
        return replace(view,
                       free_ahead=self._known_clear(state.pos, heading, ahead),
                       free_left=self._known_clear(state.pos, heading - 90, view.free_left),
                       free_right=self._known_clear(state.pos, heading + 90, view.free_right))

    def decide(self, matched: MatchResult, view: ViewSummary, state: AgentState) -> Tick:
        view = self.effective_view(view, state)
        key = (state.pos, snap_heading(state.yaw))
        if matched.matched:
            # a match always cancels any pending exploration plan
            self.queue.clear()
            self.queue_triple = None
            if self.seq:
                action, triple, source = self.seq.popleft(), self.seq_triple, "exploit-seq"
                self.last_triple = triple
                return Tick(action, triple, source)
            ctx = ExploitContext(state.yaw, self.bypass, tuple(self.history[-self.window:]))
            triple = self.reasoner.exploit(view, matched, ctx)
            if triple.mode != "exploit":
                # open-loop sequence from an ablated exploit backend
                self.seq = deque(triple.decision)
                self.seq_triple = triple
                action = self.seq.popleft()
                source = "exploit-seq"
            else:
                action = triple.decision[0]
                source = "exploit"
                if not self.reasoner.flags.no_exploit_ft and not self.reasoner.flags.no_cot:
                    self.bypass = advance_bypass(self.bypass, view, matched.nearest(), state.yaw, action)
            if action is Action.MoveAhead and key in self.memo and self._memo_allowed():
                return self._apply_memo(key, state, matched)
            self.last_triple = triple
            return Tick(action, triple, source)

        self.bypass = None
        if self.queue:
            action = self.queue.popleft()
            triple = self.queue_triple
            source = "queue"
        else:
            ctx = ExploreContext.build(view, self.history, self.obstacle_flag, state.yaw, self.window)
            triple = self.reasoner.explore(ctx)
            self.queue = deque(triple.decision)
            self.queue_triple = triple
            action = self.queue.popleft()
            source = "explore"
        if action is Action.MoveAhead and key in self.memo:
            return self._apply_memo(key, state, matched)
        self.last_triple = triple
        return Tick(action, triple, source)

    def _memo_allowed(self) -> bool:
        return self.use_memo_in_exploit and not self.reasoner.flags.no_exploit_ft

    def _apply_memo(self, key, state: AgentState, matched: MatchResult) -> Tick:
        triple = replace(self.memo[key], mode="reflect")
        self.after_correction(state, triple.decision[0], matched)
        self.last_triple = triple
        return Tick(triple.decision[0], triple, "memo")

    # -- feedback ---------------------------------------------------------------

    def record(self, action: Action, state: AgentState, hindered: bool, correction: bool = False) -> None:
        """Note an action executed from ``state``.

        Blocked moves stay out of the history but mark ``(cell, heading)`` as
        blocked for the rest of the episode. The obstacle flag survives the
        corrective step that immediately follows a collision.
        """
        if hindered:
            self.blocked.add((state.pos, snap_heading(state.yaw)))
            self.occupied.add(state.ahead())
        else:
            self.history.append(action)
            del self.history[:-64]
        self.obstacle_flag = hindered or (correction and self.obstacle_flag)

    def after_correction(self, state: AgentState, corrected: Action, matched: MatchResult) -> None:
        """State changes shared by live reflection and memo replay."""
        heading = snap_heading(state.yaw)
        self.blocked.add((state.pos, heading))
        self.occupied.add(state.ahead())
        self.queue.clear()
        self.queue_triple = None
        self.seq.clear()
        self.obstacle_flag = True
        if matched.matched and corrected in ROTATIONS and not self.reasoner.flags.no_exploit_ft \
                and not self.reasoner.flags.no_cot:
            self.bypass = Bypass(corrected, heading)
        elif not matched.matched:
            self.bypass = None

    def reflect(self, failed: Action, hindrance: Hindrance, matched: MatchResult, view: ViewSummary,
                state: AgentState) -> DecisionTriple:
        prior = self.last_triple or DecisionTriple("", "", (failed,), "explore")
        inp = ReflectionInput(prior, failed, matched, hindrance, view)
        corrected = self.reasoner.reflect(inp)
        self.after_correction(state, corrected.decision[0], matched)
        self.last_triple = corrected
        return corrected
