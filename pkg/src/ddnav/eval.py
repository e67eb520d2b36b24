"""Closed-loop episode runner and the NSR / SPL / SSR metric suite."""

from __future__ import annotations

import logging
import random
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

from ddnav.errors import ConfigError, EmptySet, Unreachable
from ddnav.knowledge import Experience, KnowledgeBase, bootstrap, plan_astar, pose_of, reflection_memo, target_info
from ddnav.llm import BackendConfig, ChatClient
from ddnav.mockserver import MockChatServer
from ddnav.perception import DEFAULT_PERCEPTION, PerceptionConfig, bearing_to, observe
from ddnav.policy import (
    EXPLORE_CAP,
    ExploreContext,
    Hindrance,
    LLMReasoner,
    Policy,
    Reasoner,
    ReasonerFlags,
    RuleReasoner,
    explore_rule,
    rule_responder,
)
from ddnav.simulator import Action, AgentState, check_success, nearest_goal, shortest_path_length, step
from ddnav.triple import DecisionTriple
from ddnav.world import CELL_SIZE, DemandOntology, GridPos, Scene, default_ontology, lookup_demand

logger = logging.getLogger(__name__)

BACKENDS = ("rule", "mock", "llm")
DEFAULT_MAX_STEPS = 200


@dataclass(frozen=True)
class EpisodeConfig:
    scene: Scene
    instruction: str
    spawn_index: int = 0
    max_steps: int = DEFAULT_MAX_STEPS
    seed: int = 0
    backend: str = "rule"
    no_cot: bool = False
    no_exploit_ft: bool = False
    exploit_sequence: bool = False
    no_reflection: bool = False
    start_yaw: int | None = None
    scene_split: str = "seen"
    instruction_split: str = "seen"
    perception: PerceptionConfig = DEFAULT_PERCEPTION

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}; choose from {', '.join(BACKENDS)}")
        if not 0 <= self.spawn_index < len(self.scene.spawn_points):
            raise ConfigError(f"spawn index {self.spawn_index} out of range for {self.scene.name}")

    @property
    def flags(self) -> ReasonerFlags:
        return ReasonerFlags(self.no_cot, self.no_exploit_ft, self.exploit_sequence)

    @property
    def yaw(self) -> int:
        if self.start_yaw is not None:
            return self.start_yaw
        return random.Random(self.seed).randrange(12) * 30

    def with_flags(self, **kw) -> EpisodeConfig:
        return replace(self, **kw)


@dataclass
class TrajectoryStep:
    pos: GridPos
    yaw: int
    pitch: int
    action: Action
    source: str
    hindered: bool
    triple: DecisionTriple | None

    def to_dict(self) -> dict:
        return {
            "pos": [self.pos.x, self.pos.z],
            "yaw": self.yaw,
            "pitch": self.pitch,
            "action": self.action.value,
            "source": self.source,
            "hindered": self.hindered,
            "decision": [a.value for a in self.triple.decision] if self.triple else None,
        }


@dataclass
class EpisodeResult:
    scene: str
    instruction: str
    spawn_index: int
    seed: int
    nav_success: bool
    sel_success: bool
    agent_path_length: float
    shortest_length: float | None
    steps: int
    hindrance_count: int
    reflections: int
    selected: str | None
    scene_split: str = "seen"
    instruction_split: str = "seen"
    fallbacks: int = 0
    trajectory: list[TrajectoryStep] = field(default_factory=list)
    experiences: list[Experience] = field(default_factory=list, repr=False)
    warnings: list[str] = field(default_factory=list, repr=False)

    @property
    def spl_term(self) -> float:
        return spl_term(self.nav_success, self.shortest_length, self.agent_path_length)

    def to_dict(self, with_trajectory: bool = True) -> dict:
        d = {
            "scene": self.scene,
            "instruction": self.instruction,
            "spawn_index": self.spawn_index,
            "seed": self.seed,
            "nav_success": self.nav_success,
            "sel_success": self.sel_success,
            "agent_path_length": round(self.agent_path_length, 4),
            "shortest_length": None if self.shortest_length is None else round(self.shortest_length, 4),
            "steps": self.steps,
            "hindrance_count": self.hindrance_count,
            "reflections": self.reflections,
            "selected": self.selected,
            "scene_split": self.scene_split,
            "instruction_split": self.instruction_split,
            "fallbacks": self.fallbacks,
        }
        if with_trajectory:
            d["trajectory"] = [s.to_dict() for s in self.trajectory]
        return d


# --------------------------------------------------------------------------- backends


class Backend:
    """Builds per-episode reasoners for one backend kind.

    ``mock`` starts an in-process chat server answering like the rule reasoner,
    so the full remote path (render, HTTP, parse) runs offline. Use as a
    context manager.
    """

    def __init__(self, kind: str = "rule", ontology: DemandOntology | None = None,
                 config: BackendConfig | None = None, responder: Callable | None = None,
                 server: MockChatServer | None = None):
        if kind not in BACKENDS:
            raise ConfigError(f"unknown backend {kind!r}")
        self.kind = kind
        self.ontology = ontology or default_ontology()
        self.config = config
        self.responder = responder
        self.server = server
        self.client: ChatClient | None = None
        self._own_server = False

    def open(self) -> Backend:
        if self.kind == "mock" and self.client is None:
            if self.server is None:
                self.server = MockChatServer(responder=self.responder or rule_responder(self.ontology)).start()
                self._own_server = True
            self.client = ChatClient(BackendConfig(endpoint=self.server.url, max_retries=1, backoff=0.0))
        elif self.kind == "llm" and self.client is None:
            self.client = ChatClient(self.config or BackendConfig.from_env())
        return self

    def close(self) -> None:
        if self.client is not None:
            self.client.close()
            self.client = None
        if self._own_server and self.server is not None:
            self.server.stop()
            self.server = None

    def __enter__(self) -> Backend:
        return self.open()

    def __exit__(self, *exc) -> None:
        self.close()

    def reasoner(self, flags: ReasonerFlags) -> Reasoner:
        if self.kind == "rule":
            return RuleReasoner(self.ontology, flags)
        self.open()
        assert self.client is not None
        return LLMReasoner(self.client, self.ontology, flags=flags)


# --------------------------------------------------------------------------- episodes


def satisfying_objects(scene: Scene, properties: Iterable[str]) -> list[str]:
    props = set(properties)
    if not props:
        return []
    return sorted(o.id for o in scene.objects if props <= o.attributes)


def oracle_length(scene: Scene, start: GridPos, properties: Iterable[str]) -> float | None:
    """Shortest path (m) to the success radius of any demand-satisfying object."""
    ids = satisfying_objects(scene, properties)
    if not ids:
        return None
    try:
        return shortest_path_length(scene, start, ids)
    except Unreachable:
        return None


def oracle_steps(scene: Scene, start: AgentState, properties: Iterable[str]) -> int | None:
    """Action count (rotations, moves and Done) of the A* plan to the nearest satisfying object."""
    ids = satisfying_objects(scene, properties)
    if not ids:
        return None
    try:
        goal, _ = nearest_goal(scene, start.pos, ids)
    except Unreachable:
        return None
    return len(plan_astar(scene, start, goal)) + 1


def _hindrance(scene: Scene, state: AgentState, cell: GridPos, content: str) -> Hindrance:
    obj = scene.object_at(cell)
    return Hindrance(cell, content, obj.category if obj else None,
                     round(bearing_to(state.pos, state.yaw, cell), 1), CELL_SIZE)


def run_episode(config: EpisodeConfig, *, reasoner: Reasoner | None = None,
                memo: dict | None = None, ontology: DemandOntology | None = None,
                round_index: int = 0) -> EpisodeResult:
    """Run one episode to Done or the step budget.

    Never raises for in-episode trouble: backend failures fall back to the
    rule reasoner and are counted in ``fallbacks``.
    """
    ontology = ontology or default_ontology()
    scene = config.scene
    reasoner = reasoner or RuleReasoner(ontology, config.flags)
    policy = Policy(reasoner, config.instruction, memo=dict(memo or {}))
    rng = random.Random(config.seed)
    start = AgentState(scene.spawn_points[config.spawn_index], config.yaw)
    state = start
    trajectory: list[TrajectoryStep] = []
    experiences: list[Experience] = []
    hindrances = reflections = 0
    selected: str | None = None
    done = False

    def execute(action: Action, source: str, triple, correction: bool = False):
        nonlocal state, hindrances
        before = state
        outcome = step(scene, state, action)
        trajectory.append(TrajectoryStep(before.pos, before.yaw, before.pitch, action, source,
                                         outcome.hindered, triple))
        policy.record(action, before, outcome.hindered, correction=correction)
        if outcome.hindered:
            hindrances += 1
        state = outcome.new_state
        return before, outcome

    while state.steps_taken < config.max_steps:
        view = observe(scene, state, config.perception, rng)
        matched = policy.update_match(view, state)
        tick = policy.decide(matched, view, state)
        before, outcome = execute(tick.action, tick.source, tick.triple, correction=tick.source == "memo")
        if tick.action is Action.Done:
            target = matched.nearest()
            selected = target.object_id if target else None
            done = True
            break
        if not outcome.hindered or config.no_reflection or state.steps_taken >= config.max_steps:
            continue
        h = _hindrance(scene, before, outcome.blocked_cell, outcome.info or "")
        view = policy.effective_view(view, before)
        corrected = policy.reflect(tick.action, h, matched, view, before)
        reflections += 1
        experiences.append(Experience(
            scene=scene.name,
            instruction=config.instruction,
            matched_object=target_info(matched.nearest()),
            view_digest=view.to_dict(),
            description=corrected.description,
            reasoning=corrected.reasoning,
            decision=corrected.decision,
            source="reflection",
            round=round_index,
            pose=pose_of(before),
            hindrance=h.to_dict(),
        ))
        execute(corrected.decision[0], "reflect", corrected, correction=True)
        rest = corrected.decision[1:]
        if rest:
            policy.queue = deque(rest)
            policy.queue_triple = corrected

    props = policy.properties or frozenset(lookup_demand(ontology, config.instruction))
    judged = check_success(scene, state, selected, props, done=done)
    fallbacks = getattr(reasoner, "fallbacks", 0)
    warnings = list(getattr(reasoner, "warnings", []))
    return EpisodeResult(
        scene=scene.name,
        instruction=config.instruction,
        spawn_index=config.spawn_index,
        seed=config.seed,
        nav_success=judged.nav_success,
        sel_success=judged.sel_success,
        agent_path_length=state.path_length,
        shortest_length=oracle_length(scene, start.pos, props),
        steps=state.steps_taken,
        hindrance_count=hindrances,
        reflections=reflections,
        selected=selected,
        scene_split=config.scene_split,
        instruction_split=config.instruction_split,
        fallbacks=fallbacks,
        trajectory=trajectory,
        experiences=experiences,
        warnings=warnings,
    )


# --------------------------------------------------------------------------- metrics


def spl_term(success: bool, l: float | None, p: float) -> float:
    if not success:
        return 0.0
    if l is None:
        raise ValueError("a successful episode must carry a shortest-path length")
    if max(p, l) == 0:
        return 1.0  # spawned inside the success radius
    return l / max(p, l)


def compute_spl(results: Sequence) -> float:
    """Success weighted by path length. Accepts EpisodeResults or (S, l, p) triples."""
    if not results:
        raise EmptySet("SPL of an empty result set")
    total = 0.0
    for r in results:
        if isinstance(r, EpisodeResult):
            total += r.spl_term
        else:
            s, l, p = r
            total += spl_term(bool(s), l, p)
    return total / len(results)


@dataclass(frozen=True)
class MetricsReport:
    label: str
    episodes: int
    NSR: float
    SPL: float
    SSR: float
    hindrances: int = 0
    reflections: int = 0
    mean_steps: float = 0.0
    splits: dict[str, MetricsReport] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "label": self.label,
            "episodes": self.episodes,
            "NSR": round(self.NSR, 6),
            "SPL": round(self.SPL, 6),
            "SSR": round(self.SSR, 6),
            "hindrances": self.hindrances,
            "reflections": self.reflections,
            "mean_steps": round(self.mean_steps, 4),
        }
        if self.splits:
            d["splits"] = {k: v.to_dict() for k, v in sorted(self.splits.items())}
        return d


def summarize(results: Sequence[EpisodeResult], label: str = "all", split: bool = True) -> MetricsReport:
    if not results:
        raise EmptySet("no episode results to summarize")
    n = len(results)
    splits: dict[str, MetricsReport] = {}
    if split:
        for key in sorted({r.scene_split for r in results}):
            sub = [r for r in results if r.scene_split == key]
            splits[key] = summarize(sub, f"{label}/{key}", split=False)
    return MetricsReport(
        label=label,
        episodes=n,
        NSR=sum(r.nav_success for r in results) / n,
        SPL=compute_spl(results),
        SSR=sum(r.sel_success for r in results) / n,
        hindrances=sum(r.hindrance_count for r in results),
        reflections=sum(r.reflections for r in results),
        mean_steps=sum(r.steps for r in results) / n,
        splits=splits if len(splits) > 1 else {},
    )


def run_episodes(configs: Sequence[EpisodeConfig], *, parallelism: int = 1, backend: Backend | None = None,
                 memos: dict[str, dict] | None = None, ontology: DemandOntology | None = None,
                 round_index: int = 0) -> list[EpisodeResult]:
    """Run episodes concurrently; results come back in config order."""
    if not configs:
        raise EmptySet("no episodes to run")
    ontology = ontology or default_ontology()
    kinds = {c.backend for c in configs}
    own = backend is None
    if own:
        if len(kinds) != 1:
            raise ConfigError("mixed backends in one run need an explicit Backend")
        backend = Backend(kinds.pop(), ontology)
    assert backend is not None
    memos = memos or {}

    def one(cfg: EpisodeConfig) -> EpisodeResult:
        reasoner = backend.reasoner(cfg.flags)
        memo = memos.get(cfg.scene.name) if not cfg.no_reflection else None
        return run_episode(cfg, reasoner=reasoner, memo=memo, ontology=ontology, round_index=round_index)

    try:
        backend.open()
        if parallelism <= 1:
            return [one(c) for c in configs]
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            return list(pool.map(one, configs))
    finally:
        if own:
            backend.close()


def run_suite(configs: Sequence[EpisodeConfig], parallelism: int = 1, *, backend: Backend | None = None,
              label: str = "full") -> tuple[MetricsReport, list[EpisodeResult]]:
    results = run_episodes(configs, parallelism=parallelism, backend=backend)
    return summarize(results, label), results


ABLATIONS: dict[str, dict] = {
    "full": {},
    "w/o Exploit (single)": {"no_exploit_ft": True},
    "w/o Exploit (sequence)": {"no_exploit_ft": True, "exploit_sequence": True},
    "w/o CoT": {"no_cot": True},
}


def run_ablations(configs: Sequence[EpisodeConfig], parallelism: int = 1,
                  backend: Backend | None = None) -> list[MetricsReport]:
    rows = []
    for label, flags in ABLATIONS.items():
        variant = [c.with_flags(**flags) for c in configs]
        report, _ = run_suite(variant, parallelism, backend=backend, label=label)
        rows.append(report)
    return rows


@dataclass
class RoundsResult:
    reports: list[MetricsReport]
    kb_counts: list[int]
    results: list[list[EpisodeResult]]

    def to_dict(self) -> dict:
        return {"rounds": [r.to_dict() for r in self.reports], "kb_counts": list(self.kb_counts)}


def run_reflection_rounds(configs: Sequence[EpisodeConfig], rounds: int, kb: KnowledgeBase, *,
                          parallelism: int = 1, backend: Backend | None = None) -> RoundsResult:
    """Replay the same episode pool for several rounds.

    Reflection experiences gathered in a round are appended to ``kb`` (in
    config order) and, from the next round on, replayed as a per-scene memo of
    corrected decisions.
    """
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    reports, counts, all_results = [], [], []
    for r in range(1, rounds + 1):
        memos = reflection_memo(kb.read())
        results = run_episodes(configs, parallelism=parallelism, backend=backend, memos=memos, round_index=r)
        for res in results:
            kb.extend(res.experiences)
        reports.append(summarize(results, f"round {r}"))
        counts.append(kb.count)
        all_results.append(results)
        logger.info("round %d: %s, kb=%d", r, reports[-1].to_dict(), kb.count)
    return RoundsResult(reports, counts, all_results)


# --------------------------------------------------------------------------- episode pools


def detectable_within(scene: Scene, start: AgentState, properties: Iterable[str], budget: int = EXPLORE_CAP,
                      perception: PerceptionConfig = DEFAULT_PERCEPTION) -> bool:
    """Whether a demand-satisfying object is detected from some pose reachable in ``budget`` actions.

    Breadth-first over poses (cell, yaw, pitch) using every non-terminal action.
    """
    ids = set(satisfying_objects(scene, properties))
    if not ids:
        return False
    key = lambda s: (s.pos, s.yaw, s.pitch)  # noqa: E731
    seen = {key(start)}
    frontier = [start]
    for depth in range(budget + 1):
        nxt = []
        for st in frontier:
            if any(d.object_id in ids for d in observe(scene, st, perception).detected):
                return True
            if depth == budget:
                continue
            for a in (Action.MoveAhead, Action.RotateLeft, Action.RotateRight, Action.LookUp, Action.LookDown):
                out = step(scene, st, a)
                k = key(out.new_state)
                if not out.hindered and k not in seen:
                    seen.add(k)
                    nxt.append(out.new_state)
        frontier = nxt
    return False


def detected_in_first_plan(scene: Scene, start: AgentState, properties: Iterable[str],
                           perception: PerceptionConfig = DEFAULT_PERCEPTION) -> bool:
    """Whether a satisfying object is detected at spawn or while executing the
    first rule Explore plan (at most ``EXPLORE_CAP`` actions)."""
    ids = set(satisfying_objects(scene, properties))
    if not ids:
        return False
    view = observe(scene, start, perception)
    if any(d.object_id in ids for d in view.detected):
        return True
    state = start
    for a in explore_rule(ExploreContext.build(view, (), False, start.yaw)).decision:
        out = step(scene, state, a)
        if out.hindered:
            return False
        state = out.new_state
        if any(d.object_id in ids for d in observe(scene, state, perception).detected):
            return True
    return False


DETECT_FILTERS = ("plan", "reach")


def solvable(scene: Scene, instruction: str, spawn_index: int, ontology: DemandOntology) -> bool:
    props = lookup_demand(ontology, instruction)
    return oracle_length(scene, scene.spawn_points[spawn_index], props) is not None


def episode_pool(scenes: Sequence[Scene], ontology: DemandOntology | None = None, *, count: int,
                 seed: int = 0, instruction_split: str | None = None, phrases: Sequence[str] | None = None, unseen_scenes: Iterable[str] = (),
                 max_oracle_moves: int | None = None, detect: str | None = None,
                 **config_kw) -> list[EpisodeConfig]:
    """Sample ``count`` solvable episodes (scene, instruction, spawn, yaw) deterministically.

    ``detect`` optionally keeps only episodes whose target is found early:
    ``plan`` during the first Explore plan, ``reach`` from any pose within
    ``EXPLORE_CAP`` actions.
    """
    ontology = ontology or default_ontology()
    if not scenes:
        raise EmptySet("no scenes for an episode pool")
    phrases = list(phrases) if phrases else ontology.phrases(instruction_split)
    unseen = set(unseen_scenes)
    candidates = []
    for scene in scenes:
        for phrase in phrases:
            props = lookup_demand(ontology, phrase)
            if not satisfying_objects(scene, props):
                continue
            for si in range(len(scene.spawn_points)):
                l = oracle_length(scene, scene.spawn_points[si], props)
                if l is None:
                    continue
                if max_oracle_moves is not None and l / CELL_SIZE > max_oracle_moves:
                    continue
                candidates.append((scene, phrase, si))
    if not candidates:
        raise EmptySet("no solvable episodes in the given scenes")
    rng = random.Random(seed)
    out: list[EpisodeConfig] = []
    tries = 0
    while len(out) < count:
        tries += 1
        if tries > 50 * count:
            raise EmptySet(f"only {len(out)} of {count} episodes pass the detectability filter")
        scene, phrase, si = candidates[rng.randrange(len(candidates))]
        cfg = EpisodeConfig(
            scene=scene,
            instruction=phrase,
            spawn_index=si,
            seed=seed * 100003 + len(out),
            scene_split="unseen" if scene.name in unseen else "seen",
            instruction_split="unseen" if phrase in ontology.unseen_phrases else "seen",
            **config_kw,
        )
        if detect is not None:
            start = AgentState(scene.spawn_points[si], cfg.yaw)
            props = lookup_demand(ontology, phrase)
            if detect == "plan":
                ok = detected_in_first_plan(scene, start, props, cfg.perception)
            elif detect == "reach":
                ok = detectable_within(scene, start, props, EXPLORE_CAP, cfg.perception)
            else:
                raise ConfigError(f"unknown detectability filter {detect!r}; choose from {DETECT_FILTERS}")
            if not ok:
                continue
        out.append(cfg)
    return out


# --------------------------------------------------------------------------- knowledge-base bootstrap


def nearest_satisfying(scene: Scene, start: GridPos, properties: Iterable[str]) -> str | None:
    """Satisfying object with the shortest path to its success radius (ties by id)."""
    best: tuple[int, str] | None = None
    for oid in satisfying_objects(scene, properties):
        try:
            _, moves = nearest_goal(scene, start, oid)
        except Unreachable:
            continue
        if best is None or (moves, oid) < best:
            best = (moves, oid)
    return best[1] if best else None


def bootstrap_scene(scene: Scene, ontology: DemandOntology | None = None, *, seed: int = 0,
                    phrases: Sequence[str] | None = None) -> list[Experience]:
    """Bootstrap experiences for every (phrase, spawn point) pair with a reachable target."""
    ontology = ontology or default_ontology()
    rng = random.Random(f"{seed}:{scene.name}")
    out: list[Experience] = []
    for phrase in phrases or ontology.phrases():
        props = lookup_demand(ontology, phrase)
        for si, spawn in enumerate(scene.spawn_points):
            yaw = rng.randrange(12) * 30
            target = nearest_satisfying(scene, spawn, props)
            if target is None:
                continue
            out.extend(bootstrap(scene, phrase, target, spawn_index=si, start_yaw=yaw))
    return out


def bootstrap_kb(scenes: Sequence[Scene], kb: KnowledgeBase, ontology: DemandOntology | None = None, *,
                 seed: int = 0, parallelism: int = 1, phrases: Sequence[str] | None = None) -> int:
    """Bootstrap scenes concurrently; appends happen in scene order so the KB file is reproducible."""
    if not scenes:
        raise EmptySet("no scenes to bootstrap")
    ontology = ontology or default_ontology()

    def job(scene: Scene) -> list[Experience]:
        return bootstrap_scene(scene, ontology, seed=seed, phrases=phrases)

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        batches = list(pool.map(job, scenes))
    added = 0
    for batch in batches:
        kb.extend(batch)
        added += len(batch)
    return added
