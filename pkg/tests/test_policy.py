from collections import deque

import pytest
from hypothesis import given, settings, strategies as st

from conftest import open_room
from ddnav.demand import MatchResult
from ddnav.eval import EpisodeConfig, run_episode, satisfying_objects
from ddnav.knowledge import plan_to_object
from ddnav.llm import BackendConfig, ChatClient
from ddnav.mockserver import MockChatServer
from ddnav.perception import DetectedObject, ViewSummary, observe
from ddnav.policy import (
    EXPLORE_CAP,
    Bypass,
    ExploitContext,
    ExploreContext,
    Hindrance,
    LLMReasoner,
    Policy,
    ReasonerFlags,
    ReflectionInput,
    RuleReasoner,
    explore_rule,
    exploit_rule,
    reflect_rule,
    rotation_runs,
    rule_responder,
    turns_to_new_heading,
)
from ddnav.simulator import Action, AgentState
from ddnav.triple import DecisionTriple
from ddnav.world import GridPos, SceneConfig, generate_scene, lookup_demand, scene_from_rows

L, R, M = Action.RotateLeft, Action.RotateRight, Action.MoveAhead


def view(ahead=3, left=3, right=3, detected=()):
    return ViewSummary(ahead, left, right, tuple(detected))


def target(cat="Toilet", bearing=0.0, distance=2.0, attrs=frozenset({"restroom"})):
    return DetectedObject(f"{cat}_1", cat, attrs, bearing, distance, 1, GridPos(5, 5))


def matched(*dets, props=frozenset({"restroom"})):
    return MatchResult(props, tuple(dets))


# ---------------------------------------------------------------- explore


def test_explore_open_ahead():
    t = explore_rule(ExploreContext.build(view(ahead=5), (), False, 0))
    assert t.decision == (M, M, M, M)


def test_explore_short_corridor_moves_all_it_can():
    assert explore_rule(ExploreContext.build(view(ahead=2), (), False, 0)).decision == (M, M)


@pytest.mark.parametrize("yaw", [30, 330])
def test_explore_anti_thrash_turns_right_after_left(yaw):
    if yaw == 30:
        # from 30 one right turn reaches 60, a new heading
        t = explore_rule(ExploreContext.build(view(ahead=0), (M, L, L), False, yaw))
        assert t.decision == (R,)
    else:
        # from 330 a right turn stays on the same heading, so it keeps turning
        t = explore_rule(ExploreContext.build(view(ahead=0), (M, L, L), False, yaw))
        assert t.decision[0] is R and set(t.decision) == {R}
        assert len(t.decision) == turns_to_new_heading(yaw, R)


def test_explore_after_obstacle_turns_to_wider_side():
    t = explore_rule(ExploreContext.build(view(ahead=4, left=3, right=1), (M,), True, 330))
    assert t.decision == (L,)


def test_explore_with_recent_left_rotations_still_moves_forward():
    t = explore_rule(ExploreContext.build(view(ahead=6), (L, L, M), False, 0))
    assert set(t.decision) == {M} and len(t.decision) == 4


def test_explore_keeps_direction_when_alternating_in_place():
    # left run then right run with no move in between: stop swinging back
    t = explore_rule(ExploreContext.build(view(ahead=0), (L, L, R, R, R), False, 90))
    assert t.decision[0] is R


def test_rotation_runs():
    assert rotation_runs([L, L, M, R, L]) == [(L, 2), (R, 1), (L, 1)]


def test_turns_to_new_heading():
    assert turns_to_new_heading(0, R) == 2
    assert turns_to_new_heading(30, R) == 1
    assert turns_to_new_heading(0, L) == 2
    assert turns_to_new_heading(90, L) == 2


def test_history_window():
    ctx = ExploreContext.build(view(), [M] * 20, False, 0, window=8)
    assert len(ctx.history) == 8


# ---------------------------------------------------------------- exploit


def test_exploit_done_within_reach():
    assert exploit_rule(view(), matched(target(distance=1.0))).decision == (Action.Done,)


def test_exploit_turns_toward_bearing():
    assert exploit_rule(view(), matched(target(bearing=40, distance=3))).decision == (R,)
    assert exploit_rule(view(), matched(target(bearing=-40, distance=3))).decision == (L,)


def test_exploit_blocked_turns_to_wider_side():
    assert exploit_rule(view(ahead=0, left=3, right=1), matched(target(distance=3))).decision == (L,)


def test_exploit_clear_path_moves():
    t = exploit_rule(view(ahead=4), matched(target(bearing=10, distance=2.5)))
    assert t.decision == (M,) and t.mode == "exploit"


def test_exploit_bypass_holds_detour_heading():
    # blocked heading 0, detouring left: at yaw 270 with room ahead, keep going
    t = exploit_rule(view(ahead=3, left=2, right=0), matched(target(bearing=60, distance=3)), 270, Bypass(L, 0, 0))
    assert t.decision == (M,)


# ---------------------------------------------------------------- decide (worked cases)


def _policy(ontology, instruction="I need to use the restroom", **kw):
    return Policy(RuleReasoner(ontology, ReasonerFlags(**kw)), instruction)


def test_decide_explores_forward_with_no_match(ontology):
    p = _policy(ontology)
    p.history = [L, L]
    tick = p.decide(MatchResult(frozenset({"restroom"})), view(ahead=6), AgentState(GridPos(2, 2)))
    assert tick.source == "explore" and tick.action is M
    assert list(p.queue) == [M, M, M]


def test_decide_toilet_straight_ahead(ontology):
    tick = _policy(ontology).decide(matched(target(bearing=0, distance=2.0)), view(ahead=5), AgentState(GridPos(2, 2)))
    assert tick.action is M and tick.source == "exploit"


def test_decide_painting_behind_bed(ontology):
    painting = target("Painting", 0.0, 2.5, frozenset({"decorative"}))
    p = _policy(ontology, "I want decoration for my home")
    tick = p.decide(matched(painting, props=frozenset({"decorative"})), view(ahead=0, left=4, right=0),
                    AgentState(GridPos(2, 2)))
    assert tick.action is L


def test_queue_cleared_by_match(ontology):
    p = _policy(ontology)
    p.decide(MatchResult(frozenset({"restroom"})), view(ahead=6), AgentState(GridPos(2, 2)))
    assert p.queue
    p.decide(matched(target()), view(ahead=6), AgentState(GridPos(2, 3)))
    assert not p.queue


def test_queue_consumed_one_per_tick(ontology):
    p = _policy(ontology)
    none = MatchResult(frozenset({"restroom"}))
    sources = [p.decide(none, view(ahead=6), AgentState(GridPos(2, 2 + i))).source for i in range(5)]
    assert sources == ["explore", "queue", "queue", "queue", "explore"]


def test_blocked_key_closes_the_view(ontology):
    p = _policy(ontology)
    s = AgentState(GridPos(2, 2), 0)
    p.record(M, s, hindered=True)
    assert p.obstacle_flag
    assert p.effective_view(view(ahead=5), s).free_ahead == 0
    tick = p.decide(MatchResult(frozenset({"restroom"})), view(ahead=5, left=1, right=4), s)
    assert tick.action is R


def test_obstacle_flag_only_right_after_hindrance(ontology):
    p = _policy(ontology)
    s = AgentState(GridPos(2, 2), 0)
    p.record(M, s, hindered=True)
    p.record(R, s, hindered=False, correction=True)
    assert p.obstacle_flag
    p.record(M, s, hindered=False)
    assert not p.obstacle_flag


def test_unknown_demand_explores(ontology):
    p = _policy(ontology, "zzqx")
    m = p.update_match(view(detected=[target()]), AgentState(GridPos(1, 1)))
    assert m.matched == () and p.match_errors == 1


def test_target_memory_reprojects(ontology):
    p = _policy(ontology)
    toilet = DetectedObject("Toilet_1", "Toilet", frozenset({"restroom"}), 0.0, 1.0, 1, GridPos(2, 6))
    p.update_match(view(detected=[toilet]), AgentState(GridPos(2, 2), 0))
    later = p.update_match(view(), AgentState(GridPos(2, 2), 90))
    (remembered,) = later.matched
    assert remembered.bearing == pytest.approx(-90)
    assert remembered.distance == pytest.approx(1.0)


# ---------------------------------------------------------------- reflection


def _reflection(v, category="Chair", failed=M):
    h = Hindrance(GridPos(3, 3), f"Object({category}_1)", category, 0.0, 0.25)
    return ReflectionInput(DecisionTriple("d", "r", (failed,), "exploit"), failed, MatchResult(frozenset()), h, v)


def test_reflect_turns_to_wider_side():
    t = reflect_rule(_reflection(view(ahead=0, left=1, right=4)))
    assert t.decision == (R,)
    assert "Chair" in t.description


def _scan(scene, pos, step):
    n, (x, z) = 0, pos
    while scene.is_free(GridPos(x + step[0] * (n + 1), z + step[1] * (n + 1))):
        n += 1
    return n


def test_reflect_symmetric_wall_breaks_tie_left():
    scene = scene_from_rows(open_room(9, 6))
    state = AgentState(GridPos(4, 4), 0)  # facing the top wall, 3 free cells either side
    left, right = _scan(scene, state.pos, (-1, 0)), _scan(scene, state.pos, (1, 0))
    assert left == right == 3
    v = observe(scene, state)
    assert (v.free_ahead, v.free_left, v.free_right) == (0, left, right)
    h = Hindrance(GridPos(4, 5), "Wall", None, 0.0, 0.25)
    inp = ReflectionInput(DecisionTriple("d", "r", (M,), "explore"), M, MatchResult(frozenset()), h, v)
    assert reflect_rule(inp).decision == (L,)


def test_reflect_is_deterministic():
    inp = _reflection(view(ahead=0, left=2, right=2))
    assert reflect_rule(inp) == reflect_rule(inp)


@given(st.integers(0, 10), st.integers(0, 10), st.integers(0, 10), st.booleans())
def test_reflection_distinctness(ahead, left, right, no_cot):
    rr = RuleReasoner(None, ReasonerFlags(no_cot=no_cot))
    t = rr.reflect(_reflection(view(ahead, left, right)))
    assert t.decision[0] is not M


def test_reflection_logged_as_experience(ontology):
    # a low chair sits unseen between the agent and a painting; the right side is wider
    scene = scene_from_rows(open_room(12, 14), [("Chair_1", "Chair", [(3, 3)]), ("Painting_1", "Painting", [(3, 11)])],
                            spawn_points=[(3, 1)])
    res = run_episode(EpisodeConfig(scene, "I want decoration for my home", start_yaw=0))
    assert res.nav_success
    assert res.hindrance_count == 1 == len(res.experiences)
    exp = res.experiences[0]
    assert exp.source == "reflection" and exp.hindrance["category"] == "Chair"
    assert exp.decision == (R,)


# ---------------------------------------------------------------- branch law


dets = st.builds(lambda b, d: target(bearing=b, distance=d), st.floats(-180, 180), st.floats(0.25, 5))
views = st.builds(view, st.integers(0, 20), st.integers(0, 20), st.integers(0, 20))


@settings(max_examples=200, deadline=None)
@given(st.lists(dets, max_size=3), views, st.sampled_from(range(0, 360, 30)),
       st.lists(st.sampled_from([L, R, M]), max_size=10), st.booleans())
def test_branch_law(found, v, yaw, history, flag):
    p = Policy(RuleReasoner(None), "I need to use the restroom")
    p.history = list(history)
    p.obstacle_flag = flag
    p.queue = deque([M, M])
    tick = p.decide(matched(*found), v, AgentState(GridPos(3, 3), yaw))
    if found:
        assert tick.source == "exploit"
        assert len(tick.triple.decision) == 1 and tick.triple.mode == "exploit"
        assert not p.queue
    else:
        assert tick.source == "queue"
        p.queue.clear()
        tick = p.decide(matched(), v, AgentState(GridPos(3, 3), yaw))
        assert tick.source == "explore"
        assert 1 <= len(tick.triple.decision) <= EXPLORE_CAP


# ---------------------------------------------------------------- remote reasoner


def _llm(server, ontology, **flags):
    client = ChatClient(BackendConfig(endpoint=server.url, max_retries=0))
    return LLMReasoner(client, ontology, flags=ReasonerFlags(**flags))


def test_faithful_mock_reproduces_rules(ontology):
    ctx = ExploreContext.build(view(ahead=0, left=2, right=5), (L, M), False, 30)
    m = matched(target(bearing=40, distance=3))
    ectx = ExploitContext(0, None, ())
    inp = _reflection(view(0, 1, 3))
    rule = RuleReasoner(ontology)
    with MockChatServer(responder=rule_responder(ontology)) as srv:
        llm = _llm(srv, ontology)
        assert llm.explore(ctx) == rule.explore(ctx)
        assert llm.exploit(view(), m, ectx) == rule.exploit(view(), m, ectx)
        assert llm.reflect(inp) == rule.reflect(inp)
        assert llm.fallbacks == 0
        assert len(srv.requests) == 3
        system = srv.requests[0]["messages"][0]["content"]
        assert "Free cells ahead 0" in system


@pytest.mark.parametrize("reply", ["Decision: Jump", "no idea", "Description: d\nDecision: MoveAhead"])
def test_bad_replies_fall_back(ontology, reply):
    ctx = ExploreContext.build(view(ahead=5), (), False, 0)
    with MockChatServer(responder=lambda m: reply) as srv:
        llm = _llm(srv, ontology)
        assert llm.explore(ctx) == explore_rule(ctx)
        assert llm.fallbacks == 1


def test_reflection_repeating_failure_falls_back(ontology):
    inp = _reflection(view(0, 1, 3))
    with MockChatServer(responder=lambda m: "Description: d\nReasoning: r\nDecision: MoveAhead") as srv:
        llm = _llm(srv, ontology)
        assert llm.reflect(inp).decision == (R,)
        assert llm.fallbacks == 1


def test_no_cot_accepts_bare_decision(ontology):
    ctx = ExploreContext.build(view(ahead=5), (), False, 0)
    with MockChatServer(responder=lambda m: "Decision: RotateLeft") as srv:
        assert _llm(srv, ontology, no_cot=True).explore(ctx).decision == (L,)


def test_backend_down_falls_back(ontology):
    client = ChatClient(BackendConfig(endpoint="http://127.0.0.1:9/v1", timeout=0.5, max_retries=0))
    llm = LLMReasoner(client, ontology)
    ctx = ExploreContext.build(view(ahead=5), (), False, 0)
    assert llm.explore(ctx) == explore_rule(ctx)
    assert llm.fallbacks == 1


# ---------------------------------------------------------------- progress property


def test_exploit_progress_within_four_times_astar(ontology):
    """Target detected at the start: the episode ends in Done within 4x the A* action count."""
    checked = 0
    for seed in range(25):
        scene = generate_scene(seed, SceneConfig(width=14, depth=14))
        for phrase in ontology.phrases():
            props = lookup_demand(ontology, phrase)
            ids = set(satisfying_objects(scene, props))
            if not ids:
                continue
            for si, spawn in enumerate(scene.spawn_points):
                for yaw in (0, 90, 180, 270):
                    start = AgentState(spawn, yaw)
                    seen = [d.object_id for d in observe(scene, start).detected if d.object_id in ids]
                    if not seen:
                        continue
                    # A* actions to the nearest initially detected target, plus Done
                    budget = min(len(plan_to_object(scene, start, oid)) for oid in seen) + 1
                    res = run_episode(EpisodeConfig(scene, phrase, si, start_yaw=yaw), ontology=ontology)
                    assert res.nav_success, (scene.name, phrase, si, yaw)
                    assert res.steps <= 4 * budget, (scene.name, phrase, si, yaw, res.steps, budget)
                    checked += 1
    assert checked > 50
