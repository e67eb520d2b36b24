"""Static scene model: grid occupancy, placed objects, demand ontology and a
seeded procedural generator for small indoor layouts.

Coordinates are integer cells ``(x, z)``; each cell is ``CELL_SIZE`` metres on a
side so that one forward move traverses exactly one cell. Occupancy rows are
indexed by ``z`` and columns by ``x``.
"""

from __future__ import annotations

import json
import logging
import random
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

from ddnav.errors import ConfigError, ParseError

logger = logging.getLogger(__name__)

CELL_SIZE = 0.25

FREE = "."
WALL = "#"
OBJECT = "O"


class GridPos(NamedTuple):
    x: int
    z: int

    def offset(self, dx: int, dz: int) -> GridPos:
        return GridPos(self.x + dx, self.z + dz)


# Cardinal headings in degrees (0 = +z, clockwise positive) and their unit steps.
CARDINAL_STEPS: dict[int, tuple[int, int]] = {0: (0, 1), 90: (1, 0), 180: (0, -1), 270: (-1, 0)}


def cell_distance(a: GridPos, b: GridPos) -> float:
    """Euclidean distance between cell centres, in metres."""
    return ((a.x - b.x) ** 2 + (a.z - b.z) ** 2) ** 0.5 * CELL_SIZE


# --------------------------------------------------------------------------- ontology


@dataclass(frozen=True)
class CategoryInfo:
    name: str
    attributes: frozenset[str]
    footprint: tuple[int, int] = (1, 1)
    low: bool = False


@dataclass(frozen=True)
class DemandOntology:
    """Mapping between demand phrases, attributes and object categories."""

    categories: dict[str, CategoryInfo]
    entries: dict[str, frozenset[str]]
    demand_phrases: dict[str, frozenset[str]]
    unseen_phrases: frozenset[str] = frozenset()
    version: int = 1

    def __post_init__(self) -> None:
        for attr, cats in self.entries.items():
            for cat in cats:
                if cat not in self.categories:
                    raise ConfigError(f"ontology entry {attr!r} names unknown category {cat!r}")
                if attr not in self.categories[cat].attributes:
                    raise ConfigError(f"category {cat!r} lacks attribute {attr!r} listed in entries")
        for cat, info in self.categories.items():
            for attr in info.attributes:
                if cat not in self.entries.get(attr, ()):
                    raise ConfigError(f"attribute {attr!r} of {cat!r} missing from entries")
        for phrase, attrs in self.demand_phrases.items():
            if not attrs:
                raise ConfigError(f"demand phrase {phrase!r} maps to no attribute")
        for phrase in self.unseen_phrases:
            if phrase not in self.demand_phrases:
                raise ConfigError(f"unseen phrase {phrase!r} is not a demand phrase")

    def categories_satisfying(self, attributes: Iterable[str]) -> set[str]:
        attrs = set(attributes)
        return {c for c, info in self.categories.items() if attrs <= info.attributes}

    def phrases(self, split: str | None = None) -> list[str]:
        """Demand phrases in file order, optionally restricted to ``seen``/``unseen``."""
        out = list(self.demand_phrases)
        if split == "seen":
            out = [p for p in out if p not in self.unseen_phrases]
        elif split == "unseen":
            out = [p for p in out if p in self.unseen_phrases]
        elif split is not None:
            raise ValueError(f"unknown split {split!r}")
        return out

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "categories": {
                c: {"attributes": sorted(i.attributes), "footprint": list(i.footprint), "low": i.low}
                for c, i in self.categories.items()
            },
            "entries": {a: sorted(cs) for a, cs in sorted(self.entries.items())},
            "demand_phrases": {p: sorted(a) for p, a in self.demand_phrases.items()},
            "unseen_phrases": [p for p in self.demand_phrases if p in self.unseen_phrases],
        }


def ontology_from_dict(data: dict) -> DemandOntology:
    try:
        categories = {
            name: CategoryInfo(
                name=name,
                attributes=frozenset(entry["attributes"]),
                footprint=tuple(entry.get("footprint", (1, 1))),
                low=bool(entry.get("low", False)),
            )
            for name, entry in data["categories"].items()
        }
        entries = {k: frozenset(v) for k, v in data["entries"].items()}
        phrases = {k: frozenset(v) for k, v in data["demand_phrases"].items()}
        unseen = frozenset(data.get("unseen_phrases", ()))
    except (KeyError, TypeError, AttributeError) as exc:
        raise ParseError(f"malformed ontology: {exc!r}") from exc
    return DemandOntology(categories, entries, phrases, unseen, int(data.get("version", 1)))


def load_ontology(path: str | Path | None = None) -> DemandOntology:
    """Load an ontology file; ``None`` loads the bundled default."""
    if path is None:
        return default_ontology()
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid ontology JSON: {exc.msg}", line=exc.lineno) from exc
    return ontology_from_dict(data)


@lru_cache(maxsize=1)
def default_ontology() -> DemandOntology:
    text = resources.files("ddnav.data").joinpath("ontology.json").read_text(encoding="utf-8")
    return ontology_from_dict(json.loads(text))


def _normalize_phrase(text: str) -> str:
    return " ".join(text.casefold().strip().rstrip(".!?").split())


def lookup_demand(ontology: DemandOntology, instruction: str) -> set[str]:
    """Attribute set for the demand phrase matching ``instruction``.

    Matching is exact up to case, surrounding whitespace and trailing
    punctuation. An empty set means no phrase matched.
    """
    key = _normalize_phrase(instruction)
    for phrase, attrs in ontology.demand_phrases.items():
        if _normalize_phrase(phrase) == key:
            return set(attrs)
    return set()


# --------------------------------------------------------------------------- scene


@dataclass(frozen=True)
class SceneObject:
    id: str
    category: str
    position: GridPos
    footprint: frozenset[GridPos]
    attributes: frozenset[str]
    low: bool = False

    def __post_init__(self) -> None:
        if not self.footprint:
            raise ValueError(f"object {self.id} has an empty footprint")
        if self.position not in self.footprint:
            raise ValueError(f"object {self.id} position {self.position} outside its footprint")

    def sorted_footprint(self) -> list[GridPos]:
        return sorted(self.footprint)


@dataclass(frozen=True)
class Scene:
    width: int
    depth: int
    occupancy: tuple[str, ...]
    objects: tuple[SceneObject, ...]
    spawn_points: tuple[GridPos, ...]
    seed: int = 0
    name: str = ""
    _object_at: dict[GridPos, str] = field(default_factory=dict, compare=False, repr=False)
    _by_id: dict[str, SceneObject] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        for obj in self.objects:
            self._by_id[obj.id] = obj
            for cell in obj.footprint:
                self._object_at[cell] = obj.id
        if not self.name:
            object.__setattr__(self, "name", f"scene-{self.seed:05d}")

    def in_bounds(self, pos: GridPos) -> bool:
        return 0 <= pos.x < self.width and 0 <= pos.z < self.depth

    def cell(self, pos: GridPos) -> str:
        """Raw occupancy character; out-of-bounds reads as wall."""
        if not self.in_bounds(pos):
            return WALL
        return self.occupancy[pos.z][pos.x]

    def is_free(self, pos: GridPos) -> bool:
        return self.cell(pos) == FREE

    def object_at(self, pos: GridPos) -> SceneObject | None:
        oid = self._object_at.get(pos)
        return self._by_id[oid] if oid is not None else None

    def content(self, pos: GridPos) -> str:
        """Human-readable content label: ``Free``, ``Wall`` or ``Object(<id>)``."""
        c = self.cell(pos)
        if c == FREE:
            return "Free"
        if c == WALL:
            return "Wall"
        return f"Object({self._object_at[pos]})"

    def get_object(self, object_id: str) -> SceneObject | None:
        return self._by_id.get(object_id)

    def free_cells(self) -> Iterator[GridPos]:
        for z, row in enumerate(self.occupancy):
            for x, ch in enumerate(row):
                if ch == FREE:
                    yield GridPos(x, z)

    def free_neighbors(self, pos: GridPos) -> Iterator[GridPos]:
        for dx, dz in CARDINAL_STEPS.values():
            nxt = pos.offset(dx, dz)
            if self.is_free(nxt):
                yield nxt


def flood_fill(scene: Scene, start: GridPos) -> set[GridPos]:
    """All Free cells 4-connected to ``start`` (inclusive)."""
    if not scene.is_free(start):
        return set()
    seen = {start}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for nxt in scene.free_neighbors(cur):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def validate_scene(scene: Scene, ontology: DemandOntology | None = None) -> None:
    """Raise ParseError if any scene invariant is violated."""
    ontology = ontology or default_ontology()
    if len(scene.occupancy) != scene.depth:
        raise ParseError(f"expected {scene.depth} occupancy rows, got {len(scene.occupancy)}", field="occupancy")
    for z, row in enumerate(scene.occupancy):
        if len(row) != scene.width:
            raise ParseError(f"row {z} has length {len(row)}, expected {scene.width}", field=f"occupancy[{z}]")
        bad = set(row) - {FREE, WALL, OBJECT}
        if bad:
            raise ParseError(f"row {z} contains invalid characters {sorted(bad)}", field=f"occupancy[{z}]")
    owned: set[GridPos] = set()
    for i, obj in enumerate(scene.objects):
        where = f"objects[{i}]"
        info = ontology.categories.get(obj.category)
        if info is None:
            raise ParseError(f"unknown category {obj.category!r}", field=f"{where}.category")
        if obj.attributes != info.attributes:
            raise ParseError(
                f"attributes of {obj.id} disagree with ontology entry for {obj.category}",
                field=f"{where}.attributes",
            )
        for cell in obj.footprint:
            if not scene.in_bounds(cell):
                raise ParseError(f"footprint cell {tuple(cell)} of {obj.id} is off-grid", field=f"{where}.footprint")
            if scene.cell(cell) != OBJECT:
                raise ParseError(f"footprint cell {tuple(cell)} of {obj.id} not marked 'O'", field=f"{where}.footprint")
            if cell in owned:
                raise ParseError(f"footprint cell {tuple(cell)} claimed twice", field=f"{where}.footprint")
            owned.add(cell)
    ids = [o.id for o in scene.objects]
    if len(set(ids)) != len(ids):
        raise ParseError("duplicate object ids", field="objects")
    for z, row in enumerate(scene.occupancy):
        for x, ch in enumerate(row):
            if ch == OBJECT and GridPos(x, z) not in owned:
                raise ParseError(f"cell {(x, z)} marked 'O' but owned by no object", field=f"occupancy[{z}]")
    if not scene.spawn_points:
        raise ParseError("scene has no spawn points", field="spawn_points")
    for sp in scene.spawn_points:
        if not scene.is_free(sp):
            raise ParseError(f"spawn point {tuple(sp)} is not free", field="spawn_points")
    reach = flood_fill(scene, scene.spawn_points[0])
    for sp in scene.spawn_points:
        if sp not in reach:
            raise ParseError(f"spawn point {tuple(sp)} disconnected from {tuple(scene.spawn_points[0])}",
                             field="spawn_points")


# --------------------------------------------------------------------------- generator


@dataclass(frozen=True)
class SceneConfig:
    width: int = 16
    depth: int = 16
    density: float = 0.1
    rooms: int = 2
    spawn_count: int = 4
    low_bias: float = 0.0
    """Extra probability mass in [0, 1) given to low-profile categories."""
    min_free_cells: int = 8

    def check(self) -> None:
        if self.width < 8 or self.depth < 8:
            raise ConfigError(f"scene must be at least 8x8 cells, got {self.width}x{self.depth}")
        if not 0.0 < self.density < 1.0:
            raise ConfigError(f"density must lie in (0, 1), got {self.density}")
        if not 1 <= self.rooms <= 4:
            raise ConfigError(f"rooms must be between 1 and 4, got {self.rooms}")
        if self.spawn_count < 1:
            raise ConfigError("spawn_count must be >= 1")
        if not 0.0 <= self.low_bias < 1.0:
            raise ConfigError(f"low_bias must lie in [0, 1), got {self.low_bias}")


def _wall_line(grid: list[list[str]], rng: random.Random, *, vertical: bool, at: int, lo: int, hi: int) -> None:
    """Draw a wall between lo..hi (exclusive) with a 1-2 cell doorway."""
    span = hi - lo
    door_w = 1 if span < 6 else rng.choice((1, 2))
    door = rng.randrange(lo + 1, max(lo + 2, hi - door_w))
    for t in range(lo, hi):
        if door <= t < door + door_w:
            continue
        if vertical:
            grid[t][at] = WALL
        else:
            grid[at][t] = WALL


def _layout_walls(cfg: SceneConfig, rng: random.Random) -> list[list[str]]:
    w, d = cfg.width, cfg.depth
    grid = [[FREE] * w for _ in range(d)]
    for x in range(w):
        grid[0][x] = grid[d - 1][x] = WALL
    for z in range(d):
        grid[z][0] = grid[z][w - 1] = WALL
    if cfg.rooms >= 2 and w >= 10:
        split_x = rng.randrange(w // 3, 2 * w // 3 + 1)
        _wall_line(grid, rng, vertical=True, at=split_x, lo=1, hi=d - 1)
        if cfg.rooms >= 3 and d >= 10:
            split_z = rng.randrange(d // 3, 2 * d // 3 + 1)
            _wall_line(grid, rng, vertical=False, at=split_z, lo=1, hi=split_x)
        if cfg.rooms >= 4 and d >= 10:
            split_z = rng.randrange(d // 3, 2 * d // 3 + 1)
            _wall_line(grid, rng, vertical=False, at=split_z, lo=split_x + 1, hi=w - 1)
    return grid


def _connected(grid: list[list[str]], free_total: int) -> bool:
    start = None
    for z, row in enumerate(grid):
        for x, ch in enumerate(row):
            if ch == FREE:
                start = (x, z)
                break
        if start:
            break
    if start is None:
        return False
    seen = {start}
    queue = deque([start])
    d, w = len(grid), len(grid[0])
    while queue:
        x, z = queue.popleft()
        for dx, dz in CARDINAL_STEPS.values():
            nx, nz = x + dx, z + dz
            if 0 <= nx < w and 0 <= nz < d and grid[nz][nx] == FREE and (nx, nz) not in seen:
                seen.add((nx, nz))
                queue.append((nx, nz))
    return len(seen) == free_total


def generate_scene(seed: int, config: SceneConfig | None = None, ontology: DemandOntology | None = None,
                   name: str | None = None) -> Scene:
    """Build a deterministic random scene for ``(seed, config)``.

    Objects are placed one at a time; a placement is rejected if it would split
    the free space, so every free cell (and therefore every spawn point) ends up
    in a single connected component.
    """
    cfg = config or SceneConfig()
    cfg.check()
    ontology = ontology or default_ontology()
    rng = random.Random(seed)
    # doorways of crossing walls can line up against each other; redraw until connected
    for _ in range(100):
        grid = _layout_walls(cfg, rng)
        free_total = sum(row.count(FREE) for row in grid)
        if _connected(grid, free_total):
            break
    else:
        raise ConfigError(f"could not lay out {cfg.rooms} connected rooms in {cfg.width}x{cfg.depth}")
    target = round(cfg.density * free_total)
    if free_total - target < max(cfg.min_free_cells, cfg.spawn_count):
        raise ConfigError(
            f"density {cfg.density} leaves {free_total - target} free cells; "
            f"need at least {max(cfg.min_free_cells, cfg.spawn_count)}"
        )

    # Seed one object per demand phrase (in shuffled order) so most instructions
    # are satisfiable, then fill up with random categories.
    names = sorted(ontology.categories)
    low_names = [n for n in names if ontology.categories[n].low]
    phrase_cats = []
    for phrase in ontology.phrases():
        cands = sorted(ontology.categories_satisfying(ontology.demand_phrases[phrase]))
        phrase_cats.append(rng.choice(cands))
    rng.shuffle(phrase_cats)

    objects: list[SceneObject] = []
    counters: dict[str, int] = {}
    covered = 0
    attempts = 0
    max_attempts = 60 * (target + 10)
    while covered < target and attempts < max_attempts:
        attempts += 1
        if phrase_cats:
            cat = phrase_cats[-1]
        elif low_names and rng.random() < cfg.low_bias:
            cat = rng.choice(low_names)
        else:
            cat = rng.choice(names)
        info = ontology.categories[cat]
        fw, fd = info.footprint
        if rng.random() < 0.5:
            fw, fd = fd, fw
        x0 = rng.randrange(1, cfg.width - fw)
        z0 = rng.randrange(1, cfg.depth - fd)
        cells = [GridPos(x0 + i, z0 + j) for i in range(fw) for j in range(fd)]
        if any(grid[c.z][c.x] != FREE for c in cells):
            continue
        if covered + len(cells) > target and covered > 0:
            if phrase_cats:
                phrase_cats.pop()
            continue
        for c in cells:
            grid[c.z][c.x] = OBJECT
        if free_total - len(cells) <= 0 or not _connected(grid, free_total - len(cells)):
            for c in cells:
                grid[c.z][c.x] = FREE
            continue
        free_total -= len(cells)
        covered += len(cells)
        counters[cat] = counters.get(cat, 0) + 1
        objects.append(SceneObject(
            id=f"{cat}_{counters[cat]}",
            category=cat,
            position=cells[0],
            footprint=frozenset(cells),
            attributes=info.attributes,
            low=info.low,
        ))
        if phrase_cats:
            phrase_cats.pop()
    if covered < target:
        raise ConfigError(f"could not place objects to reach density {cfg.density} (reached {covered}/{target} cells)")

    free = [GridPos(x, z) for z, row in enumerate(grid) for x, ch in enumerate(row) if ch == FREE]
    if len(free) < cfg.spawn_count:
        raise ConfigError("not enough free cells for spawn points")
    spawns = tuple(rng.sample(free, cfg.spawn_count))
    scene = Scene(
        width=cfg.width,
        depth=cfg.depth,
        occupancy=tuple("".join(row) for row in grid),
        objects=tuple(objects),
        spawn_points=spawns,
        seed=seed,
        name=name or f"scene-{seed:05d}",
    )
    validate_scene(scene, ontology)
    return scene


# --------------------------------------------------------------------------- serialization


def scene_to_dict(scene: Scene) -> dict:
    return {
        "name": scene.name,
        "width": scene.width,
        "depth": scene.depth,
        "seed": scene.seed,
        "occupancy": list(scene.occupancy),
        "objects": [
            {
                "id": o.id,
                "category": o.category,
                "x": o.position.x,
                "z": o.position.z,
                "footprint": [[c.x, c.z] for c in o.sorted_footprint()],
                "attributes": sorted(o.attributes),
            }
            for o in scene.objects
        ],
        "spawn_points": [[p.x, p.z] for p in scene.spawn_points],
    }


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), indent=1) + "\n"


def _req(d: dict, key: str, where: str):
    if key not in d:
        raise ParseError(f"missing field {key!r}", field=f"{where}{key}")
    return d[key]


def scene_from_dict(data: dict, ontology: DemandOntology | None = None) -> Scene:
    ontology = ontology or default_ontology()
    if not isinstance(data, dict):
        raise ParseError("scene JSON must be an object")
    try:
        width = int(_req(data, "width", ""))
        depth = int(_req(data, "depth", ""))
        occupancy = tuple(str(r) for r in _req(data, "occupancy", ""))
        objects = []
        for i, od in enumerate(_req(data, "objects", "")):
            where = f"objects[{i}]."
            cat = str(_req(od, "category", where))
            info = ontology.categories.get(cat)
            if info is None:
                raise ParseError(f"unknown category {cat!r}", field=f"{where}category")
            fp = frozenset(GridPos(int(c[0]), int(c[1])) for c in _req(od, "footprint", where))
            pos = GridPos(int(_req(od, "x", where)), int(_req(od, "z", where)))
            if not fp or pos not in fp:
                raise ParseError(f"position {tuple(pos)} not inside footprint", field=f"{where}footprint")
            objects.append(SceneObject(
                id=str(_req(od, "id", where)),
                category=cat,
                position=pos,
                footprint=fp,
                attributes=frozenset(_req(od, "attributes", where)),
                low=info.low,
            ))
        spawns = tuple(GridPos(int(p[0]), int(p[1])) for p in _req(data, "spawn_points", ""))
        seed = int(data.get("seed", 0))
    except (TypeError, ValueError, IndexError) as exc:
        raise ParseError(f"malformed scene: {exc}") from exc
    scene = Scene(width, depth, occupancy, tuple(objects), spawns, seed, str(data.get("name", "")))
    validate_scene(scene, ontology)
    return scene


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(dumps_scene(scene), encoding="utf-8")


def load_scene(path: str | Path, ontology: DemandOntology | None = None) -> Scene:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid scene JSON: {exc.msg}", line=exc.lineno) from exc
    return scene_from_dict(data, ontology)


def scene_from_rows(rows: list[str], objects: Iterable[tuple[str, str, list[tuple[int, int]]]] = (),
                    spawn_points: Iterable[tuple[int, int]] = (), *, name: str = "fixture",
                    ontology: DemandOntology | None = None) -> Scene:
    """Build a scene from ASCII rows listed top (high z) to bottom (z = 0).

    Handy for hand-written fixtures: ``objects`` is ``(id, category, cells)``;
    object cells are marked automatically.
    """
    ontology = ontology or default_ontology()
    depth = len(rows)
    grid = [list(r) for r in reversed(rows)]
    objs = []
    for oid, cat, cells in objects:
        info = ontology.categories[cat]
        fp = frozenset(GridPos(*c) for c in cells)
        for c in fp:
            grid[c.z][c.x] = OBJECT
        objs.append(SceneObject(oid, cat, GridPos(*cells[0]), fp, info.attributes, info.low))
    spawns = tuple(GridPos(*p) for p in spawn_points)
    if not spawns:
        spawns = (next(GridPos(x, z) for z in range(depth) for x in range(len(rows[0])) if grid[z][x] == FREE),)
    scene = Scene(len(rows[0]), depth, tuple("".join(r) for r in grid), tuple(objs), spawns, 0, name)
    validate_scene(scene, ontology)
    return scene
