"""Demand matching: instruction + detections -> demand properties and targets."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ddnav.errors import BackendError, ParseError, UnknownDemand
from ddnav.llm import ChatClient, PromptTemplate, render
from ddnav.perception import DetectedObject
from ddnav.world import DemandOntology, lookup_demand

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DemandQuery:
    instruction: str
    detected: tuple[DetectedObject, ...] = ()

    def __post_init__(self) -> None:
        if not self.instruction.strip():
            raise ValueError("instruction must be non-empty")


@dataclass(frozen=True)
class MatchResult:
    properties: frozenset[str]
    matched: tuple[DetectedObject, ...] = ()
    rationale: str = ""
    warnings: tuple[str, ...] = field(default=(), compare=False)

    @property
    def empty(self) -> bool:
        return not self.matched

    def nearest(self) -> DetectedObject | None:
        return min(self.matched, key=lambda d: (d.distance, d.object_id)) if self.matched else None


def covering(detected: Sequence[DetectedObject], properties: frozenset[str] | set[str]) -> tuple[DetectedObject, ...]:
    """Detections whose attributes cover every property (never partial matches)."""
    if not properties:
        return ()
    return tuple(d for d in detected if set(properties) <= d.attributes)


def match(ontology: DemandOntology, query: DemandQuery) -> MatchResult:
    props = frozenset(lookup_demand(ontology, query.instruction))
    if not props:
        raise UnknownDemand(f"no demand phrase matches {query.instruction!r}")
    hits = covering(query.detected, props)
    if hits:
        why = f"{', '.join(d.object_id for d in hits)} provide {', '.join(sorted(props))}"
    else:
        why = f"no visible object provides all of {', '.join(sorted(props))}"
    return MatchResult(props, hits, why)


# --------------------------------------------------------------------------- LLM route


def objects_text(detected: Sequence[DetectedObject]) -> str:
    if not detected:
        return "none"
    return "; ".join(f"{d.object_id} [{d.category}: {', '.join(sorted(d.attributes))}]" for d in detected)


_LINE = re.compile(r"^\s*(attributes|objects)\s*:\s*(.*)$", re.IGNORECASE | re.MULTILINE)


def parse_match_reply(reply: str) -> tuple[frozenset[str], list[str]]:
    found = {m.group(1).lower(): m.group(2).strip() for m in _LINE.finditer(reply)}
    if "attributes" not in found or "objects" not in found:
        raise ParseError("demand reply needs 'Attributes:' and 'Objects:' lines")
    attrs = frozenset(a.strip().lower() for a in found["attributes"].split(",") if a.strip())
    raw = found["objects"]
    names = [] if raw.lower() in {"none", "", "-", "n/a"} else [o.strip(" .") for o in raw.split(",") if o.strip(" .")]
    return attrs, names


def format_match_reply(result: MatchResult) -> str:
    objs = ", ".join(d.object_id for d in result.matched) or "none"
    return f"Attributes: {', '.join(sorted(result.properties))}\nObjects: {objs}\n"


def match_llm(client: ChatClient, template: PromptTemplate, query: DemandQuery) -> MatchResult:
    """Ask a remote model for the match; failures degrade to an empty match."""
    system = render(template, {"instruction": query.instruction, "objects": objects_text(query.detected)})
    user = json.dumps({"instruction": query.instruction, "detected": [d.to_dict() for d in query.detected]},
                      sort_keys=True)
    try:
        reply = client.complete(system, user)
        props, names = parse_match_reply(reply)
    except (BackendError, ParseError) as exc:
        logger.warning("demand matching via backend failed: %s", exc)
        return MatchResult(frozenset(), (), f"backend failure: {exc}", (str(exc),))
    warnings = []
    by_id = {d.object_id: d for d in query.detected}
    by_cat: dict[str, DetectedObject] = {}
    for d in query.detected:
        by_cat.setdefault(d.category.lower(), d)
    picked: list[DetectedObject] = []
    for name in names:
        det = by_id.get(name) or by_cat.get(name.lower())
        if det is None:
            msg = f"dropping {name!r}: not among detected objects"
            logger.warning(msg)
            warnings.append(msg)
            continue
        if not props or not props <= det.attributes:
            msg = f"dropping {name!r}: attributes do not cover {sorted(props)}"
            logger.warning(msg)
            warnings.append(msg)
            continue
        if det not in picked:
            picked.append(det)
    return MatchResult(props, tuple(picked), "backend match", tuple(warnings))


# --------------------------------------------------------------------------- QA export


def export_demand_qa(ontology: DemandOntology, path: str | Path) -> int:
    """Write one question/answer record per demand phrase (JSONL)."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for phrase in ontology.phrases():
            attrs = sorted(ontology.demand_phrases[phrase])
            cats = sorted(ontology.categories_satisfying(attrs))
            rec = {
                "instruction": phrase,
                "split": "unseen" if phrase in ontology.unseen_phrases else "seen",
                "question_attributes": f"Which attributes must an object have to satisfy: {phrase}?",
                "answer_attributes": ", ".join(attrs),
                "question_objects": f"Which object categories have all of: {', '.join(attrs)}?",
                "answer_objects": ", ".join(cats),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            n += 1
    return n
