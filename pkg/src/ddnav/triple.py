"""The Description / Reasoning / Decision triple and its text format."""

from __future__ import annotations

import re
from dataclasses import dataclass

from ddnav.errors import ParseError
from ddnav.simulator import Action


@dataclass(frozen=True)
class DecisionTriple:
    description: str
    reasoning: str
    decision: tuple[Action, ...]
    mode: str = "explore"
    """Which process produced it: explore, exploit, reflect or memo."""

    def __post_init__(self) -> None:
        if not self.decision:
            raise ValueError("a decision needs at least one action")
        if self.mode == "exploit" and len(self.decision) != 1:
            raise ValueError("exploit decisions carry exactly one action")

    def to_dict(self) -> dict:
        return {
            "description": self.description,
            "reasoning": self.reasoning,
            "decision": [a.value for a in self.decision],
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DecisionTriple:
        return cls(d["description"], d["reasoning"], tuple(Action(a) for a in d["decision"]), d.get("mode", "explore"))


_SECTION = re.compile(
    r"^\s*(?:\*\*)?\s*(?P<label>scene\s+description|description|reasoning|decision)\s*(?:\*\*)?\s*:\s*(?:\*\*)?",
    re.IGNORECASE | re.MULTILINE,
)


def format_triple(t: DecisionTriple) -> str:
    return (
        f"Description: {t.description}\n"
        f"Reasoning: {t.reasoning}\n"
        f"Decision: {', '.join(a.value for a in t.decision)}\n"
    )


def parse_triple(reply: str, *, require_cot: bool = True, mode: str = "explore") -> DecisionTriple:
    """Extract a triple from free-form model output.

    Sections may span several lines; only the first line after ``Decision:``
    is read as action tokens, anything after it is ignored.
    """
    matches = list(_SECTION.finditer(reply))
    sections: dict[str, str] = {}
    for i, m in enumerate(matches):
        label = m.group("label").lower()
        label = "description" if "description" in label else label
        end = matches[i + 1].start() if i + 1 < len(matches) else len(reply)
        sections.setdefault(label, reply[m.end():end].strip())
    if "decision" not in sections:
        raise ParseError("reply has no Decision section", field="Decision")
    if require_cot:
        for needed in ("description", "reasoning"):
            if not sections.get(needed):
                raise ParseError(f"reply has no {needed.capitalize()} section", field=needed.capitalize())
    first_line = sections["decision"].splitlines()[0] if sections["decision"] else ""
    tokens = [t for t in re.split(r"[,\s\[\]\"'`*]+", first_line) if t]
    if not tokens:
        raise ParseError("Decision section is empty", field="Decision")
    actions = []
    for tok in tokens:
        tok = tok.rstrip(".;:")
        try:
            actions.append(Action.parse(tok))
        except ValueError:
            raise ParseError(f"decision token {tok!r} is not a valid action", field="Decision") from None
    if mode == "exploit" and len(actions) != 1:
        raise ParseError(f"exploit decision must be a single action, got {len(actions)}", field="Decision")
    return DecisionTriple(sections.get("description", ""), sections.get("reasoning", ""), tuple(actions), mode)
