"""
Answer schema and response parsing for the agent backend.
"""

import json
import re
from dataclasses import dataclass
from typing import Any, Dict, List, Tuple

from scopeagent.core.imagecore import CANONICAL_ORDER, DistortionCategory, DistortionLabel, Severity
from scopeagent.utils.error import ParseFailure

ANSWER_KEY = "distortions"
SCHEMA_SEVERITIES = ("mild", "severe")
_STEP = re.compile(r"^\s*(\d+)[.)]\s+(.*\S)\s*$")


@dataclass(frozen=True)
class ReasoningTrace:
    steps: Tuple[str, ...] = ()

    def __post_init__(self):
        if any(not s.strip() for s in self.steps):
            raise ValueError("Reasoning steps must be nonempty")

    def __len__(self) -> int:
        return len(self.steps)


def answer_schema() -> Dict[str, Any]:
    """JSON schema of the final answer object."""
    return {
        "type": "object",
        "properties": {
            ANSWER_KEY: {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "category": {"type": "string", "enum": [c.value for c in CANONICAL_ORDER]},
                        "severity": {"type": "string", "enum": list(SCHEMA_SEVERITIES)},
                    },
                    "required": ["category", "severity"],
                },
            }
        },
        "required": [ANSWER_KEY],
    }


def format_answer(label: DistortionLabel) -> str:
    """Serialize a label as an answer object."""
    items = [{"category": c.value, "severity": s.value} for c, s in label]
    return json.dumps({ANSWER_KEY: items})


def _json_objects(raw: str) -> List[Tuple[int, Any]]:
    """Every top-level JSON object embedded in free text, with its start offset."""
    decoder = json.JSONDecoder()
    found = []
    i = raw.find("{")
    while i != -1:
        try:
            obj, end = decoder.raw_decode(raw, i)
        except json.JSONDecodeError:
            i = raw.find("{", i + 1)
            continue
        found.append((i, obj))
        i = raw.find("{", end)
    return found


def _label_from_answer(answer: Dict[str, Any], raw: str) -> DistortionLabel:
    if set(answer) != {ANSWER_KEY} or not isinstance(answer[ANSWER_KEY], list):
        raise ParseFailure("Answer object does not match the schema", raw_response=raw)

    pairs = []
    for item in answer[ANSWER_KEY]:
        if not isinstance(item, dict) or set(item) != {"category", "severity"}:
            raise ParseFailure("Answer entry does not match the schema", raw_response=raw)
        try:
            category = DistortionCategory(item["category"])
        except ValueError:
            raise ParseFailure(f"Unknown category {item['category']!r}", raw_response=raw)
        if item["severity"] not in SCHEMA_SEVERITIES:
            raise ParseFailure(f"Unknown severity {item['severity']!r}", raw_response=raw)
        pairs.append((category, Severity(item["severity"])))

    # InvariantViolation propagates for schema-valid but impossible labels
    return DistortionLabel(tuple(pairs))


def parse_prediction(raw: str, mode: str = "direct") -> Tuple[DistortionLabel, ReasoningTrace]:
    """Extract the single JSON answer object and the numbered steps before it.

    Prose around the answer is tolerated. In cot mode at least one numbered
    step must precede the answer.
    """
    if not isinstance(raw, str):
        raise ParseFailure("Backend response is not text", raw_response=repr(raw))

    answers = [(pos, obj) for pos, obj in _json_objects(raw) if isinstance(obj, dict) and ANSWER_KEY in obj]
    if not answers:
        raise ParseFailure("No JSON answer object in response", raw_response=raw)
    if len(answers) > 1:
        raise ParseFailure("More than one JSON answer object in response", raw_response=raw,
                           details={"answers": len(answers)})

    start, answer = answers[0]
    label = _label_from_answer(answer, raw)

    steps = []
    for line in raw[:start].splitlines():
        match = _STEP.match(line)
        if match:
            steps.append(match.group(2))
    if mode == "cot" and not steps:
        raise ParseFailure("Reasoning response has no numbered steps", raw_response=raw)

    return label, ReasoningTrace(tuple(steps))
