"""
Prompt assembly for the agent backend.
Builds the multimodal document: instructions, labeled exemplars, prior
distributions and the Base64 query image.
"""

import base64
import binascii
import json
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

from scopeagent.config import settings
from scopeagent.core.context import FewShotContext, render_context
from scopeagent.core.imagecore import (
    CANONICAL_ORDER,
    DatasetManifest,
    ImageBuf,
    encode_png,
    decode_image_bytes,
)
from scopeagent.core.prior import SoftLabels
from scopeagent.utils.error import EncodingFailure, PromptBudgetExceeded

MODES = ("cot", "direct")

TASK_INSTRUCTIONS = (
    "You are assisting with surgical endoscopy image enhancement. "
    "Identify which distortions affect the query image and how severe each one is.\n"
    "Categories: low_light, over_exposure, motion_blur, smoke. Severities: mild, severe.\n"
    "Rules: smoke is always severe; low_light and over_exposure never occur together; "
    "at most three categories; an undistorted image has an empty list."
)
CONTEXT_HEADER = "Labeled examples follow. Each image is followed by its label."
PRIOR_HEADER = (
    "Prior model distributions per category "
    "(presence: p_absent p_present; severity: p_mild p_severe):"
)
QUERY_HEADER = "Query image:"
COT_INSTRUCTION = (
    "Think step by step. Write your reasoning as numbered steps, one per line "
    "(1. ..., 2. ...), then give the final answer as one JSON object."
)
DIRECT_INSTRUCTION = "Reply with the final answer as one JSON object and nothing else."
ANSWER_FORMAT = (
    'Answer schema: {"distortions": [{"category": "low_light|over_exposure|motion_blur|smoke", '
    '"severity": "mild|severe"}]}'
)
FORMAT_REMINDER = (
    "Your previous reply could not be parsed. Reply again and end with exactly one JSON object "
    "matching the answer schema."
)


def encode_base64(data: bytes) -> str:
    """Standard Base64 with padding."""
    return base64.b64encode(data).decode("ascii")


def encode_image_base64(img: ImageBuf) -> str:
    """Base64 of the PNG encoding of an image."""
    try:
        return encode_base64(encode_png(img))
    except (OSError, ValueError) as e:
        raise EncodingFailure(f"Cannot encode image: {e}")


def decode_image_base64(payload: str) -> ImageBuf:
    try:
        raw = base64.b64decode(payload, validate=True)
    except (binascii.Error, ValueError) as e:
        raise EncodingFailure(f"Invalid Base64 payload: {e}")
    return decode_image_bytes(raw, source="<base64>")


def text_block(text: str) -> Dict[str, str]:
    return {"type": "text", "text": text}


def image_block(payload: str) -> Dict[str, str]:
    return {"type": "image", "data": f"data:image/png;base64,{payload}"}


def format_priors(soft: SoftLabels) -> str:
    lines = [PRIOR_HEADER]
    for c in CANONICAL_ORDER:
        pa, pp = soft.presence[c]
        pm, ps = soft.severity[c]
        lines.append(f"{c.value}: presence {pa:.4f} {pp:.4f}; severity {pm:.4f} {ps:.4f}")
    return "\n".join(lines)


@dataclass(frozen=True)
class PromptDocument:
    """Ordered content blocks plus out-of-band annotations.

    Annotations (query id, ground truth, priors, context size) never enter the
    serialized bytes; only offline backends read them.
    """

    blocks: Tuple[Dict[str, str], ...]
    mode: str = "cot"
    annotations: Dict[str, Any] = field(default_factory=dict, compare=False)

    def to_bytes(self) -> bytes:
        payload = {"mode": self.mode, "blocks": list(self.blocks)}
        return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")

    @property
    def text(self) -> str:
        """Concatenated text blocks."""
        return "\n".join(b["text"] for b in self.blocks if b["type"] == "text")

    @property
    def image_count(self) -> int:
        return sum(1 for b in self.blocks if b["type"] == "image")

    def with_reminder(self) -> "PromptDocument":
        return replace(self, blocks=self.blocks + (text_block(FORMAT_REMINDER),))


def assemble_prompt(img: ImageBuf, soft: SoftLabels, ctx: FewShotContext, mode: str = "cot",
                    manifest: Optional[DatasetManifest] = None,
                    annotations: Optional[Dict[str, Any]] = None,
                    max_bytes: Optional[int] = None,
                    context_blocks: Optional[Sequence[Dict[str, str]]] = None) -> PromptDocument:
    """Build the prompt document for one query image.

    A nonempty context needs the manifest its exemplar ids come from, unless
    ``context_blocks`` already holds its rendering.
    Raises PromptBudgetExceeded when the serialized document is larger than
    the byte budget.
    """
    if mode not in MODES:
        raise ValueError(f"Unknown prompt mode {mode!r}")
    budget = settings.max_prompt_bytes if max_bytes is None else max_bytes

    query_payload = encode_image_base64(img)
    if len(query_payload) > budget:
        raise PromptBudgetExceeded("Query image alone exceeds the prompt budget",
                                   details={"bytes": len(query_payload), "budget": budget})

    blocks: List[Dict[str, str]] = [text_block(TASK_INSTRUCTIONS)]
    if len(ctx):
        if context_blocks is None:
            if manifest is None:
                raise ValueError("A nonempty context needs its manifest to render")
            context_blocks = render_context(ctx, manifest)
        blocks.append(text_block(CONTEXT_HEADER))
        blocks.extend(context_blocks)
    blocks.append(text_block(format_priors(soft)))
    blocks.append(text_block(QUERY_HEADER))
    blocks.append(image_block(query_payload))
    blocks.append(text_block(COT_INSTRUCTION if mode == "cot" else DIRECT_INSTRUCTION))
    blocks.append(text_block(ANSWER_FORMAT))

    notes = dict(annotations or {})
    notes.setdefault("context_k", len(ctx))
    notes.setdefault("soft_labels", soft)
    doc = PromptDocument(tuple(blocks), mode, notes)

    size = len(doc.to_bytes())
    if size > budget:
        raise PromptBudgetExceeded("Prompt exceeds the byte budget", details={"bytes": size, "budget": budget})
    return doc
