"""
Agent module for the surgical image enhancement pipeline.
Runs backend inference with response caching, parses the predicted label and
routes it to enhancement operators.
"""

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Dict, Optional, Tuple, Union

from scopeagent.config import settings
from scopeagent.core.cache import ResponseCache, cache_key
from scopeagent.core.imagecore import DistortionCategory, DistortionLabel, Severity, encode_label
from scopeagent.protocol.answer import ReasoningTrace, parse_prediction
from scopeagent.protocol.prompt import PromptDocument
from scopeagent.transport import AgentBackendDescriptor, BaseBackend, create_backend
from scopeagent.utils import logger
from scopeagent.utils.error import InvariantViolation, ParseFailure

if TYPE_CHECKING:
    from scopeagent.core.enhance import EnhancerRegistry


@dataclass(frozen=True)
class AgentPrediction:
    label: DistortionLabel
    trace: ReasoningTrace
    raw_response: str
    backend_meta: Dict[str, Any] = field(default_factory=dict, compare=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label": encode_label(self.label),
            "trace": list(self.trace.steps),
            "raw_response": self.raw_response,
            "backend_meta": dict(self.backend_meta),
        }


@dataclass(frozen=True)
class PlanStep:
    enhancer_id: str
    category: DistortionCategory
    severity: Severity

    def __str__(self) -> str:
        return f"{self.enhancer_id}@{self.severity.value}"

    def to_dict(self) -> Dict[str, str]:
        return {"enhancer_id": self.enhancer_id, "category": self.category.value, "severity": self.severity.value}


@dataclass(frozen=True)
class EnhancementPlan:
    steps: Tuple[PlanStep, ...] = ()

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def to_dict(self):
        return [s.to_dict() for s in self.steps]


def select_models(label: DistortionLabel, registry: "EnhancerRegistry") -> EnhancementPlan:
    """One registry enhancer per label entry, in the registry's chaining order."""
    rank = {c: i for i, c in enumerate(registry.chain_order)}
    steps = []
    for category, severity in sorted(label, key=lambda e: rank[e[0]]):
        spec = registry.lookup(category, severity)
        steps.append(PlanStep(spec.id, category, severity))
    return EnhancementPlan(tuple(steps))


def _complete(backend: BaseBackend, prompt: PromptDocument,
              cache: Optional[ResponseCache]) -> Tuple[str, Dict[str, Any]]:
    key = cache_key(backend.descriptor.model_id, prompt.to_bytes())
    if cache is not None:
        cached = cache.get(key)
        if cached is not None:
            return cached, {"model_id": backend.descriptor.model_id, "latency_ms": 0.0, "cache_hit": True}

    reply = backend.invoke(prompt)
    if cache is not None:
        cache.put(key, reply.text, meta={"model_id": backend.descriptor.model_id,
                                         "query_id": prompt.annotations.get("query_id")})
    return reply.text, {**reply.meta, "cache_hit": False}


def run_inference(backend: Union[BaseBackend, AgentBackendDescriptor], prompt: PromptDocument,
                  cache: Optional[ResponseCache] = None, reask: Optional[bool] = None) -> AgentPrediction:
    """Answer a prompt through the cache and backend, then parse the label.

    A response without a single valid answer object is re-asked once with a
    format reminder when ``reask`` is on.
    """
    if isinstance(backend, AgentBackendDescriptor):
        backend = create_backend(backend)
    reask = settings.reask_on_parse_failure if reask is None else reask

    raw, meta = _complete(backend, prompt, cache)
    try:
        try:
            label, trace = parse_prediction(raw, prompt.mode)
        except ParseFailure as e:
            if not reask:
                raise
            logger.warning("Unparsable backend response, asking again", query=prompt.annotations.get("query_id"),
                           error=e.message)
            raw, meta = _complete(backend, prompt.with_reminder(), cache)
            meta["reasked"] = True
            label, trace = parse_prediction(raw, prompt.mode)
    except InvariantViolation as e:
        e.details["raw_response"] = raw
        raise

    return AgentPrediction(label, trace, raw, meta)
