"""
Offline agent backend answering by a configured labeling policy.
"""

import hashlib
from typing import Optional

import numpy as np

from scopeagent.core.imagecore import DistortionLabel, decode_label, encode_label, enumerate_valid_labels
from scopeagent.core.prior import hard_label
from scopeagent.protocol.answer import format_answer
from scopeagent.protocol.prompt import PromptDocument
from scopeagent.transport.base import AgentBackendDescriptor, BackendReply, BaseBackend
from scopeagent.utils.error import BackendRefusal, ConfigError, LabelError

POLICIES = ("ground-truth", "echo-prior", "fixed-label", "noisy")


def scheduled_epsilon(k: int) -> float:
    """Corruption rate of the noisy policy as a function of context size."""
    return max(0.05, 0.35 - 0.02 * k)


def _stable_int(text: str) -> int:
    return int(hashlib.sha256(text.encode("utf-8")).hexdigest()[:16], 16)


class MockBackend(BaseBackend):
    """Deterministic backend for offline runs.

    Policies:
      ground-truth  the query's annotated ground truth
      echo-prior    hard label of the annotated priors (presence threshold 0.5)
      fixed-label   ``options["label"]`` for every query
      noisy         ground truth, replaced by a different valid label with
                    probability ``options["epsilon"]`` (a number, or "schedule")

    Corruption draws depend only on (seed, query id), so at a lower epsilon
    the corrupted queries are a subset of those at a higher one.
    """

    def __init__(self, descriptor: AgentBackendDescriptor):
        super().__init__(descriptor)
        options = descriptor.options
        self.policy = options.get("policy", "ground-truth")
        if self.policy not in POLICIES:
            raise ConfigError(f"Unknown mock policy {self.policy!r}", details={"policies": list(POLICIES)})
        self.seed = int(options.get("seed", 0))
        self.epsilon = options.get("epsilon", "schedule")
        if self.epsilon != "schedule" and not 0.0 <= float(self.epsilon) <= 1.0:
            raise ConfigError("Noisy epsilon must lie in [0, 1] or be \"schedule\"")

        self.fixed: Optional[DistortionLabel] = None
        if self.policy == "fixed-label":
            try:
                self.fixed = decode_label(options.get("label", "normal"))
            except LabelError as e:
                raise ConfigError(f"Invalid fixed label: {e.message}")

        self._alternatives = enumerate_valid_labels()

    def complete(self, prompt: PromptDocument) -> BackendReply:
        label = self._decide(prompt)
        text = f"1. Applied the {self.policy} policy.\n{format_answer(label)}"
        return BackendReply(text, {"latency_ms": 0.0})

    def _ground_truth(self, prompt: PromptDocument) -> DistortionLabel:
        truth = prompt.annotations.get("ground_truth")
        if truth is None:
            raise BackendRefusal(f"Policy {self.policy} needs a ground-truth annotation")
        return truth

    def _decide(self, prompt: PromptDocument) -> DistortionLabel:
        if self.policy == "fixed-label":
            return self.fixed
        if self.policy == "echo-prior":
            soft = prompt.annotations.get("soft_labels")
            if soft is None:
                raise BackendRefusal("Policy echo-prior needs prior annotations")
            return hard_label(soft, 0.5)

        truth = self._ground_truth(prompt)
        if self.policy == "ground-truth":
            return truth

        k = int(prompt.annotations.get("context_k", 0))
        eps = scheduled_epsilon(k) if self.epsilon == "schedule" else float(self.epsilon)
        query = str(prompt.annotations.get("query_id") or hashlib.sha256(prompt.to_bytes()).hexdigest())
        rng = np.random.default_rng([self.seed, _stable_int(query)])
        draw, pick = rng.random(), rng.random()
        if draw >= eps:
            return truth
        others = [lab for lab in self._alternatives if encode_label(lab) != encode_label(truth)]
        return others[int(pick * len(others))]
