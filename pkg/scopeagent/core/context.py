"""
Few-shot context construction for the agent prompt.
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from scopeagent.config import settings
from scopeagent.core.imagecore import DatasetManifest, DistortionLabel, ManifestEntry, encode_label, load_image
from scopeagent.utils import logger
from scopeagent.utils.error import ConfigError, ImageIOError, InsufficientExemplars, ManifestError, MissingImage


@dataclass(frozen=True)
class ContextConfig:
    k: int = 15
    n_single: int = 8
    n_composite: int = 7
    seed: int = 0

    def __post_init__(self):
        if min(self.k, self.n_single, self.n_composite) < 0:
            raise ConfigError("Context counts must be nonnegative")
        if self.n_single + self.n_composite != self.k:
            raise ConfigError("Context single and composite counts must add up to k",
                              details={"k": self.k, "single": self.n_single, "composite": self.n_composite})

    @classmethod
    def defaults(cls, seed: int = 0) -> "ContextConfig":
        return cls(settings.context_k, settings.context_single, settings.context_composite, seed)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "ContextConfig":
        """Parse the run-config block {"k", "single", "composite", "seed"}.

        A bare {"k": 0} means no exemplars; other partial blocks fall back to
        the default split.
        """
        data = dict(data or {})
        unknown = set(data) - {"k", "single", "composite", "seed"}
        if unknown:
            raise ConfigError(f"Unknown context config keys: {sorted(unknown)}")
        base = cls.defaults()
        k = int(data.get("k", base.k))
        single = data.get("single")
        composite = data.get("composite")
        if single is None and composite is None:
            if k == base.k:
                single, composite = base.n_single, base.n_composite
            else:
                single = (k + 1) // 2
                composite = k - single
        elif single is None:
            single = k - int(composite)
        elif composite is None:
            composite = k - int(single)
        return cls(k, int(single), int(composite), int(data.get("seed", 0)))

    def to_dict(self) -> Dict[str, int]:
        return {"k": self.k, "single": self.n_single, "composite": self.n_composite, "seed": self.seed}

    @property
    def tag(self) -> str:
        return f"k={self.k} ({self.n_single}/{self.n_composite})"


@dataclass(frozen=True)
class FewShotContext:
    exemplars: Tuple[Tuple[str, DistortionLabel], ...] = ()

    def __len__(self) -> int:
        return len(self.exemplars)

    @property
    def ids(self) -> List[str]:
        return [i for i, _ in self.exemplars]


def _round_robin(entries: List[ManifestEntry], n: int, rng: np.random.Generator) -> List[ManifestEntry]:
    """Take n entries cycling through label classes so every class appears before any repeats."""
    classes: Dict[str, List[ManifestEntry]] = {}
    for entry in entries:
        classes.setdefault(encode_label(entry.label), []).append(entry)

    keys = sorted(classes)
    keys = [keys[i] for i in rng.permutation(len(keys))]
    queues = {key: [classes[key][i] for i in rng.permutation(len(classes[key]))] for key in keys}

    picked: List[ManifestEntry] = []
    while len(picked) < n:
        for key in keys:
            if queues[key] and len(picked) < n:
                picked.append(queues[key].pop(0))

    return [picked[i] for i in rng.permutation(len(picked))]


def build_context(manifest: DatasetManifest, config: ContextConfig) -> FewShotContext:
    """Sample labeled train exemplars: singles first, then composites."""
    if config.k == 0:
        return FewShotContext()

    train = sorted(manifest.split("train"), key=lambda e: e.id)
    singles = [e for e in train if len(e.label) == 1]
    composites = [e for e in train if len(e.label) >= 2]

    if len(singles) < config.n_single or len(composites) < config.n_composite:
        raise InsufficientExemplars(
            "Train split has too few exemplars for the context",
            details={
                "single_available": len(singles),
                "single_requested": config.n_single,
                "composite_available": len(composites),
                "composite_requested": config.n_composite,
            },
        )

    rng = np.random.default_rng(config.seed)
    chosen = _round_robin(singles, config.n_single, rng) + _round_robin(composites, config.n_composite, rng)
    logger.debug("Built few-shot context", k=config.k, seed=config.seed,
                 classes=len({encode_label(e.label) for e in chosen}))
    return FewShotContext(tuple((e.id, e.label) for e in chosen))


def render_context(ctx: FewShotContext, manifest: DatasetManifest) -> List[Dict[str, str]]:
    """Render exemplars as alternating image and label blocks.

    Each image block carries the Base64 PNG payload of the exemplar; the label
    block that follows holds its canonical label string.
    """
    # Local import: the prompt module depends on this one for FewShotContext
    from scopeagent.protocol.prompt import encode_image_base64, image_block, text_block

    blocks: List[Dict[str, str]] = []
    for number, (entry_id, label) in enumerate(ctx.exemplars, start=1):
        try:
            entry = manifest.get(entry_id)
            img = load_image(manifest.distorted_file(entry))
        except (ManifestError, ImageIOError) as e:
            raise MissingImage(f"Cannot resolve exemplar image {entry_id!r}", details={"id": entry_id, "error": str(e)})
        blocks.append(image_block(encode_image_base64(img)))
        blocks.append(text_block(f"Example {number} label: {encode_label(label)}"))
    return blocks
