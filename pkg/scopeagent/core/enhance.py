"""
Enhancement module for the surgical image enhancement agent.
Classical enhancement operators behind a (category, severity) registry and the
plan executor that chains them.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from scopeagent.config import settings
from scopeagent.core.agent import EnhancementPlan
from scopeagent.core.imagecore import (
    ACTIVE_SEVERITIES,
    CANONICAL_ORDER,
    DistortionCategory,
    ImageBuf,
    Severity,
)
from scopeagent.core.synthesis import convolve_rgb, motion_kernel
from scopeagent.utils import logger
from scopeagent.utils.error import (
    ContractViolation,
    KernelExceedsImage,
    NoModelForLabel,
    RegistryError,
    SeverityUnsupported,
)

DEFAULT_REGISTRY_PATH = Path(__file__).resolve().parent.parent / "config" / "default_registry.json"


def _require_active(severity: Severity) -> None:
    if severity is Severity.NORMAL:
        raise ContractViolation("Enhancement needs severity mild or severe")


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------

def enhance_low_light(img: ImageBuf, severity: Severity, preset: Mapping[str, Any]) -> ImageBuf:
    """Inverse gamma brightening clamp(in / gain)^(1 / gamma), median denoised when severe."""
    _require_active(severity)
    gain = float(preset.get("gain", 1.0))
    gamma = float(preset.get("gamma", 1.0))
    out = np.power(np.clip(img.data / gain, 0.0, 1.0), 1.0 / gamma)

    size = int(preset.get("median_size", 3 if severity is Severity.SEVERE else 0))
    if severity is Severity.SEVERE and size > 1:
        out = ndimage.median_filter(out, size=(size, size, 1), mode="reflect")
    return ImageBuf.from_array(out)


def correct_exposure(img: ImageBuf, severity: Severity, preset: Mapping[str, Any]) -> ImageBuf:
    """Global tone compression in / gain with a tanh highlight rolloff above the knee."""
    _require_active(severity)
    gain = float(preset.get("gain", 1.0))
    knee = float(preset.get("knee", 0.9))
    out = img.data / gain
    over = out > knee
    if np.any(over):
        span = 1.0 - knee
        out = np.where(over, knee + span * np.tanh((out - knee) / span), out)
    return ImageBuf.from_array(out)


def richardson_lucy(data: np.ndarray, kernel: np.ndarray, iterations: int) -> np.ndarray:
    """Per-channel Richardson-Lucy deconvolution started from the observation."""
    kernel = kernel / kernel.sum()
    mirror = kernel[::-1, ::-1]
    estimate = data.copy()
    for _ in range(iterations):
        blurred = np.maximum(convolve_rgb(estimate, kernel), 1e-12)
        estimate = np.maximum(estimate * convolve_rgb(data / blurred, mirror), 0.0)
    return estimate


def deblur(img: ImageBuf, severity: Severity, preset: Mapping[str, Any]) -> ImageBuf:
    """Richardson-Lucy deconvolution with the preset's linear motion kernel.

    ``preset["angle"]`` (degrees) defaults to horizontal.
    """
    _require_active(severity)
    length = int(preset.get("kernel_length", 7))
    iterations = int(preset.get("iterations", settings.rl_iterations))
    if length > min(img.width, img.height):
        raise KernelExceedsImage(f"Kernel length {length} exceeds image size",
                                 details={"width": img.width, "height": img.height})
    if iterations <= 0 or length <= 1:
        return img

    kernel = motion_kernel(length, float(preset.get("angle") or 0.0))
    return ImageBuf.from_array(richardson_lucy(img.data, kernel, iterations))


def dark_channel(data: np.ndarray, patch: int) -> np.ndarray:
    """Minimum over channels of the local minimum in a patch x patch window."""
    return ndimage.minimum_filter(data.min(axis=2), size=patch, mode="reflect")


def estimate_airlight(data: np.ndarray, dark: np.ndarray, top_percent: float = 0.1) -> np.ndarray:
    """Mean color of the brightest top_percent of dark-channel pixels."""
    flat = dark.reshape(-1)
    n = max(int(flat.size * top_percent / 100.0), 1)
    idx = np.argsort(flat, kind="stable")[-n:]
    return data.reshape(-1, 3)[idx].mean(axis=0)


def guided_filter(src: np.ndarray, guide: np.ndarray, window: int, eps: float) -> np.ndarray:
    """Edge-preserving smoothing of src steered by a grayscale guide."""
    mean_i = ndimage.uniform_filter(guide, size=window, mode="reflect")
    mean_p = ndimage.uniform_filter(src, size=window, mode="reflect")
    corr_ip = ndimage.uniform_filter(guide * src, size=window, mode="reflect")
    corr_ii = ndimage.uniform_filter(guide * guide, size=window, mode="reflect")

    a = (corr_ip - mean_i * mean_p) / (corr_ii - mean_i * mean_i + eps)
    b = mean_p - a * mean_i
    return (ndimage.uniform_filter(a, size=window, mode="reflect") * guide
            + ndimage.uniform_filter(b, size=window, mode="reflect"))


def desmoke(img: ImageBuf, severity: Severity, preset: Mapping[str, Any]) -> ImageBuf:
    """Dark-channel-prior smoke removal.

    Transmission t = 1 - omega * dark_channel(in / A) is refined with a guided
    filter and floored at t_min; J = (in - A) / t + A where in < A, in elsewhere.
    """
    _require_active(severity)
    if severity is not Severity.SEVERE:
        raise SeverityUnsupported("Smoke is only removed at severity severe")

    omega = float(preset.get("omega", 0.95))
    if omega == 0.0:
        return img
    patch = int(preset.get("patch", 15))
    t_min = float(preset.get("t_min", 0.1))

    data = img.data
    airlight = estimate_airlight(data, dark_channel(data, patch), float(preset.get("top_percent", 0.1)))
    safe_a = np.maximum(airlight, 1e-6)
    t = 1.0 - omega * dark_channel(data / safe_a, patch)

    window = int(preset.get("guided_window", 0))
    if window > 1:
        t = guided_filter(t, img.luminance(), window, float(preset.get("guided_eps", 1e-3)))
    t = np.clip(t, t_min, 1.0)[:, :, np.newaxis]

    recovered = (data - airlight) / t + airlight
    # pixels at or above the airlight hold no haze to remove
    out = np.where(data < airlight, recovered, data)
    return ImageBuf.from_array(out)


OPERATORS: Dict[str, Callable[[ImageBuf, Severity, Mapping[str, Any]], ImageBuf]] = {
    "low_light_enhancer": enhance_low_light,
    "exposure": correct_exposure,
    "deblur": deblur,
    "desmoke": desmoke,
}

CATEGORY_OPERATORS = {
    DistortionCategory.LOW_LIGHT: "low_light_enhancer",
    DistortionCategory.OVER_EXPOSURE: "exposure",
    DistortionCategory.MOTION_BLUR: "deblur",
    DistortionCategory.SMOKE: "desmoke",
}


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnhancerSpec:
    id: str
    operator: str
    preset: Dict[str, Any] = field(default_factory=dict)

    def apply(self, img: ImageBuf, severity: Severity, overrides: Optional[Mapping[str, Any]] = None) -> ImageBuf:
        preset = {**self.preset, **(overrides or {})}
        return OPERATORS[self.operator](img, severity, preset)


def required_cells() -> List[Tuple[DistortionCategory, Severity]]:
    """Every (category, severity) pair a registry must cover."""
    return [
        (c, s) for c in CANONICAL_ORDER for s in ACTIVE_SEVERITIES
        if not (c is DistortionCategory.SMOKE and s is Severity.MILD)
    ]


@dataclass(frozen=True)
class EnhancerRegistry:
    """Enhancers keyed by (category, severity) plus the order plans chain them in."""

    entries: Dict[Tuple[DistortionCategory, Severity], EnhancerSpec]
    chain_order: Tuple[DistortionCategory, ...] = CANONICAL_ORDER
    strict: bool = True

    def __post_init__(self):
        ids = [spec.id for spec in self.entries.values()]
        if len(set(ids)) != len(ids):
            raise RegistryError("Enhancer ids must be unique", details={"ids": sorted(ids)})
        for spec in self.entries.values():
            if spec.operator not in OPERATORS:
                raise RegistryError(f"Unknown operator {spec.operator!r}", details={"id": spec.id})
        if sorted(c.value for c in self.chain_order) != sorted(c.value for c in CANONICAL_ORDER):
            raise RegistryError("chain_order must list every category exactly once")
        if self.strict:
            missing = [f"{c.value}:{s.value}" for c, s in required_cells() if (c, s) not in self.entries]
            if missing:
                raise RegistryError("Registry does not cover every category and severity",
                                    details={"missing": missing})

    def lookup(self, category: DistortionCategory, severity: Severity) -> EnhancerSpec:
        spec = self.entries.get((category, severity))
        if spec is None:
            raise NoModelForLabel(f"No enhancer for {category.value}:{severity.value}",
                                  details={"category": category.value, "severity": severity.value})
        return spec

    def by_id(self, enhancer_id: str) -> EnhancerSpec:
        for spec in self.entries.values():
            if spec.id == enhancer_id:
                return spec
        raise NoModelForLabel(f"No enhancer with id {enhancer_id!r}")

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"chain_order": [c.value for c in self.chain_order]}
        for (c, s), spec in sorted(self.entries.items(), key=lambda kv: (kv[0][0].rank, kv[0][1].value)):
            data[f"{c.value}:{s.value}"] = {"id": spec.id, "operator": spec.operator, "preset": spec.preset}
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], strict: bool = True) -> "EnhancerRegistry":
        entries = {}
        chain = CANONICAL_ORDER
        for key, value in data.items():
            if key == "chain_order":
                try:
                    chain = tuple(DistortionCategory(c) for c in value)
                except ValueError as e:
                    raise RegistryError(f"Unknown category in chain_order: {e}")
                continue
            try:
                cat_name, sev_name = key.split(":")
                category, severity = DistortionCategory(cat_name), Severity(sev_name)
            except ValueError:
                raise RegistryError(f"Registry key {key!r} is not category:severity")
            if severity is Severity.NORMAL:
                raise RegistryError(f"Registry key {key!r} names severity normal")
            if not isinstance(value, dict) or "id" not in value:
                raise RegistryError(f"Registry entry {key!r} needs an id")
            entries[(category, severity)] = EnhancerSpec(
                id=str(value["id"]),
                operator=value.get("operator", CATEGORY_OPERATORS[category]),
                preset=dict(value.get("preset", {})),
            )
        return cls(entries, chain, strict)


def load_registry(path: Optional[Union[str, Path]] = None) -> EnhancerRegistry:
    """Read a registry JSON file; the shipped default when no path is given."""
    path = Path(path) if path else DEFAULT_REGISTRY_PATH
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise RegistryError(f"Registry not found: {path}", details={"path": str(path)})
    except json.JSONDecodeError as e:
        raise RegistryError(f"Registry is not valid JSON: {e}", details={"path": str(path)})
    registry = EnhancerRegistry.from_dict(data)
    logger.debug("Loaded enhancer registry", path=str(path), entries=len(registry.entries))
    return registry


def save_registry(registry: EnhancerRegistry, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(registry.to_dict(), indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Plan execution
# ---------------------------------------------------------------------------

def sidecar_overrides(step_category: DistortionCategory, metadata: Optional[Mapping[str, Any]]) -> Dict[str, Any]:
    """Preset overrides known from synthesis metadata: the true blur angle."""
    if not metadata or step_category is not DistortionCategory.MOTION_BLUR:
        return {}
    blur = metadata.get("params", {}).get(DistortionCategory.MOTION_BLUR.value)
    if blur and blur.get("angle") is not None:
        return {"angle": float(blur["angle"])}
    return {}


def apply_plan(img: ImageBuf, plan: EnhancementPlan, registry: EnhancerRegistry,
               metadata: Optional[Mapping[str, Any]] = None) -> Tuple[ImageBuf, List[Dict[str, Any]]]:
    """Run the plan's steps in order, recording provenance for each one."""
    provenance = []
    current = img
    for step in plan:
        spec = registry.by_id(step.enhancer_id)
        overrides = sidecar_overrides(step.category, metadata)
        before = current.digest()
        current = spec.apply(current, step.severity, overrides)
        provenance.append({
            "enhancer_id": spec.id,
            "severity": step.severity.value,
            "params": {**spec.preset, **overrides},
            "input_hash": before,
            "output_hash": current.digest(),
        })
    return current, provenance
