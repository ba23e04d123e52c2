"""
Distortion synthesis module for the surgical image enhancement agent.
Generates low-light, over-exposure, motion-blur and smoke distortions from clean
images and assembles a paired benchmark manifest.
"""

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from scopeagent.config import settings
from scopeagent.core.imagecore import (
    ACTIVE_SEVERITIES,
    CANONICAL_ORDER,
    EXCLUSIVE_PAIR,
    DatasetManifest,
    DistortionCategory,
    DistortionLabel,
    ImageBuf,
    ManifestEntry,
    Severity,
    decode_label,
    encode_label,
    enumerate_valid_labels,
    load_image,
    load_manifest,
    save_image,
    save_manifest,
)
from scopeagent.utils import logger
from scopeagent.utils.error import (
    ConfigError,
    ContractViolation,
    InsufficientSourceImages,
    KernelExceedsImage,
    LabelError,
    SeverityUnsupported,
)

# Composition order: scene (smoke), optics (blur), sensor (exposure)
APPLICATION_ORDER = (
    DistortionCategory.SMOKE,
    DistortionCategory.MOTION_BLUR,
    DistortionCategory.OVER_EXPOSURE,
    DistortionCategory.LOW_LIGHT,
)
ORDER_NAMES = {"normal": 0, "single": 1, "second": 2, "third": 3}


@dataclass(frozen=True)
class LowLightParams:
    gamma: float
    gain: float
    noise_sigma: float


@dataclass(frozen=True)
class OverExposureParams:
    gain: float
    clip: bool = True


@dataclass(frozen=True)
class MotionBlurParams:
    kernel_length: int
    # None draws a uniform angle in [0, 180) per image
    angle: Optional[float] = None


@dataclass(frozen=True)
class SmokeParams:
    airlight: float
    beta: float
    noise_octaves: int = 4


_PARAM_TYPES = {
    DistortionCategory.LOW_LIGHT: LowLightParams,
    DistortionCategory.OVER_EXPOSURE: OverExposureParams,
    DistortionCategory.MOTION_BLUR: MotionBlurParams,
    DistortionCategory.SMOKE: SmokeParams,
}


@dataclass(frozen=True)
class SynthesisParams:
    """Per category and severity synthesis parameters."""

    low_light: Dict[Severity, LowLightParams] = field(default_factory=lambda: {
        Severity.MILD: LowLightParams(gamma=1.8, gain=0.7, noise_sigma=0.01),
        Severity.SEVERE: LowLightParams(gamma=2.8, gain=0.4, noise_sigma=0.03),
    })
    over_exposure: Dict[Severity, OverExposureParams] = field(default_factory=lambda: {
        Severity.MILD: OverExposureParams(gain=1.5),
        Severity.SEVERE: OverExposureParams(gain=2.2),
    })
    motion_blur: Dict[Severity, MotionBlurParams] = field(default_factory=lambda: {
        Severity.MILD: MotionBlurParams(kernel_length=7),
        Severity.SEVERE: MotionBlurParams(kernel_length=17),
    })
    smoke: Dict[Severity, SmokeParams] = field(default_factory=lambda: {
        Severity.SEVERE: SmokeParams(airlight=0.8, beta=1.2),
    })

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ConfigError("Invalid synthesis parameters", details=errors)

    def for_category(self, category: DistortionCategory) -> Dict[Severity, Any]:
        return getattr(self, category.value)

    def validate(self) -> Dict[str, str]:
        """Check parameter ranges and that severe dominates mild."""
        errors = {}
        for sev, p in self.low_light.items():
            if p.gamma <= 1.0 or not 0.0 < p.gain <= 1.0 or p.noise_sigma < 0:
                errors[f"low_light.{sev.value}"] = "Need gamma > 1, 0 < gain <= 1, noise_sigma >= 0"
        for sev, p in self.over_exposure.items():
            if p.gain <= 1.0:
                errors[f"over_exposure.{sev.value}"] = "Need gain > 1"
        for sev, p in self.motion_blur.items():
            if p.kernel_length < 1:
                errors[f"motion_blur.{sev.value}"] = "Need kernel_length >= 1"
        for sev, p in self.smoke.items():
            if not 0.0 <= p.airlight <= 1.0 or p.beta < 0 or p.noise_octaves < 1:
                errors[f"smoke.{sev.value}"] = "Need airlight in [0, 1], beta >= 0, noise_octaves >= 1"
        if Severity.MILD in self.smoke:
            errors["smoke.mild"] = "Smoke is only synthesized as severe"

        mild, severe = Severity.MILD, Severity.SEVERE
        if mild in self.low_light and severe in self.low_light:
            if not self.low_light[severe].gamma > self.low_light[mild].gamma:
                errors["low_light"] = "Severe gamma must exceed mild gamma"
        if mild in self.over_exposure and severe in self.over_exposure:
            if not self.over_exposure[severe].gain > self.over_exposure[mild].gain:
                errors["over_exposure"] = "Severe gain must exceed mild gain"
        if mild in self.motion_blur and severe in self.motion_blur:
            if not self.motion_blur[severe].kernel_length > self.motion_blur[mild].kernel_length:
                errors["motion_blur"] = "Severe kernel must be longer than mild kernel"
        return errors

    def to_dict(self) -> Dict[str, Any]:
        return {
            c.value: {s.value: asdict(p) for s, p in self.for_category(c).items()}
            for c in CANONICAL_ORDER
        }

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "SynthesisParams":
        """Overlay a partial {category: {severity: {field: value}}} document on the defaults."""
        base = cls()
        if not data:
            return base
        updates = {}
        for key, per_sev in data.items():
            try:
                category = DistortionCategory(key)
            except ValueError:
                raise ConfigError(f"Unknown distortion category {key!r} in synthesis params")
            table = dict(base.for_category(category))
            for sev_key, values in per_sev.items():
                sev = Severity(sev_key)
                ptype = _PARAM_TYPES[category]
                try:
                    table[sev] = replace(table[sev], **values) if sev in table else ptype(**values)
                except TypeError as e:
                    raise ConfigError(f"Bad synthesis params for {key}:{sev_key}: {e}")
            updates[category.value] = table
        return replace(base, **updates)


def _require_active(severity: Severity) -> None:
    if severity is Severity.NORMAL:
        raise ContractViolation("Synthesis needs severity mild or severe")


def _params_for(params: SynthesisParams, category: DistortionCategory, severity: Severity):
    table = params.for_category(category)
    if severity not in table:
        raise SeverityUnsupported(f"No {severity.value} parameters for {category.value}")
    return table[severity]


def synth_low_light(img: ImageBuf, severity: Severity, params: SynthesisParams,
                    rng: np.random.Generator) -> ImageBuf:
    """Darken: clamp(gain * in^gamma) plus gaussian noise, clamped to [0, 1]."""
    _require_active(severity)
    p = _params_for(params, DistortionCategory.LOW_LIGHT, severity)
    out = np.clip(p.gain * np.power(img.data, p.gamma), 0.0, 1.0)
    if p.noise_sigma > 0:
        out = out + rng.normal(0.0, p.noise_sigma, size=out.shape)
    return ImageBuf.from_array(out)


def synth_over_exposure(img: ImageBuf, severity: Severity, params: SynthesisParams,
                        rng: Optional[np.random.Generator] = None) -> ImageBuf:
    """Brighten by a gain. Hard clip by default, a tanh saturation knee when clip is off."""
    _require_active(severity)
    p = _params_for(params, DistortionCategory.OVER_EXPOSURE, severity)
    if p.clip:
        out = p.gain * img.data
    else:
        out = np.tanh(p.gain * img.data) / math.tanh(p.gain)
    return ImageBuf.from_array(out)


def motion_kernel(length: int, angle: float = 0.0) -> np.ndarray:
    """Normalized linear motion kernel, bilinearly splatted along a line through the center.

    ``angle`` is in degrees, counter-clockwise from the horizontal axis.
    """
    if length < 1:
        raise ContractViolation("Motion kernel length must be at least 1")
    size = length if length % 2 == 1 else length + 1
    center = size // 2
    kernel = np.zeros((size, size))
    theta = math.radians(angle)
    cos_t, sin_t = math.cos(theta), math.sin(theta)

    for t in np.arange(length) - (length - 1) / 2.0:
        x = center + t * cos_t
        y = center - t * sin_t
        x0, y0 = math.floor(x), math.floor(y)
        fx, fy = x - x0, y - y0
        for dy, wy in ((0, 1.0 - fy), (1, fy)):
            for dx, wx in ((0, 1.0 - fx), (1, fx)):
                w = wy * wx
                if w > 1e-12 and 0 <= y0 + dy < size and 0 <= x0 + dx < size:
                    kernel[y0 + dy, x0 + dx] += w

    return kernel / kernel.sum()


def convolve_rgb(data: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 2-D convolution with reflected borders."""
    return ndimage.convolve(data, kernel[:, :, np.newaxis], mode="reflect")


def synth_motion_blur(img: ImageBuf, severity: Severity, params: SynthesisParams,
                      angle: Optional[float] = None) -> ImageBuf:
    """Convolve with a linear motion kernel. ``angle`` overrides the preset angle."""
    _require_active(severity)
    p = _params_for(params, DistortionCategory.MOTION_BLUR, severity)
    if p.kernel_length < 1:
        raise ContractViolation("Motion kernel length must be at least 1")
    if p.kernel_length > min(img.width, img.height):
        raise KernelExceedsImage(f"Kernel length {p.kernel_length} exceeds image size",
                                 details={"width": img.width, "height": img.height})
    if p.kernel_length == 1:
        return img

    theta = angle if angle is not None else (p.angle if p.angle is not None else 0.0)
    return ImageBuf.from_array(convolve_rgb(img.data, motion_kernel(p.kernel_length, theta)))


def smoke_density(height: int, width: int, octaves: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth multi-octave noise field rescaled to [0, 1]."""
    density = np.zeros((height, width))
    amplitude = 1.0
    for octave in range(octaves):
        cells = 2 ** (octave + 1) + 1
        grid = rng.random((cells, cells))
        yy = np.linspace(0.0, cells - 1.0, height)
        xx = np.linspace(0.0, cells - 1.0, width)
        coords = np.meshgrid(yy, xx, indexing="ij")
        density += amplitude * ndimage.map_coordinates(grid, coords, order=3, mode="nearest")
        amplitude *= 0.5

    lo, hi = density.min(), density.max()
    if hi - lo < 1e-12:
        return np.zeros((height, width))
    return (density - lo) / (hi - lo)


def smoke_transmission(height: int, width: int, params: SmokeParams,
                       rng: np.random.Generator) -> np.ndarray:
    """Transmission t = exp(-beta * d) of a seeded density field d."""
    return np.exp(-params.beta * smoke_density(height, width, params.noise_octaves, rng))


def synth_smoke(img: ImageBuf, severity: Severity, params: SynthesisParams,
                rng: np.random.Generator) -> ImageBuf:
    """Koschmieder haze: out = in * t + airlight * (1 - t)."""
    _require_active(severity)
    if severity is not Severity.SEVERE:
        raise SeverityUnsupported("Smoke is only synthesized as severe")
    p = _params_for(params, DistortionCategory.SMOKE, severity)
    t = smoke_transmission(img.height, img.width, p, rng)[:, :, np.newaxis]
    return ImageBuf.from_array(img.data * t + p.airlight * (1.0 - t))


def compose_with_record(img: ImageBuf, label: DistortionLabel, params: SynthesisParams,
                        rng: np.random.Generator) -> Tuple[ImageBuf, Dict[str, Any]]:
    """Apply every label entry in scene, optics, sensor order.

    Returns the distorted image and the exact parameters used per category.
    """
    applied: Dict[str, Any] = {}
    out = img
    for category in APPLICATION_ORDER:
        severity = label.severity_of(category)
        if severity is Severity.NORMAL:
            continue
        p = _params_for(params, category, severity)
        record = {"severity": severity.value, **asdict(p)}

        if category is DistortionCategory.SMOKE:
            out = synth_smoke(out, severity, params, rng)
        elif category is DistortionCategory.MOTION_BLUR:
            angle = p.angle if p.angle is not None else float(rng.uniform(0.0, 180.0))
            record["angle"] = angle
            out = synth_motion_blur(out, severity, params, angle=angle)
        elif category is DistortionCategory.OVER_EXPOSURE:
            out = synth_over_exposure(out, severity, params, rng)
        else:
            out = synth_low_light(out, severity, params, rng)
        applied[category.value] = record
    return out, applied


def compose_distortions(img: ImageBuf, label: DistortionLabel, params: SynthesisParams,
                        rng: np.random.Generator) -> ImageBuf:
    """Apply a composite label to an image. The empty label is the identity."""
    return compose_with_record(img, label, params, rng)[0]


# ---------------------------------------------------------------------------
# Benchmark construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkConfig:
    """How many images to synthesize per order or label cell, and from what."""

    source_manifest: str
    seed: int = 0
    counts: Dict[str, int] = field(default_factory=dict)
    allowed_composites: Optional[Tuple[frozenset, ...]] = None
    params: SynthesisParams = field(default_factory=SynthesisParams)
    test_fraction: float = 0.25
    reuse_sources: bool = False
    resize: Optional[int] = None
    output_dir: Optional[str] = None

    def __post_init__(self):
        for key, n in self.counts.items():
            if n < 0:
                raise ConfigError(f"Negative count for {key!r}")
            if key not in ORDER_NAMES:
                try:
                    decode_label(key)
                except LabelError as e:
                    raise ConfigError(f"Count key {key!r} is neither an order nor a valid label: {e.message}")
        if not 0.0 <= self.test_fraction <= 1.0:
            raise ConfigError("test_fraction must lie in [0, 1]")
        for combo in self.allowed_composites or ():
            if len(combo) not in (2, 3) or EXCLUSIVE_PAIR.issubset(combo):
                raise ConfigError("Allowed composites must be valid sets of two or three categories",
                                  details={"composite": sorted(c.value for c in combo)})

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: Optional[Path] = None) -> "BenchmarkConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown benchmark config keys: {sorted(unknown)}")
        if "source_manifest" not in data:
            raise ConfigError("Benchmark config needs source_manifest")

        kwargs = dict(data)
        if base_dir is not None and not os.path.isabs(kwargs["source_manifest"]):
            kwargs["source_manifest"] = str(base_dir / kwargs["source_manifest"])
        if kwargs.get("allowed_composites") is not None:
            try:
                kwargs["allowed_composites"] = tuple(
                    frozenset(DistortionCategory(c) for c in combo) for combo in kwargs["allowed_composites"]
                )
            except ValueError as e:
                raise ConfigError(f"Unknown category in allowed_composites: {e}")
        kwargs["params"] = SynthesisParams.from_dict(kwargs.get("params"))
        return cls(**kwargs)

    def composites_allowed(self, label: DistortionLabel) -> bool:
        if len(label) < 2 or self.allowed_composites is None:
            return True
        return frozenset(label.categories) in self.allowed_composites


def expand_cells(config: BenchmarkConfig) -> List[Tuple[DistortionLabel, int]]:
    """Resolve configured counts into (label, count) cells.

    Order totals are spread round-robin across that order's labels in canonical
    enumeration order; explicit label keys add to their cell.
    """
    valid = enumerate_valid_labels()
    cells: Dict[str, int] = {}

    for key, n in config.counts.items():
        if key in ORDER_NAMES:
            order = ORDER_NAMES[key]
            labels = [lab for lab in valid if len(lab) == order and config.composites_allowed(lab)]
            if not labels:
                if n:
                    raise ConfigError(f"No allowed labels of order {key!r}")
                continue
            for i, lab in enumerate(labels):
                share = n // len(labels) + (1 if i < n % len(labels) else 0)
                if share:
                    cells[encode_label(lab)] = cells.get(encode_label(lab), 0) + share
        else:
            lab = decode_label(key)
            cells[encode_label(lab)] = cells.get(encode_label(lab), 0) + n

    position = {encode_label(lab): i for i, lab in enumerate(valid)}
    return [(decode_label(k), cells[k]) for k in sorted(cells, key=position.__getitem__) if cells[k]]


def _synthesize_entry(job: Dict[str, Any]) -> ManifestEntry:
    config: BenchmarkConfig = job["config"]
    out_dir: Path = job["out_dir"]
    label: DistortionLabel = job["label"]
    entry_id: str = job["id"]
    source: Path = job["source"]

    rng = np.random.default_rng([config.seed, job["index"]])
    clean = load_image(source, resize=config.resize)
    distorted, applied = compose_with_record(clean, label, config.params, rng)

    image_path = out_dir / "images" / f"{entry_id}.png"
    save_image(distorted, image_path)

    if config.resize:
        clean_path = out_dir / "clean" / f"{entry_id}.png"
        save_image(clean, clean_path)
    else:
        clean_path = source

    sidecar = {
        "id": entry_id,
        "label": encode_label(label),
        "source": os.path.relpath(source, out_dir),
        "seed": [config.seed, job["index"]],
        "params": applied,
    }
    with open(image_path.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)

    return ManifestEntry(
        id=entry_id,
        clean_path=os.path.relpath(clean_path, out_dir),
        distorted_path=os.path.relpath(image_path, out_dir),
        label=label,
        split=job["split"],
    )


def build_benchmark(config: BenchmarkConfig, out_dir: Optional[str] = None) -> DatasetManifest:
    """Synthesize the benchmark and write images, sidecars and manifest.json to the output dir."""
    out = Path(out_dir or config.output_dir or ".")
    (out / "images").mkdir(parents=True, exist_ok=True)

    source_manifest = load_manifest(config.source_manifest)
    sources = [source_manifest.source_file(e) for e in source_manifest]
    cells = expand_cells(config)
    total = sum(n for _, n in cells)

    if total > len(sources) and not config.reuse_sources:
        raise InsufficientSourceImages(
            f"Requested {total} images from {len(sources)} clean sources",
            details={"requested": total, "available": len(sources)},
        )
    if total and not sources:
        raise InsufficientSourceImages("Source manifest holds no images")

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(sources)) if sources else np.array([], dtype=int)

    jobs = []
    index = 0
    for label, n in cells:
        n_test = int(round(n * config.test_fraction))
        for j in range(n):
            jobs.append({
                "config": config,
                "out_dir": out,
                "label": label,
                "index": index,
                "id": f"img{index:05d}",
                "source": sources[int(order[index % len(sources)])],
                "split": "test" if j >= n - n_test else "train",
            })
            index += 1

    logger.info("Synthesizing benchmark", images=total, cells=len(cells), seed=config.seed, out=str(out))
    with ThreadPoolExecutor(max_workers=settings.max_parallel) as pool:
        entries = list(tqdm(pool.map(_synthesize_entry, jobs), total=len(jobs),
                            desc="Synthesizing", disable=not settings.progress))

    manifest = DatasetManifest(tuple(entries), root=out)
    save_manifest(manifest, out / "manifest.json")
    return manifest


def load_sidecar(distorted_file: Path) -> Optional[Dict[str, Any]]:
    """Read the synthesis sidecar next to a distorted image, if one exists."""
    path = Path(distorted_file).with_suffix(".json")
    if not path.is_file():
        return None
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
