"""
Prior model module for the surgical image enhancement agent.
Handcrafted image statistics feed per-category logistic heads whose
temperature-smoothed softmax outputs are the soft labels given to the agent.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from scopeagent.config import settings
from scopeagent.core.imagecore import (
    CANONICAL_ORDER,
    EXCLUSIVE_PAIR,
    DatasetManifest,
    DistortionCategory,
    DistortionLabel,
    ImageBuf,
    Severity,
    load_image,
)
from scopeagent.utils import logger
from scopeagent.utils.error import (
    ConfigError,
    DegenerateData,
    InvalidTemperature,
    IoFailure,
    NonFiniteLoss,
)

FEATURE_NAMES = (
    "mean_luminance",
    "luminance_std",
    "shadow_clip",
    "highlight_clip",
    "gradient_magnitude",
    "laplacian_variance",
    "dark_channel_mean",
    "local_contrast",
    "saturation_mean",
    "histogram_entropy",
)
# Heavy-tailed statistics enter the heads as log(x + LOG_EPS)
LOG_SCALED = ("luminance_std", "gradient_magnitude", "laplacian_variance", "local_contrast")
LOG_EPS = 1e-4
FEATURE_SCHEMA_VERSION = 1

SHADOW_LEVEL = 0.05
HIGHLIGHT_LEVEL = 0.95
DARK_CHANNEL_PATCH = 15
CONTRAST_WINDOW = 7
HISTOGRAM_BINS = 256

SEVERITY_CLASSES = (Severity.MILD, Severity.SEVERE)


@dataclass(frozen=True)
class FeatureVector:
    """Named image statistics in FEATURE_NAMES order."""

    values: Tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != len(FEATURE_NAMES):
            raise ValueError(f"Expected {len(FEATURE_NAMES)} features, got {len(self.values)}")

    def __getitem__(self, name: str) -> float:
        return self.values[FEATURE_NAMES.index(name)]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def to_dict(self) -> Dict[str, float]:
        return dict(zip(FEATURE_NAMES, self.values))


def extract_features(img: ImageBuf) -> FeatureVector:
    """Compute the ten prior statistics of an image."""
    lum = img.luminance()

    gx = ndimage.sobel(lum, axis=1, mode="reflect") / 8.0
    gy = ndimage.sobel(lum, axis=0, mode="reflect") / 8.0
    gradient = float(np.mean(np.hypot(gx, gy)))
    laplacian = float(np.var(ndimage.laplace(lum, mode="reflect")))

    dark = ndimage.minimum_filter(img.data.min(axis=2), size=DARK_CHANNEL_PATCH, mode="reflect")

    local_mean = ndimage.uniform_filter(lum, size=CONTRAST_WINDOW, mode="reflect")
    local_sq = ndimage.uniform_filter(lum * lum, size=CONTRAST_WINDOW, mode="reflect")
    local_contrast = float(np.mean(np.sqrt(np.maximum(local_sq - local_mean ** 2, 0.0))))

    cmax = img.data.max(axis=2)
    cmin = img.data.min(axis=2)
    saturation = np.divide(cmax - cmin, cmax, out=np.zeros_like(cmax), where=cmax > 0)

    hist, _ = np.histogram(lum, bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    prob = hist[hist > 0] / lum.size
    entropy = float(-np.sum(prob * np.log2(prob)))

    return FeatureVector((
        float(lum.mean()),
        float(lum.std()),
        float(np.mean(lum < SHADOW_LEVEL)),
        float(np.mean(lum > HIGHLIGHT_LEVEL)),
        gradient,
        laplacian,
        float(dark.mean()),
        local_contrast,
        float(saturation.mean()),
        max(entropy, 0.0),
    ))


def softmax_t(logits: Sequence[float], temperature: float) -> np.ndarray:
    """Temperature softmax with max-subtraction: p_i = exp(l_i / T) / sum_j exp(l_j / T)."""
    if not temperature > 0 or not math.isfinite(temperature):
        raise InvalidTemperature(f"Temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class HeadWeights:
    """Affine map from standardized features to two logits."""

    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros(cls, n_features: int = len(FEATURE_NAMES)) -> "HeadWeights":
        return cls(np.zeros((2, n_features)), np.zeros(2))

    def logits(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights.T + self.bias

    def to_dict(self) -> Dict[str, list]:
        return {"weights": self.weights.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, list]) -> "HeadWeights":
        return cls(np.asarray(data["weights"], dtype=np.float64), np.asarray(data["bias"], dtype=np.float64))


@dataclass(frozen=True)
class PriorModel:
    """Per-category presence and severity heads plus frozen standardization statistics."""

    presence: Dict[DistortionCategory, HeadWeights]
    severity: Dict[DistortionCategory, HeadWeights]
    feature_means: np.ndarray
    feature_stds: np.ndarray
    temperature: float = 1.1
    loss_history: Tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidTemperature(f"Temperature must be positive, got {self.temperature}")
        for head in list(self.presence.values()) + list(self.severity.values()):
            if not (np.all(np.isfinite(head.weights)) and np.all(np.isfinite(head.bias))):
                raise ConfigError("Prior model weights must be finite")

    @classmethod
    def untrained(cls, temperature: Optional[float] = None) -> "PriorModel":
        n = len(FEATURE_NAMES)
        return cls(
            presence={c: HeadWeights.zeros(n) for c in CANONICAL_ORDER},
            severity={c: HeadWeights.zeros(n) for c in CANONICAL_ORDER},
            feature_means=np.zeros(n),
            feature_stds=np.ones(n),
            temperature=settings.temperature if temperature is None else temperature,
        )

    def with_temperature(self, temperature: float) -> "PriorModel":
        return PriorModel(self.presence, self.severity, self.feature_means, self.feature_stds,
                          temperature, self.loss_history)

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (design_matrix(features) - self.feature_means) / self.feature_stds

    def to_dict(self) -> Dict:
        return {
            "feature_schema_version": FEATURE_SCHEMA_VERSION,
            "feature_names": list(FEATURE_NAMES),
            "feature_means": self.feature_means.tolist(),
            "feature_stds": self.feature_stds.tolist(),
            "temperature": self.temperature,
            "presence": {c.value: self.presence[c].to_dict() for c in CANONICAL_ORDER},
            "severity": {c.value: self.severity[c].to_dict() for c in CANONICAL_ORDER},
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "PriorModel":
        if data.get("feature_schema_version") != FEATURE_SCHEMA_VERSION:
            raise ConfigError("Prior model was saved with a different feature schema",
                              details={"found": data.get("feature_schema_version")})
        return cls(
            presence={DistortionCategory(k): HeadWeights.from_dict(v) for k, v in data["presence"].items()},
            severity={DistortionCategory(k): HeadWeights.from_dict(v) for k, v in data["severity"].items()},
            feature_means=np.asarray(data["feature_means"], dtype=np.float64),
            feature_stds=np.asarray(data["feature_stds"], dtype=np.float64),
            temperature=float(data["temperature"]),
        )


def save_prior(model: PriorModel, path: Union[str, Path]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(model.to_dict(), indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"Cannot write prior model: {e}", details={"path": str(path)})
    logger.info("Saved prior model", path=str(path))


def load_prior(path: Union[str, Path]) -> PriorModel:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return PriorModel.from_dict(json.load(f))
    except FileNotFoundError:
        raise ConfigError(f"Prior model not found: {path}", details={"path": str(path)})
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise ConfigError(f"Malformed prior model: {e}", details={"path": str(path)})


def design_matrix(features: np.ndarray) -> np.ndarray:
    """Apply the log scaling of heavy-tailed columns to raw feature rows."""
    x = np.array(features, dtype=np.float64, copy=True)
    for name in LOG_SCALED:
        i = FEATURE_NAMES.index(name)
        x[..., i] = np.log(x[..., i] + LOG_EPS)
    return x


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def head_loss_and_gradient(weights: np.ndarray, bias: np.ndarray, x: np.ndarray, y: np.ndarray,
                           l2: float) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy plus (l2 / 2) * ||W||^2 and its gradient.

    ``y`` holds class indices in {0, 1}.
    """
    n = x.shape[0]
    probs = softmax_t(x @ weights.T + bias, 1.0)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), y] = 1.0

    loss = -np.sum(onehot * np.log(np.clip(probs, 1e-300, None))) / n + 0.5 * l2 * np.sum(weights ** 2)
    delta = (probs - onehot) / n
    grad_w = delta.T @ x + l2 * weights
    grad_b = delta.sum(axis=0)
    return float(loss), grad_w, grad_b


@dataclass(frozen=True)
class TrainingHyper:
    learning_rate: float = 0.1
    epochs: int = 500
    l2: float = 1e-3
    seed: int = 0  # reserved; full-batch descent from zero weights draws no randomness

    @classmethod
    def defaults(cls) -> "TrainingHyper":
        return cls(settings.learning_rate, settings.epochs, settings.l2, 0)


def _targets(labels: Sequence[DistortionLabel]) -> Tuple[Dict, Dict]:
    presence = {c: np.array([1 if c in lab else 0 for lab in labels]) for c in CANONICAL_ORDER}
    severity = {
        c: np.array([SEVERITY_CLASSES.index(lab.severity_of(c)) if c in lab else -1 for lab in labels])
        for c in CANONICAL_ORDER
    }
    return presence, severity


def fit_prior(features: np.ndarray, labels: Sequence[DistortionLabel],
              hyper: Optional[TrainingHyper] = None,
              temperature: Optional[float] = None) -> PriorModel:
    """Fit every head by full-batch gradient descent on standardized features.

    Every category needs present and absent examples. Severity heads only see
    images where the category is present.
    """
    hyper = hyper or TrainingHyper.defaults()
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0 or features.shape[0] != len(labels):
        raise DegenerateData("Training needs one feature row per label and at least one row")

    presence_y, severity_y = _targets(labels)
    for c, y in presence_y.items():
        if y.sum() in (0, len(y)):
            raise DegenerateData(f"Presence head for {c.value} sees a single class",
                                 details={"category": c.value, "present": int(y.sum()), "rows": len(y)})

    raw = design_matrix(features)
    means = raw.mean(axis=0)
    stds = raw.std(axis=0)
    stds[stds < 1e-12] = 1.0
    x = (raw - means) / stds

    heads = []
    for c in CANONICAL_ORDER:
        heads.append(("presence", c, x, presence_y[c]))
        mask = severity_y[c] >= 0
        heads.append(("severity", c, x[mask], severity_y[c][mask]))

    params = {(kind, c): [np.zeros((2, x.shape[1])), np.zeros(2)] for kind, c, _, _ in heads}
    history: List[float] = []

    for epoch in tqdm(range(hyper.epochs), desc="Training prior", disable=not settings.progress):
        total = 0.0
        for kind, c, hx, hy in heads:
            if hx.shape[0] == 0:
                continue
            w, b = params[(kind, c)]
            loss, gw, gb = head_loss_and_gradient(w, b, hx, hy, hyper.l2)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"Loss diverged at epoch {epoch}",
                                    details={"head": f"{kind}:{c.value}", "epoch": epoch})
            total += loss
            params[(kind, c)] = [w - hyper.learning_rate * gw, b - hyper.learning_rate * gb]
        history.append(total)

    if history:
        logger.info("Prior training finished", epochs=hyper.epochs,
                    first_loss=round(history[0], 6), final_loss=round(history[-1], 6))

    return PriorModel(
        presence={c: HeadWeights(*params[("presence", c)]) for c in CANONICAL_ORDER},
        severity={c: HeadWeights(*params[("severity", c)]) for c in CANONICAL_ORDER},
        feature_means=means,
        feature_stds=stds,
        temperature=settings.temperature if temperature is None else temperature,
        loss_history=tuple(history),
    )


def train_prior(train_manifest: DatasetManifest, hyper: Optional[TrainingHyper] = None,
                resize: Optional[int] = None) -> PriorModel:
    """Fit the prior on the manifest's train split."""
    entries = train_manifest.split("train")
    if not entries:
        raise DegenerateData("Manifest has no train entries")

    logger.info("Extracting prior features", images=len(entries))
    rows = [
        extract_features(load_image(train_manifest.distorted_file(e), resize=resize)).values
        for e in tqdm(entries, desc="Features", disable=not settings.progress)
    ]
    return fit_prior(np.array(rows), [e.label for e in entries], hyper)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SoftLabels:
    """Per category (p_absent, p_present) and (p_mild, p_severe) distributions."""

    presence: Dict[DistortionCategory, Tuple[float, float]]
    severity: Dict[DistortionCategory, Tuple[float, float]]

    def p_present(self, category: DistortionCategory) -> float:
        return self.presence[category][1]

    def to_dict(self) -> Dict[str, Dict[str, List[float]]]:
        return {
            c.value: {"presence": list(self.presence[c]), "severity": list(self.severity[c])}
            for c in CANONICAL_ORDER
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SoftLabels":
        return cls(
            presence={DistortionCategory(k): tuple(v["presence"]) for k, v in data.items()},
            severity={DistortionCategory(k): tuple(v["severity"]) for k, v in data.items()},
        )

    @classmethod
    def uniform(cls) -> "SoftLabels":
        return cls({c: (0.5, 0.5) for c in CANONICAL_ORDER}, {c: (0.5, 0.5) for c in CANONICAL_ORDER})


def prior_distributions(model: PriorModel, img: ImageBuf) -> SoftLabels:
    """Soft labels of one image: features, standardization, heads, temperature softmax."""
    return soft_labels_from_features(model, extract_features(img).as_array())


def soft_labels_from_features(model: PriorModel, features: np.ndarray) -> SoftLabels:
    x = model.standardize(features)
    presence, severity = {}, {}
    for c in CANONICAL_ORDER:
        p = softmax_t(model.presence[c].logits(x), model.temperature)
        s = softmax_t(model.severity[c].logits(x), model.temperature)
        presence[c] = (float(p[0]), float(p[1]))
        severity[c] = (float(s[0]), float(s[1]))
    return SoftLabels(presence, severity)


def hard_label(soft: SoftLabels, threshold: Optional[float] = None) -> DistortionLabel:
    """Threshold presence (strictly greater) and take the severity argmax.

    Smoke is forced severe. If low light and over exposure both pass, the higher
    presence wins and ties go to low light.
    """
    threshold = settings.presence_threshold if threshold is None else threshold
    present = [c for c in CANONICAL_ORDER if soft.p_present(c) > threshold]

    if EXCLUSIVE_PAIR.issubset(present):
        low, over = DistortionCategory.LOW_LIGHT, DistortionCategory.OVER_EXPOSURE
        drop = over if soft.p_present(low) >= soft.p_present(over) else low
        present.remove(drop)

    entries = []
    for c in present:
        if c is DistortionCategory.SMOKE:
            entries.append((c, Severity.SEVERE))
        else:
            p_mild, p_severe = soft.severity[c]
            entries.append((c, Severity.SEVERE if p_severe > p_mild else Severity.MILD))
    return DistortionLabel(tuple(entries))
