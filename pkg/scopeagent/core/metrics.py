"""
Metrics module for the surgical image enhancement agent.
Full-reference (PSNR, SSIM), no-reference (NIQE, BRISQUE) and label accuracy
metrics.
"""

import abc
import json
import math
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import httpx
import numpy as np
from scipy import ndimage
from scipy.special import gamma as gamma_fn
from skimage.metrics import peak_signal_noise_ratio, structural_similarity
from skimage.util import crop

from scopeagent.config import settings
from scopeagent.core.imagecore import (
    DistortionCategory,
    DistortionLabel,
    ImageBuf,
    Severity,
    save_image,
)
from scopeagent.utils import logger
from scopeagent.utils.error import (
    ConfigError,
    DimensionMismatch,
    EmptyInput,
    InsufficientCorpus,
    MetricError,
    TooSmall,
)


def _same_shape(ref: ImageBuf, test: ImageBuf) -> None:
    if ref.shape != test.shape:
        raise DimensionMismatch("Images differ in size", details={"ref": list(ref.shape), "test": list(test.shape)})


# ---------------------------------------------------------------------------
# Full reference
# ---------------------------------------------------------------------------

def psnr(ref: ImageBuf, test: ImageBuf, cap: Optional[float] = None) -> float:
    """10 * log10(1 / MSE) over all channels with peak 1.0, capped for identical images."""
    _same_shape(ref, test)
    cap = settings.psnr_cap if cap is None else cap
    if np.array_equal(ref.data, test.data):
        return cap
    return min(cap, float(peak_signal_noise_ratio(ref.data, test.data, data_range=1.0)))


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _structural_similarity(ref: ImageBuf, test: ImageBuf) -> Tuple[float, np.ndarray]:
    _same_shape(ref, test)
    size = settings.ssim_window
    if min(ref.height, ref.width) < size:
        raise TooSmall(f"SSIM needs images of at least {size}x{size}",
                       details={"height": ref.height, "width": ref.width})
    return structural_similarity(
        ref.luminance(),
        test.luminance(),
        win_size=size,
        gaussian_weights=True,
        sigma=settings.ssim_sigma,
        use_sample_covariance=False,
        data_range=1.0,
        K1=settings.ssim_k1,
        K2=settings.ssim_k2,
        full=True,
    )


def ssim_map(ref: ImageBuf, test: ImageBuf) -> np.ndarray:
    """Per-window SSIM of the BT.601 luminance at every valid window position."""
    _, full_map = _structural_similarity(ref, test)
    return crop(full_map, settings.ssim_window // 2)


def ssim(ref: ImageBuf, test: ImageBuf) -> float:
    """Mean SSIM over valid window positions (11x11 gaussian, sigma 1.5, K1 0.01, K2 0.03)."""
    mean, _ = _structural_similarity(ref, test)
    return float(mean)


# ---------------------------------------------------------------------------
# Natural scene statistics
# ---------------------------------------------------------------------------

_SHAPES = np.arange(0.2, 10.001, 0.001)
_GGD_RATIO = gamma_fn(1.0 / _SHAPES) * gamma_fn(3.0 / _SHAPES) / gamma_fn(2.0 / _SHAPES) ** 2
_AGGD_RATIO = gamma_fn(2.0 / _SHAPES) ** 2 / (gamma_fn(1.0 / _SHAPES) * gamma_fn(3.0 / _SHAPES))
_EPS = 1e-12
MSCN_WINDOW = gaussian_window(7, 7.0 / 6.0)
MSCN_C = 1.0 / 255.0
NSS_PER_SCALE = 18


def mscn(lum: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean-subtracted contrast-normalized coefficients and the local deviation map."""
    mu = ndimage.correlate(lum, MSCN_WINDOW, mode="reflect")
    var = ndimage.correlate(lum * lum, MSCN_WINDOW, mode="reflect") - mu * mu
    sigma = np.sqrt(np.abs(var))
    return (lum - mu) / (sigma + MSCN_C), sigma


def ggd_fit(x: np.ndarray) -> Tuple[float, float]:
    """Shape and variance of a zero-mean generalized gaussian, by ratio matching."""
    var = float(np.mean(x * x))
    mean_abs = float(np.mean(np.abs(x)))
    if mean_abs < _EPS:
        return 2.0, 0.0
    rho = var / (mean_abs ** 2)
    return float(_SHAPES[np.argmin(np.abs(rho - _GGD_RATIO))]), var


def aggd_fit(x: np.ndarray) -> Tuple[float, float, float, float]:
    """Shape, mean parameter and left/right variances of an asymmetric generalized gaussian."""
    neg = x[x < 0]
    pos = x[x > 0]
    left = math.sqrt(float(np.mean(neg * neg))) if neg.size else 0.0
    right = math.sqrt(float(np.mean(pos * pos))) if pos.size else 0.0
    if left < _EPS and right < _EPS:
        return 2.0, 0.0, 0.0, 0.0

    g = (left + _EPS) / (right + _EPS)
    r_hat = float(np.mean(np.abs(x))) ** 2 / (float(np.mean(x * x)) + _EPS)
    r_norm = r_hat * (g ** 3 + 1.0) * (g + 1.0) / ((g ** 2 + 1.0) ** 2)
    nu = float(_SHAPES[np.argmin((_AGGD_RATIO - r_norm) ** 2)])
    eta = (right - left) * (gamma_fn(2.0 / nu) / gamma_fn(1.0 / nu)) * math.sqrt(gamma_fn(1.0 / nu) / gamma_fn(3.0 / nu))
    return nu, float(eta), left * left, right * right


def pair_products(m: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Horizontal, vertical and both diagonal neighbor products, without wrap-around."""
    return (
        m[:, :-1] * m[:, 1:],
        m[:-1, :] * m[1:, :],
        m[:-1, :-1] * m[1:, 1:],
        m[:-1, 1:] * m[1:, :-1],
    )


def nss_scale_features(m: np.ndarray) -> List[float]:
    """18 statistics of one MSCN map: GGD fit plus four AGGD neighbor fits."""
    alpha, var = ggd_fit(m)
    feats = [alpha, var]
    for prod in pair_products(m):
        feats.extend(aggd_fit(prod.ravel()))
    return feats


def downsample(lum: np.ndarray) -> np.ndarray:
    """2x2 block mean; odd trailing rows or columns are dropped."""
    h, w = (lum.shape[0] // 2) * 2, (lum.shape[1] // 2) * 2
    x = lum[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def brisque_features(img: ImageBuf) -> np.ndarray:
    """36 NSS features: indices 0..17 at full scale, 18..35 at half scale."""
    if min(img.height, img.width) < 32:
        raise TooSmall("BRISQUE features need at least 32x32 pixels",
                       details={"height": img.height, "width": img.width})
    lum = img.luminance()
    feats = nss_scale_features(mscn(lum)[0]) + nss_scale_features(mscn(downsample(lum))[0])
    return np.asarray(feats, dtype=np.float64)


@dataclass(frozen=True)
class BrisqueModel:
    """Ridge regressor from standardized BRISQUE features to a quality proxy (lower is better)."""

    weights: np.ndarray
    bias: float
    feature_means: np.ndarray
    feature_stds: np.ndarray

    def score(self, img: ImageBuf) -> float:
        x = (brisque_features(img) - self.feature_means) / self.feature_stds
        return float(x @ self.weights + self.bias)

    def to_dict(self) -> Dict:
        return {
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "feature_means": self.feature_means.tolist(),
            "feature_stds": self.feature_stds.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "BrisqueModel":
        return cls(np.asarray(data["weights"]), float(data["bias"]),
                   np.asarray(data["feature_means"]), np.asarray(data["feature_stds"]))


SEVERITY_WEIGHT = {Severity.MILD: 1.0, Severity.SEVERE: 2.0}


def quality_proxy(label: DistortionLabel) -> float:
    """Monotone distortion score of a label: 20 per mild entry, 40 per severe entry."""
    return 20.0 * sum(SEVERITY_WEIGHT[s] for _, s in label)


def fit_brisque(features: np.ndarray, scores: Sequence[float], l2: float = 1.0) -> BrisqueModel:
    """Closed-form ridge regression on standardized features."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(scores, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[0] != y.shape[0]:
        raise InsufficientCorpus("BRISQUE regression needs at least two scored images")
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    stds[stds < 1e-12] = 1.0
    z = (x - means) / stds
    bias = float(y.mean())
    weights = np.linalg.solve(z.T @ z + l2 * np.eye(z.shape[1]), z.T @ (y - bias))
    return BrisqueModel(weights, bias, means, stds)


def save_brisque(model: BrisqueModel, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), sort_keys=True) + "\n", encoding="utf-8")


def load_brisque(path: Union[str, Path]) -> BrisqueModel:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return BrisqueModel.from_dict(json.load(f))
    except (OSError, KeyError, ValueError) as e:
        raise ConfigError(f"Cannot load BRISQUE model: {e}", details={"path": str(path)})


# ---------------------------------------------------------------------------
# NIQE
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NiqeModel:
    mean: np.ndarray
    cov: np.ndarray
    patch_size: int
    sharpness: float

    def to_dict(self) -> Dict:
        return {
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
            "params": {"patch_size": self.patch_size, "sharpness": self.sharpness},
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "NiqeModel":
        params = data["params"]
        return cls(np.asarray(data["mean"]), np.asarray(data["cov"]),
                   int(params["patch_size"]), float(params["sharpness"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def save_niqe(model: NiqeModel, path: Union[str, Path]) -> None:
    Path(path).write_text(model.to_json() + "\n", encoding="utf-8")


def load_niqe(path: Union[str, Path]) -> NiqeModel:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return NiqeModel.from_dict(json.load(f))
    except (OSError, KeyError, ValueError) as e:
        raise ConfigError(f"Cannot load NIQE model: {e}", details={"path": str(path)})


def niqe_patch_features(img: ImageBuf, patch_size: int) -> Tuple[np.ndarray, np.ndarray]:
    """36 features per patch (full scale then half scale) and each patch's sharpness."""
    lum = img.luminance()
    half = patch_size // 2
    rows, cols = lum.shape[0] // patch_size, lum.shape[1] // patch_size
    if rows * cols == 0:
        return np.zeros((0, 2 * NSS_PER_SCALE)), np.zeros(0)

    m1, sigma = mscn(lum)
    m2, _ = mscn(downsample(lum))
    feats, sharp = [], []
    for r in range(rows):
        for c in range(cols):
            y, x = r * patch_size, c * patch_size
            p1 = m1[y:y + patch_size, x:x + patch_size]
            p2 = m2[r * half:(r + 1) * half, c * half:(c + 1) * half]
            feats.append(nss_scale_features(p1) + nss_scale_features(p2))
            sharp.append(float(sigma[y:y + patch_size, x:x + patch_size].mean()))
    return np.asarray(feats), np.asarray(sharp)


def fit_niqe(pristine: Sequence[ImageBuf], patch_size: Optional[int] = None,
             sharpness: Optional[float] = None, min_corpus: Optional[int] = None) -> NiqeModel:
    """Fit the pristine feature mean and covariance from the sharpest patches of a clean corpus."""
    patch_size = patch_size or settings.niqe_patch_size
    sharpness = settings.niqe_sharpness if sharpness is None else sharpness
    min_corpus = settings.niqe_min_corpus if min_corpus is None else min_corpus
    if len(pristine) < min_corpus:
        raise InsufficientCorpus(f"NIQE needs at least {min_corpus} pristine images",
                                 details={"images": len(pristine)})

    selected = []
    for img in pristine:
        feats, sharp = niqe_patch_features(img, patch_size)
        if feats.shape[0] == 0:
            continue
        selected.append(feats[sharp >= sharpness * sharp.max()])
    if not selected:
        raise InsufficientCorpus("No pristine image holds a full patch", details={"patch_size": patch_size})

    pooled = np.vstack(selected)
    mean = pooled.mean(axis=0)
    cov = np.cov(pooled, rowvar=False) if pooled.shape[0] > 1 else np.zeros((pooled.shape[1],) * 2)
    cov = 0.5 * (cov + cov.T) + 1e-6 * np.eye(pooled.shape[1])
    logger.info("Fitted NIQE model", images=len(pristine), patches=int(pooled.shape[0]))
    return NiqeModel(mean, cov, patch_size, sharpness)


def niqe(model: NiqeModel, img: ImageBuf) -> float:
    """Distance between the image's patch statistics and the pristine model; lower is better."""
    feats, _ = niqe_patch_features(img, model.patch_size)
    if feats.shape[0] < 2:
        raise TooSmall("NIQE needs at least two patches",
                       details={"height": img.height, "width": img.width, "patch_size": model.patch_size})
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    diff = model.mean - mu
    d2 = float(diff @ np.linalg.pinv((model.cov + cov) / 2.0) @ diff)
    return math.sqrt(max(d2, 0.0))


# ---------------------------------------------------------------------------
# External scorers
# ---------------------------------------------------------------------------

class ExternalScorer(abc.ABC):
    """A metric computed outside this package (deep perceptual metrics)."""

    name: str = "external"

    @abc.abstractmethod
    def score(self, img: ImageBuf, ref: Optional[ImageBuf] = None) -> float:
        pass


class SubprocessScorer(ExternalScorer):
    """Runs ``command`` with the image path (and reference path) appended; stdout holds the score."""

    def __init__(self, name: str, command: Sequence[str], timeout: float = 120.0):
        self.name = name
        self.command = list(command)
        self.timeout = timeout

    def score(self, img: ImageBuf, ref: Optional[ImageBuf] = None) -> float:
        with tempfile.TemporaryDirectory() as tmp:
            args = list(self.command)
            path = Path(tmp) / "image.png"
            save_image(img, path)
            args.append(str(path))
            if ref is not None:
                ref_path = Path(tmp) / "reference.png"
                save_image(ref, ref_path)
                args.append(str(ref_path))
            try:
                done = subprocess.run(args, capture_output=True, text=True, timeout=self.timeout, check=True)
            except (OSError, subprocess.SubprocessError) as e:
                raise MetricError(f"External scorer {self.name} failed: {e}")
        try:
            return float(done.stdout.strip().split()[-1])
        except (IndexError, ValueError):
            raise MetricError(f"External scorer {self.name} printed no score", details={"stdout": done.stdout[-200:]})


class HttpScorer(ExternalScorer):
    """POSTs {"image", "reference"} Base64 PNGs and reads {"score"} from the JSON reply."""

    def __init__(self, name: str, url: str, timeout: float = 60.0, client: Optional[httpx.Client] = None):
        self.name = name
        self.url = url
        self.client = client or httpx.Client(timeout=timeout)

    def score(self, img: ImageBuf, ref: Optional[ImageBuf] = None) -> float:
        from scopeagent.protocol.prompt import encode_image_base64

        payload = {"image": encode_image_base64(img),
                   "reference": encode_image_base64(ref) if ref is not None else None}
        try:
            response = self.client.post(self.url, json=payload)
            response.raise_for_status()
            return float(response.json()["score"])
        except (httpx.HTTPError, KeyError, ValueError, TypeError) as e:
            raise MetricError(f"External scorer {self.name} failed: {e}", details={"url": self.url})


# ---------------------------------------------------------------------------
# Label accuracy
# ---------------------------------------------------------------------------

ACCURACY_MODES = ("severity_only", "category_only", "joint")
TABLE_CELLS = (
    (Severity.MILD, DistortionCategory.LOW_LIGHT),
    (Severity.MILD, DistortionCategory.OVER_EXPOSURE),
    (Severity.MILD, DistortionCategory.MOTION_BLUR),
    (Severity.SEVERE, DistortionCategory.LOW_LIGHT),
    (Severity.SEVERE, DistortionCategory.OVER_EXPOSURE),
    (Severity.SEVERE, DistortionCategory.MOTION_BLUR),
    (Severity.SEVERE, DistortionCategory.SMOKE),
)


def cell_name(cell: Tuple[Severity, DistortionCategory]) -> str:
    return f"{cell[0].value}:{cell[1].value}"


def is_correct(pred: Optional[DistortionLabel], truth: DistortionLabel, mode: str) -> bool:
    """Failed predictions (None) are incorrect under every mode."""
    if pred is None:
        return False
    if mode == "joint":
        return pred == truth
    if mode == "category_only":
        return set(pred.categories) == set(truth.categories)
    if mode == "severity_only":
        return sorted(s.value for s in pred.severities) == sorted(s.value for s in truth.severities)
    raise ValueError(f"Unknown accuracy mode {mode!r}")


@dataclass(frozen=True)
class AccuracyReport:
    """Per mode, per cell accuracy with an average over populated cells."""

    cells: Dict[str, Dict[str, Optional[float]]]
    average: Dict[str, Optional[float]]
    counts: Dict[str, int]
    overall: Dict[str, float] = field(default_factory=dict)
    n_images: int = 0

    def row(self, mode: str) -> List[Optional[float]]:
        return [self.cells[mode][cell_name(c)] for c in TABLE_CELLS] + [self.average[mode]]

    def to_dict(self) -> Dict:
        return {"cells": self.cells, "average": self.average, "counts": self.counts,
                "overall": self.overall, "n_images": self.n_images}


def accuracy_report(predictions: Sequence[Tuple[Optional[DistortionLabel], DistortionLabel]],
                    modes: Sequence[str] = ACCURACY_MODES) -> AccuracyReport:
    """Accuracy over images whose ground truth contains each (severity, category) cell."""
    if not predictions:
        raise EmptyInput("Accuracy needs at least one prediction")
    if isinstance(modes, str):
        modes = (modes,)

    counts = {cell_name(c): sum(1 for _, t in predictions if (c[1], c[0]) in t) for c in TABLE_CELLS}
    cells: Dict[str, Dict[str, Optional[float]]] = {}
    average: Dict[str, Optional[float]] = {}
    overall: Dict[str, float] = {}

    for mode in modes:
        correct = [is_correct(p, t, mode) for p, t in predictions]
        row: Dict[str, Optional[float]] = {}
        for cell in TABLE_CELLS:
            hits = [ok for ok, (_, t) in zip(correct, predictions) if (cell[1], cell[0]) in t]
            row[cell_name(cell)] = sum(hits) / len(hits) if hits else None
        populated = [v for v in row.values() if v is not None]
        cells[mode] = row
        average[mode] = sum(populated) / len(populated) if populated else None
        overall[mode] = sum(correct) / len(correct)

    return AccuracyReport(cells, average, counts, overall, len(predictions))
