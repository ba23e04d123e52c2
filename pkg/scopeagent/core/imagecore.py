"""
Image core module for the surgical image enhancement agent.
Image buffers, distortion labels, raster codecs and dataset manifests.
"""

import hashlib
import io
import itertools
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from scopeagent.utils import logger
from scopeagent.utils.error import (
    CorruptData,
    ImageFileNotFound,
    InvariantViolation,
    IoFailure,
    LabelParseError,
    ManifestError,
    UnsupportedFormat,
)

PathLike = Union[str, os.PathLike]

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
PPM_SIGNATURE = b"P6"
SUPPORTED_SUFFIXES = {".png": "PNG", ".ppm": "PPM"}
MANIFEST_KEYS = ("id", "clean_path", "distorted_path", "label", "split")
SPLITS = ("train", "test")

# ITU-R BT.601 luma weights
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class DistortionCategory(Enum):
    """Distortion categories, declared in canonical (chaining) order."""

    SMOKE = "smoke"
    MOTION_BLUR = "motion_blur"
    OVER_EXPOSURE = "over_exposure"
    LOW_LIGHT = "low_light"

    @property
    def rank(self) -> int:
        return CANONICAL_ORDER.index(self)


CANONICAL_ORDER: Tuple[DistortionCategory, ...] = tuple(DistortionCategory)


class Severity(Enum):
    """Severity tiers. NORMAL means the category is absent."""

    NORMAL = "normal"
    MILD = "mild"
    SEVERE = "severe"


ACTIVE_SEVERITIES = (Severity.MILD, Severity.SEVERE)
EXCLUSIVE_PAIR = frozenset({DistortionCategory.LOW_LIGHT, DistortionCategory.OVER_EXPOSURE})
MAX_LABEL_ORDER = 3
NORMAL_TOKEN = "normal"


@dataclass(frozen=True)
class ImageBuf:
    """Immutable RGB raster with float intensities in [0, 1], shape (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"ImageBuf expects shape (H, W, 3), got {arr.shape}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError("ImageBuf must not be empty")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("ImageBuf intensities must be finite and within [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, array: np.ndarray, clip: bool = True) -> "ImageBuf":
        """Build a buffer from any float array, clamping to [0, 1] unless told otherwise."""
        arr = np.asarray(array, dtype=np.float64)
        if clip:
            arr = np.clip(arr, 0.0, 1.0)
        return cls(arr)

    @classmethod
    def constant(cls, height: int, width: int, value: Union[float, Tuple[float, float, float]]) -> "ImageBuf":
        return cls(np.broadcast_to(np.asarray(value, dtype=np.float64), (height, width, 3)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def luminance(self) -> np.ndarray:
        return self.data @ LUMA_WEIGHTS

    def digest(self) -> str:
        """Content hash of the exact float data, used for provenance chains."""
        h = hashlib.sha256()
        h.update(np.asarray(self.data.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageBuf):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __hash__(self) -> int:
        return hash(self.digest())


@dataclass(frozen=True)
class DistortionLabel:
    """Set of (category, severity) entries, stored in canonical order."""

    entries: Tuple[Tuple[DistortionCategory, Severity], ...] = ()

    def __post_init__(self):
        entries = tuple(sorted(self.entries, key=lambda e: e[0].rank))
        _check_label_rules(entries)
        object.__setattr__(self, "entries", entries)

    @classmethod
    def of(cls, pairs: Union[Iterable[Tuple[DistortionCategory, Severity]],
                             Dict[DistortionCategory, Severity]] = ()) -> "DistortionLabel":
        items = pairs.items() if isinstance(pairs, dict) else pairs
        return cls(tuple(items))

    @classmethod
    def normal(cls) -> "DistortionLabel":
        return cls(())

    @property
    def categories(self) -> Tuple[DistortionCategory, ...]:
        return tuple(c for c, _ in self.entries)

    @property
    def severities(self) -> Tuple[Severity, ...]:
        return tuple(s for _, s in self.entries)

    @property
    def is_normal(self) -> bool:
        return not self.entries

    def severity_of(self, category: DistortionCategory) -> Severity:
        for c, s in self.entries:
            if c is category:
                return s
        return Severity.NORMAL

    def __contains__(self, item) -> bool:
        if isinstance(item, DistortionCategory):
            return item in self.categories
        return item in self.entries

    def __iter__(self) -> Iterator[Tuple[DistortionCategory, Severity]]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def encode(self) -> str:
        return encode_label(self)

    def __str__(self) -> str:
        return encode_label(self)


def _check_label_rules(entries: Tuple[Tuple[DistortionCategory, Severity], ...]) -> None:
    categories = [c for c, _ in entries]
    if len(set(categories)) != len(categories):
        raise InvariantViolation("Duplicate category in label", details={"categories": [c.value for c in categories]})
    for category, severity in entries:
        if not isinstance(category, DistortionCategory) or not isinstance(severity, Severity):
            raise InvariantViolation("Label entries must be (DistortionCategory, Severity) pairs")
        if severity is Severity.NORMAL:
            raise InvariantViolation("Absent categories are encoded by omission, not by severity normal",
                                     details={"category": category.value})
        if category is DistortionCategory.SMOKE and severity is not Severity.SEVERE:
            raise InvariantViolation("Smoke is always severe", details={"severity": severity.value})
    if EXCLUSIVE_PAIR.issubset(categories):
        raise InvariantViolation("Low light and over exposure are mutually exclusive")
    if len(entries) > MAX_LABEL_ORDER:
        raise InvariantViolation("Labels carry at most three categories", details={"order": len(entries)})


def encode_label(label: DistortionLabel) -> str:
    """Canonical string: "+"-joined "category:severity" tokens, "normal" for the empty label."""
    if label.is_normal:
        return NORMAL_TOKEN
    return "+".join(f"{c.value}:{s.value}" for c, s in label.entries)


def decode_label(text: str) -> DistortionLabel:
    """Inverse of encode_label. Raises LabelParseError or InvariantViolation."""
    text = (text or "").strip()
    if text == NORMAL_TOKEN:
        return DistortionLabel.normal()
    if not text:
        raise LabelParseError("Empty label string")

    pairs = []
    for token in text.split("+"):
        parts = token.strip().split(":")
        if len(parts) != 2:
            raise LabelParseError(f"Malformed label token: {token!r}", details={"label": text})
        try:
            category = DistortionCategory(parts[0])
            severity = Severity(parts[1])
        except ValueError:
            raise LabelParseError(f"Unknown label token: {token!r}", details={"label": text})
        pairs.append((category, severity))
    return DistortionLabel(tuple(pairs))


def enumerate_valid_labels() -> List[DistortionLabel]:
    """Every valid label, ordered by cardinality then canonical category order."""
    labels = []
    for order in range(MAX_LABEL_ORDER + 1):
        for combo in itertools.combinations(CANONICAL_ORDER, order):
            if EXCLUSIVE_PAIR.issubset(combo):
                continue
            options = [
                (Severity.SEVERE,) if c is DistortionCategory.SMOKE else ACTIVE_SEVERITIES
                for c in combo
            ]
            for severities in itertools.product(*options):
                labels.append(DistortionLabel(tuple(zip(combo, severities))))
    return labels


# ---------------------------------------------------------------------------
# Raster codecs
# ---------------------------------------------------------------------------

def load_image(path: PathLike, resize: Optional[int] = None) -> ImageBuf:
    """Load an 8-bit PNG or PPM (P6) file as a normalized buffer.

    ``resize`` rescales the longer side to that many pixels on ingest.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageFileNotFound(f"Image not found: {path}", details={"path": str(path)})

    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ImageFileNotFound(f"Cannot read image: {e}", details={"path": str(path)})

    return decode_image_bytes(raw, resize=resize, source=str(path))


def decode_image_bytes(raw: bytes, resize: Optional[int] = None, source: str = "<bytes>") -> ImageBuf:
    """Decode in-memory PNG or PPM bytes."""
    if not (raw.startswith(PNG_SIGNATURE) or raw.startswith(PPM_SIGNATURE)):
        raise UnsupportedFormat("Only 8-bit PNG and binary PPM (P6) are supported",
                                details={"path": source})

    try:
        with Image.open(io.BytesIO(raw)) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I", "F"):
                raise UnsupportedFormat(f"Unsupported pixel mode {im.mode}", details={"path": source})
            rgb = im.convert("RGB")
            if resize:
                rgb = _resize_longest(rgb, resize)
            arr = np.asarray(rgb, dtype=np.uint8)
    except UnsupportedFormat:
        raise
    except (OSError, SyntaxError, ValueError, UnidentifiedImageError) as e:
        raise CorruptData(f"Cannot decode image: {e}", details={"path": source})

    return ImageBuf(arr.astype(np.float64) / 255.0)


def _resize_longest(im: Image.Image, size: int) -> Image.Image:
    w, h = im.size
    scale = size / max(w, h)
    if scale == 1.0:
        return im
    return im.resize((max(1, round(w * scale)), max(1, round(h * scale))), Image.BICUBIC)


def quantize(img: ImageBuf) -> np.ndarray:
    """8-bit quantization with round-half-up: byte = floor(v * 255 + 0.5)."""
    return np.floor(img.data * 255.0 + 0.5).astype(np.uint8)


def encode_png(img: ImageBuf) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(quantize(img)).save(buf, format="PNG")
    return buf.getvalue()


def save_image(img: ImageBuf, path: PathLike) -> None:
    """Write the buffer as PNG or PPM, chosen by file suffix."""
    path = Path(path)
    fmt = SUPPORTED_SUFFIXES.get(path.suffix.lower())
    if fmt is None:
        raise UnsupportedFormat(f"Unsupported output suffix {path.suffix!r}", details={"path": str(path)})

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(quantize(img)).save(path, format=fmt)
    except OSError as e:
        raise IoFailure(f"Cannot write image: {e}", details={"path": str(path)})


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    """One benchmark image. Paths are stored as written in the manifest file."""

    id: str
    distorted_path: str
    label: DistortionLabel
    split: str = "test"
    clean_path: Optional[str] = None

    @property
    def paired(self) -> bool:
        return self.clean_path is not None

    def to_dict(self) -> Dict[str, Optional[str]]:
        return {
            "id": self.id,
            "clean_path": self.clean_path,
            "distorted_path": self.distorted_path,
            "label": encode_label(self.label),
            "split": self.split,
        }


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered benchmark entries plus the directory relative paths resolve against."""

    entries: Tuple[ManifestEntry, ...] = ()
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError("Manifest ids must be unique", details={"duplicates": dupes})
        for e in self.entries:
            if e.split not in SPLITS:
                raise ManifestError(f"Unknown split {e.split!r}", details={"id": e.id})

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def get(self, entry_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise ManifestError(f"Unknown manifest id {entry_id!r}")

    def resolve(self, path: Optional[str]) -> Optional[Path]:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def distorted_file(self, entry: ManifestEntry) -> Path:
        return self.resolve(entry.distorted_path)

    def clean_file(self, entry: ManifestEntry) -> Optional[Path]:
        return self.resolve(entry.clean_path)

    def source_file(self, entry: ManifestEntry) -> Path:
        """The undistorted image of an entry: clean path when present, else the image itself."""
        return self.resolve(entry.clean_path or entry.distorted_path)


def load_manifest(path: PathLike) -> DatasetManifest:
    """Read a JSON manifest: one top-level array of entry objects."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ManifestError(f"Manifest not found: {path}", details={"path": str(path)})
    except json.JSONDecodeError as e:
        raise ManifestError(f"Manifest is not valid JSON: {e}", details={"path": str(path)})

    if not isinstance(data, list):
        raise ManifestError("Manifest must be a top-level JSON array", details={"path": str(path)})

    entries = []
    for i, item in enumerate(data):
        if not isinstance(item, dict) or set(item) != set(MANIFEST_KEYS):
            raise ManifestError(f"Manifest entry {i} must have exactly the keys {list(MANIFEST_KEYS)}",
                                details={"path": str(path), "index": i})
        entries.append(ManifestEntry(
            id=str(item["id"]),
            clean_path=item["clean_path"],
            distorted_path=item["distorted_path"],
            label=decode_label(item["label"]),
            split=item["split"],
        ))

    manifest = DatasetManifest(tuple(entries), root=path.parent)
    logger.debug("Loaded manifest", path=str(path), entries=len(entries))
    return manifest


def manifest_to_json(manifest: DatasetManifest) -> str:
    return json.dumps([e.to_dict() for e in manifest.entries], indent=2) + "\n"


def save_manifest(manifest: DatasetManifest, path: PathLike) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(manifest_to_json(manifest), encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"Cannot write manifest: {e}", details={"path": str(path)})
    logger.info("Saved manifest", path=str(path), entries=len(manifest))


def scan_images(directory: PathLike, split: str = "train") -> DatasetManifest:
    """Build a manifest of clean ("normal") images from every PNG/PPM under a directory."""
    directory = Path(directory)
    files = sorted(p for p in directory.rglob("*") if p.suffix.lower() in SUPPORTED_SUFFIXES)
    entries = tuple(
        ManifestEntry(
            id=p.relative_to(directory).with_suffix("").as_posix().replace("/", "_"),
            clean_path=None,
            distorted_path=p.relative_to(directory).as_posix(),
            label=DistortionLabel.normal(),
            split=split,
        )
        for p in files
    )
    logger.info("Indexed clean images", directory=str(directory), count=len(entries))
    return DatasetManifest(entries, root=directory)
