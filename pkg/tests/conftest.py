"""
Shared fixtures: procedural endoscope-like scenes, toy manifests and a fake
chat-completions client.
"""

import json
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import ndimage

from scopeagent.config import settings
from scopeagent.core.imagecore import ImageBuf, save_image, save_manifest, scan_images
from scopeagent.core.synthesis import BenchmarkConfig, build_benchmark

settings.progress = False

TISSUE = np.array([0.38, 0.16, 0.08])
SCENE_MAX = 0.45


def make_scene(height: int = 64, width: int = 64, seed: int = 0) -> ImageBuf:
    """Dim reddish tissue with shading, fine texture, dark vessels and a gray instrument edge."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width] / float(max(height, width))

    cy, cx = rng.uniform(0.3, 0.7, size=2)
    shade = 0.55 + 0.45 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 0.15)
    texture = ndimage.gaussian_filter(rng.normal(size=(height, width)), 1.5)
    texture /= np.abs(texture).max() + 1e-9
    data = TISSUE * (shade * (1.0 + 0.15 * texture))[:, :, np.newaxis]

    for _ in range(3):
        y0, amp, freq, phase = rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.15), rng.uniform(0.5, 2.0), rng.uniform(0, 6.28)
        curve = y0 + amp * np.sin(2 * np.pi * freq * xx + phase)
        mask = np.exp(-((yy - curve) / 0.02) ** 2)[:, :, np.newaxis]
        data = data * (1.0 - np.array([0.5, 0.6, 0.6]) * mask)

    h0, w0 = int(rng.integers(0, height // 3)), int(rng.integers(0, width // 3))
    data[h0:h0 + height // 4, w0:w0 + width // 3] = [0.42, 0.42, 0.40]
    return ImageBuf.from_array(np.clip(data, 0.0, SCENE_MAX))


@pytest.fixture
def scene() -> ImageBuf:
    return make_scene()


def write_sources(directory: Path, count: int, size: int = 64) -> Path:
    """Write ``count`` clean scenes plus a source manifest; returns the manifest path."""
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        save_image(make_scene(size, size, seed=i), directory / f"scene{i:03d}.png")
    manifest_path = directory / "sources.json"
    save_manifest(scan_images(directory), manifest_path)
    return manifest_path


def synthesize(root: Path, counts, sources: int, seed: int = 3, test_fraction: float = 0.5, size: int = 64) -> Path:
    """Synthesize a benchmark under ``root``; returns its manifest path."""
    source_manifest = write_sources(root / "clean", sources, size)
    config = BenchmarkConfig.from_dict({
        "source_manifest": str(source_manifest),
        "seed": seed,
        "counts": counts,
        "test_fraction": test_fraction,
        "reuse_sources": True,
    })
    build_benchmark(config, str(root / "bench"))
    return root / "bench" / "manifest.json"


TOY_COUNTS = {
    "normal": 2,
    "low_light:mild": 2,
    "low_light:severe": 2,
    "over_exposure:mild": 2,
    "over_exposure:severe": 2,
    "motion_blur:mild": 2,
    "motion_blur:severe": 2,
    "smoke:severe": 2,
    "smoke:severe+motion_blur:mild": 2,
    "motion_blur:severe+low_light:mild": 2,
    "smoke:severe+over_exposure:mild": 2,
}


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory) -> Path:
    """22 images, one train and one test image per label cell."""
    return synthesize(tmp_path_factory.mktemp("toy"), TOY_COUNTS, sources=12)


class FakeCompletions:
    """Scripted stand-in for ``client.chat.completions``: each item is a reply text or an exception."""

    def __init__(self, script):
        self.script = list(script)
        self.requests = []

    def create(self, **request):
        self.requests.append(request)
        item = self.script.pop(0) if len(self.script) > 1 else self.script[0]
        if isinstance(item, Exception):
            raise item
        if callable(item):
            item = item(request)
        message = SimpleNamespace(content=item, refusal=None)
        usage = SimpleNamespace(prompt_tokens=100, completion_tokens=20)
        return SimpleNamespace(choices=[SimpleNamespace(message=message)], usage=usage)


class FakeClient:
    def __init__(self, script):
        self.completions = FakeCompletions(script)
        self.chat = SimpleNamespace(completions=self.completions)


@pytest.fixture
def fake_client():
    return FakeClient


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
