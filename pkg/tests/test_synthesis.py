import json

import numpy as np
import pytest

from conftest import make_scene, synthesize, write_sources
from scopeagent.core.imagecore import (
    DistortionCategory as C,
    ImageBuf,
    Severity as S,
    decode_label,
    encode_label,
    load_image,
    load_manifest,
)
from scopeagent.core.metrics import psnr
from scopeagent.core.synthesis import (
    BenchmarkConfig,
    SynthesisParams,
    build_benchmark,
    compose_distortions,
    compose_with_record,
    expand_cells,
    load_sidecar,
    motion_kernel,
    smoke_density,
    synth_low_light,
    synth_motion_blur,
    synth_over_exposure,
    synth_smoke,
)
from scopeagent.utils.error import (
    ConfigError,
    ContractViolation,
    InsufficientSourceImages,
    KernelExceedsImage,
    SeverityUnsupported,
)

PARAMS = SynthesisParams()


def rng(seed=0):
    return np.random.default_rng(seed)


def test_low_light_darkens(scene):
    quiet = SynthesisParams.from_dict({"low_light": {"mild": {"noise_sigma": 0.0}}})
    out = synth_low_light(scene, S.MILD, quiet, rng())
    expected = np.clip(0.7 * scene.data ** 1.8, 0, 1)
    assert np.allclose(out.data, expected)
    assert out.luminance().mean() < scene.luminance().mean()


def test_low_light_noise_is_seeded(scene):
    a = synth_low_light(scene, S.SEVERE, PARAMS, rng(5))
    b = synth_low_light(scene, S.SEVERE, PARAMS, rng(5))
    c = synth_low_light(scene, S.SEVERE, PARAMS, rng(6))
    assert a == b
    assert a != c


def test_over_exposure_clips(scene):
    out = synth_over_exposure(scene, S.SEVERE, PARAMS)
    assert np.allclose(out.data, np.clip(2.2 * scene.data, 0, 1))
    assert out.data.max() <= 1.0


def test_over_exposure_knee_is_monotone():
    soft = SynthesisParams.from_dict({"over_exposure": {"mild": {"clip": False}}})
    ramp = ImageBuf.from_array(np.tile(np.linspace(0, 1, 32)[None, :, None], (4, 1, 3)))
    out = synth_over_exposure(ramp, S.MILD, soft).data[0, :, 0]
    assert np.all(np.diff(out) > 0)
    assert out[-1] == pytest.approx(1.0)
    assert out[0] == 0.0


@pytest.mark.parametrize("length,angle", [(7, 0.0), (17, 45.0), (8, 90.0), (5, 123.4)])
def test_motion_kernel_is_normalized(length, angle):
    k = motion_kernel(length, angle)
    assert k.sum() == pytest.approx(1.0)
    assert k.shape[0] % 2 == 1
    assert np.all(k >= 0)


def test_horizontal_kernel_is_a_row():
    k = motion_kernel(7, 0.0)
    assert np.allclose(k[3], 1 / 7)
    assert k.sum() - k[3].sum() == pytest.approx(0.0)


def test_motion_blur_preserves_constant():
    flat = ImageBuf.constant(32, 32, 0.3)
    out = synth_motion_blur(flat, S.SEVERE, PARAMS, angle=30.0)
    assert np.allclose(out.data, 0.3)


def test_motion_blur_kernel_exceeds_image():
    with pytest.raises(KernelExceedsImage):
        synth_motion_blur(ImageBuf.constant(10, 40, 0.5), S.SEVERE, PARAMS)


def test_unit_kernel_is_identity(scene):
    params = SynthesisParams.from_dict({"motion_blur": {"mild": {"kernel_length": 1}}})
    assert synth_motion_blur(scene, S.MILD, params) == scene


def test_smoke_brightens_and_flattens(scene):
    out = synth_smoke(scene, S.SEVERE, PARAMS, rng())
    assert out.luminance().mean() > scene.luminance().mean()
    assert np.all(out.data >= np.minimum(scene.data, 0.8) - 1e-12)


def test_smoke_density_range():
    d = smoke_density(40, 50, 4, rng(2))
    assert d.shape == (40, 50)
    assert d.min() == pytest.approx(0.0)
    assert d.max() == pytest.approx(1.0)


def test_smoke_mild_unsupported(scene):
    with pytest.raises(SeverityUnsupported):
        synth_smoke(scene, S.MILD, PARAMS, rng())


def test_normal_severity_is_a_contract_violation(scene):
    with pytest.raises(ContractViolation):
        synth_low_light(scene, S.NORMAL, PARAMS, rng())


def test_compose_normal_is_identity(scene):
    assert compose_distortions(scene, decode_label("normal"), PARAMS, rng()) == scene


def test_compose_records_parameters(scene):
    label = decode_label("smoke:severe+motion_blur:mild+low_light:mild")
    out, applied = compose_with_record(scene, label, PARAMS, rng(1))
    assert set(applied) == {"smoke", "motion_blur", "low_light"}
    assert 0.0 <= applied["motion_blur"]["angle"] < 180.0
    assert applied["low_light"]["gamma"] == 1.8
    assert applied["smoke"]["severity"] == "severe"
    again, _ = compose_with_record(scene, label, PARAMS, rng(1))
    assert out == again


def test_params_validation():
    with pytest.raises(ConfigError):
        SynthesisParams.from_dict({"low_light": {"severe": {"gamma": 1.5}}})
    with pytest.raises(ConfigError):
        SynthesisParams.from_dict({"fog": {}})
    with pytest.raises(ConfigError):
        SynthesisParams.from_dict({"smoke": {"mild": {"airlight": 0.5, "beta": 1.0}}})
    assert SynthesisParams().validate() == {}


def test_severe_degrades_more_than_mild():
    """Averaged over many images, severe is further from the clean image than mild."""
    for category in (C.LOW_LIGHT, C.OVER_EXPOSURE, C.MOTION_BLUR):
        mild_scores, severe_scores = [], []
        for seed in range(20):
            clean = make_scene(40, 40, seed=seed)
            mild = compose_distortions(clean, decode_label(f"{category.value}:mild"), PARAMS, rng(seed))
            severe = compose_distortions(clean, decode_label(f"{category.value}:severe"), PARAMS, rng(seed))
            mild_scores.append(psnr(clean, mild))
            severe_scores.append(psnr(clean, severe))
        assert np.mean(severe_scores) < np.mean(mild_scores), category


def test_expand_cells_spreads_orders(tmp_path):
    source = write_sources(tmp_path, 2, size=32)
    config = BenchmarkConfig.from_dict({"source_manifest": str(source), "counts": {"single": 9, "normal": 1}})
    cells = expand_cells(config)
    assert encode_label(cells[0][0]) == "normal"
    assert sum(n for _, n in cells) == 10
    assert len(cells) == 8
    assert sorted(n for _, n in cells[1:]) == [1, 1, 1, 1, 1, 2, 2]


def test_allowed_composites_filter(tmp_path):
    source = write_sources(tmp_path, 2, size=32)
    config = BenchmarkConfig.from_dict({
        "source_manifest": str(source),
        "counts": {"second": 6},
        "allowed_composites": [["smoke", "motion_blur"]],
    })
    cells = expand_cells(config)
    assert all(set(label.categories) == {C.SMOKE, C.MOTION_BLUR} for label, _ in cells)
    assert sum(n for _, n in cells) == 6


def test_benchmark_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        BenchmarkConfig.from_dict({"counts": {}})
    with pytest.raises(ConfigError):
        BenchmarkConfig.from_dict({"source_manifest": "x", "colour": 1})
    with pytest.raises(ConfigError):
        BenchmarkConfig.from_dict({"source_manifest": "x", "counts": {"smoke:mild": 2}})
    with pytest.raises(ConfigError):
        BenchmarkConfig.from_dict({"source_manifest": "x", "allowed_composites": [["low_light", "over_exposure"]]})


def test_insufficient_sources(tmp_path):
    source = write_sources(tmp_path, 2, size=32)
    config = BenchmarkConfig.from_dict({"source_manifest": str(source), "counts": {"single": 5}})
    with pytest.raises(InsufficientSourceImages):
        build_benchmark(config, str(tmp_path / "out"))


def test_benchmark_is_deterministic(tmp_path):
    counts = {"normal": 1, "smoke:severe": 2, "motion_blur:severe+low_light:mild": 2}
    a = load_manifest(synthesize(tmp_path / "a", counts, sources=3, size=32))
    b = load_manifest(synthesize(tmp_path / "b", counts, sources=3, size=32))
    assert [e.to_dict() for e in a] == [e.to_dict() for e in b]
    for ea, eb in zip(a, b):
        assert a.distorted_file(ea).read_bytes() == b.distorted_file(eb).read_bytes()


def test_benchmark_layout(tmp_path):
    counts = {"normal": 2, "motion_blur:mild": 4}
    manifest = load_manifest(synthesize(tmp_path, counts, sources=6, test_fraction=0.5, size=32))
    assert [e.id for e in manifest] == [f"img{i:05d}" for i in range(6)]
    assert [e.split for e in manifest] == ["train", "test", "train", "train", "test", "test"]

    blur = manifest.get("img00002")
    sidecar = load_sidecar(manifest.distorted_file(blur))
    assert sidecar["label"] == "motion_blur:mild"
    assert sidecar["seed"] == [3, 2]
    assert sidecar["params"]["motion_blur"]["kernel_length"] == 7

    clean = load_image(manifest.clean_file(blur))
    assert clean.shape == (32, 32, 3)
    assert load_image(manifest.distorted_file(blur)) != clean
    assert load_sidecar(tmp_path / "nothing.png") is None

    with open(tmp_path / "bench" / "manifest.json", encoding="utf-8") as f:
        assert isinstance(json.load(f), list)


def test_benchmark_resize_writes_clean_copies(tmp_path):
    source = write_sources(tmp_path / "src", 2, size=48)
    config = BenchmarkConfig.from_dict({
        "source_manifest": str(source), "counts": {"smoke:severe": 2}, "resize": 24,
    })
    manifest = build_benchmark(config, str(tmp_path / "out"))
    entry = manifest.entries[0]
    assert entry.clean_path.startswith("clean")
    assert load_image(manifest.clean_file(entry)).shape == (24, 24, 3)
    assert load_image(manifest.distorted_file(entry)).shape == (24, 24, 3)
