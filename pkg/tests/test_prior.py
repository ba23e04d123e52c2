import json

import numpy as np
import pytest

from conftest import synthesize
from scopeagent.core.imagecore import (
    CANONICAL_ORDER,
    DistortionCategory as C,
    ImageBuf,
    Severity as S,
    decode_label,
    enumerate_valid_labels,
    load_image,
    load_manifest,
)
from scopeagent.core.metrics import accuracy_report
from scopeagent.core.prior import (
    FEATURE_NAMES,
    PriorModel,
    SoftLabels,
    TrainingHyper,
    extract_features,
    fit_prior,
    hard_label,
    head_loss_and_gradient,
    load_prior,
    prior_distributions,
    save_prior,
    soft_labels_from_features,
    softmax_t,
    train_prior,
)
from scopeagent.utils.error import ConfigError, DegenerateData, InvalidTemperature, NonFiniteLoss

# Columns that carry each head's signal in the synthetic feature rows
PRESENCE_COLUMN = {C.SMOKE: 0, C.MOTION_BLUR: 2, C.OVER_EXPOSURE: 3, C.LOW_LIGHT: 6}
SEVERITY_COLUMN = {C.MOTION_BLUR: 8, C.OVER_EXPOSURE: 9}
LOW_LIGHT_SEVERITY = 1  # log scaled


def separable_rows(labels, seed):
    rng = np.random.default_rng(seed)
    rows = np.ones((len(labels), len(FEATURE_NAMES)))
    for i, label in enumerate(labels):
        for c, col in PRESENCE_COLUMN.items():
            rows[i, col] = (1.0 if c in label else 0.0) + rng.normal(0, 0.05)
        for c, col in SEVERITY_COLUMN.items():
            sev = label.severity_of(c)
            rows[i, col] = {S.NORMAL: 0.0, S.MILD: -1.0, S.SEVERE: 1.0}[sev] + rng.normal(0, 0.05)
        sev = label.severity_of(C.LOW_LIGHT)
        rows[i, LOW_LIGHT_SEVERITY] = {S.NORMAL: 1.0, S.MILD: 0.5, S.SEVERE: 2.0}[sev] * np.exp(rng.normal(0, 0.05))
    return rows


@pytest.fixture(scope="module")
def separable_model():
    labels = enumerate_valid_labels() * 4
    return fit_prior(separable_rows(labels, seed=0), labels, TrainingHyper(epochs=500))


def test_softmax_properties():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        logits = rng.normal(0, 5, size=2)
        t = float(rng.uniform(0.1, 5.0))
        p = softmax_t(logits, t)
        assert p.sum() == pytest.approx(1.0)
        assert np.all(p > 0)
        assert np.argmax(p) == np.argmax(logits)
        assert np.allclose(softmax_t(logits + 3.0, t), p)


def test_softmax_temperature_flattens():
    logits = [2.0, -1.0]
    assert softmax_t(logits, 4.0).max() < softmax_t(logits, 1.0).max() < softmax_t(logits, 0.25).max()
    assert np.all(np.isfinite(softmax_t([1000.0, -1000.0], 0.01)))


@pytest.mark.parametrize("t", [0.0, -1.0, float("inf"), float("nan")])
def test_invalid_temperature(t):
    with pytest.raises(InvalidTemperature):
        softmax_t([0.0, 1.0], t)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(12, 4))
    y = rng.integers(0, 2, size=12)
    w, b = rng.normal(size=(2, 4)), rng.normal(size=2)
    _, gw, gb = head_loss_and_gradient(w, b, x, y, l2=0.01)

    eps = 1e-6
    for idx in np.ndindex(w.shape):
        wp, wm = w.copy(), w.copy()
        wp[idx] += eps
        wm[idx] -= eps
        numeric = (head_loss_and_gradient(wp, b, x, y, 0.01)[0] - head_loss_and_gradient(wm, b, x, y, 0.01)[0]) / (2 * eps)
        assert gw[idx] == pytest.approx(numeric, abs=1e-6)
    for j in range(2):
        bp, bm = b.copy(), b.copy()
        bp[j] += eps
        bm[j] -= eps
        numeric = (head_loss_and_gradient(w, bp, x, y, 0.01)[0] - head_loss_and_gradient(w, bm, x, y, 0.01)[0]) / (2 * eps)
        assert gb[j] == pytest.approx(numeric, abs=1e-6)


def test_training_loss_decreases(separable_model):
    history = separable_model.loss_history
    assert len(history) == 500
    assert history[-1] < history[0]


def test_separable_features_are_recovered(separable_model):
    labels = enumerate_valid_labels() * 2
    rows = separable_rows(labels, seed=99)
    correct = sum(hard_label(soft_labels_from_features(separable_model, row)) == label
                  for row, label in zip(rows, labels))
    assert correct == len(labels)


def test_soft_labels_are_distributions(separable_model):
    soft = soft_labels_from_features(separable_model, separable_rows([decode_label("normal")], 5)[0])
    for c in CANONICAL_ORDER:
        assert sum(soft.presence[c]) == pytest.approx(1.0)
        assert sum(soft.severity[c]) == pytest.approx(1.0)
        assert soft.p_present(c) < 0.5


def test_higher_temperature_is_less_confident(separable_model):
    row = separable_rows([decode_label("smoke:severe")], 7)[0]
    sharp = soft_labels_from_features(separable_model.with_temperature(0.5), row)
    flat = soft_labels_from_features(separable_model.with_temperature(3.0), row)
    assert 0.5 < flat.p_present(C.SMOKE) < sharp.p_present(C.SMOKE)


def test_degenerate_data():
    normal = [decode_label("normal")] * 5
    with pytest.raises(DegenerateData):
        fit_prior(np.ones((5, len(FEATURE_NAMES))), normal)
    with pytest.raises(DegenerateData):
        fit_prior(np.ones((0, len(FEATURE_NAMES))), [])
    with pytest.raises(DegenerateData):
        fit_prior(np.ones((3, len(FEATURE_NAMES))), normal)

    no_smoke = [decode_label("normal"), decode_label("low_light:severe")] * 4
    with pytest.raises(DegenerateData) as excinfo:
        fit_prior(separable_rows(no_smoke, seed=1), no_smoke)
    assert excinfo.value.details == {"category": "smoke", "present": 0, "rows": 8}

    all_blurred = [decode_label("motion_blur:mild"), decode_label("smoke:severe+motion_blur:severe")] * 4
    with pytest.raises(DegenerateData) as excinfo:
        fit_prior(separable_rows(all_blurred, seed=1), all_blurred)
    assert excinfo.value.details == {"category": "motion_blur", "present": 8, "rows": 8}


def test_non_finite_features_stop_training():
    labels = enumerate_valid_labels()
    rows = separable_rows(labels, seed=0)
    rows[0, 0] = np.nan
    with pytest.raises(NonFiniteLoss):
        fit_prior(rows, labels, TrainingHyper(epochs=5))


def test_save_and_load(tmp_path, separable_model):
    path = tmp_path / "prior.json"
    save_prior(separable_model, path)
    loaded = load_prior(path)
    assert loaded.to_dict() == separable_model.to_dict()

    data = json.loads(path.read_text())
    data["feature_schema_version"] = 99
    path.write_text(json.dumps(data))
    with pytest.raises(ConfigError):
        load_prior(path)
    with pytest.raises(ConfigError):
        load_prior(tmp_path / "missing.json")


def test_untrained_model_is_uniform():
    soft = soft_labels_from_features(PriorModel.untrained(), np.ones(len(FEATURE_NAMES)))
    assert soft == SoftLabels.uniform()
    assert hard_label(soft).is_normal


def soft(present, severe=None):
    severe = severe or {}
    return SoftLabels(
        {c: (1 - present.get(c, 0.1), present.get(c, 0.1)) for c in CANONICAL_ORDER},
        {c: (1 - severe.get(c, 0.2), severe.get(c, 0.2)) for c in CANONICAL_ORDER},
    )


def test_hard_label_thresholds_strictly():
    assert hard_label(soft({C.MOTION_BLUR: 0.5})).is_normal
    assert hard_label(soft({C.MOTION_BLUR: 0.51})) == decode_label("motion_blur:mild")
    assert hard_label(soft({C.MOTION_BLUR: 0.51}, {C.MOTION_BLUR: 0.9})) == decode_label("motion_blur:severe")
    assert hard_label(soft({C.MOTION_BLUR: 0.3}), threshold=0.25) == decode_label("motion_blur:mild")


def test_hard_label_resolves_conflicts():
    assert hard_label(soft({C.LOW_LIGHT: 0.7, C.OVER_EXPOSURE: 0.8})) == decode_label("over_exposure:mild")
    assert hard_label(soft({C.LOW_LIGHT: 0.7, C.OVER_EXPOSURE: 0.7})) == decode_label("low_light:mild")
    assert hard_label(soft({C.SMOKE: 0.9}, {C.SMOKE: 0.0})) == decode_label("smoke:severe")


def test_constant_image_features():
    f = extract_features(ImageBuf.constant(32, 32, 0.5))
    assert f["mean_luminance"] == pytest.approx(0.5)
    assert f["luminance_std"] == pytest.approx(0.0)
    assert f["gradient_magnitude"] == pytest.approx(0.0)
    assert f["laplacian_variance"] == pytest.approx(0.0)
    assert f["dark_channel_mean"] == pytest.approx(0.5)
    assert f["saturation_mean"] == pytest.approx(0.0)
    assert f["histogram_entropy"] == pytest.approx(0.0)
    assert f["shadow_clip"] == 0.0 and f["highlight_clip"] == 0.0
    assert extract_features(ImageBuf.constant(8, 8, 1.0))["highlight_clip"] == 1.0


def test_features_track_distortions(scene):
    dark = ImageBuf.from_array(scene.data * 0.2)
    assert extract_features(dark)["mean_luminance"] < extract_features(scene)["mean_luminance"]
    assert extract_features(dark)["shadow_clip"] > extract_features(scene)["shadow_clip"]


def test_train_prior_on_manifest(toy_manifest, scene):
    manifest = load_manifest(toy_manifest)
    model = train_prior(manifest, TrainingHyper(epochs=50))
    soft = prior_distributions(model, scene)
    assert all(0.0 < soft.p_present(c) < 1.0 for c in CANONICAL_ORDER)


@pytest.mark.slow
@pytest.mark.parametrize("seed", [7, 8, 9])
def test_prior_generalizes_to_held_out_images(tmp_path, seed):
    counts = {"normal": 40, "single": 200, "second": 120, "third": 40}
    manifest = load_manifest(synthesize(tmp_path, counts, sources=40, seed=seed, test_fraction=0.25))
    model = train_prior(manifest)

    held_out = manifest.split("test")
    predictions = [
        (hard_label(prior_distributions(model, load_image(manifest.distorted_file(e)))), e.label)
        for e in held_out
    ]
    report = accuracy_report(predictions)
    assert report.overall["category_only"] >= 0.85
    assert report.overall["joint"] >= 0.60
