import httpx
import openai
import pytest

from scopeagent.config import settings
from scopeagent.core.agent import run_inference, select_models
from scopeagent.core.cache import ResponseCache, cache_key
from scopeagent.core.context import FewShotContext
from scopeagent.core.enhance import load_registry
from scopeagent.core.imagecore import (
    CANONICAL_ORDER,
    DistortionCategory as C,
    decode_label,
    encode_label,
    enumerate_valid_labels,
)
from scopeagent.core.prior import SoftLabels
from scopeagent.protocol.answer import format_answer
from scopeagent.protocol.prompt import FORMAT_REMINDER, assemble_prompt
from scopeagent.transport import AgentBackendDescriptor, HttpBackend, MockBackend, create_backend
from scopeagent.transport.http import to_chat_messages
from scopeagent.transport.mock import scheduled_epsilon
from scopeagent.utils.error import (
    BackendRefusal,
    BackendTimeout,
    ConfigError,
    InvariantViolation,
    ParseFailure,
)

URL = "https://example.invalid/v1/chat/completions"


def make_prompt(scene, truth="smoke:severe", query_id="q0", mode="cot", soft=None):
    notes = {"query_id": query_id, "ground_truth": decode_label(truth)}
    return assemble_prompt(scene, soft or SoftLabels.uniform(), FewShotContext(), mode, annotations=notes)


def mock(**options):
    return MockBackend(AgentBackendDescriptor.from_dict({"options": options}))


def http(client, sleeps=None, **descriptor):
    desc = AgentBackendDescriptor.from_dict({"kind": "http", "model_id": "fake-vision", **descriptor})
    sleep = sleeps.append if sleeps is not None else (lambda _: None)
    return HttpBackend(desc, client=client, sleep=sleep)


def status_error(cls, status):
    request = httpx.Request("POST", URL)
    return cls("boom", response=httpx.Response(status, request=request), body=None)


# routing

def test_select_models_covers_every_label():
    registry = load_registry()
    rank = {c: i for i, c in enumerate(registry.chain_order)}
    for label in enumerate_valid_labels():
        plan = select_models(label, registry)
        assert len(plan) == len(label)
        assert {(s.category, s.severity) for s in plan} == set(label.entries)
        assert [rank[s.category] for s in plan] == sorted(rank[s.category] for s in plan)
        for step in plan:
            assert step.enhancer_id == registry.lookup(step.category, step.severity).id


def test_select_models_third_order():
    plan = select_models(decode_label("over_exposure:mild+motion_blur:severe+smoke:severe"), load_registry())
    assert [s.enhancer_id for s in plan] == ["desmoke:severe", "deblur:severe", "exposure:mild"]
    assert len(select_models(decode_label("normal"), load_registry())) == 0


# mock policies

def test_ground_truth_policy(scene):
    for label in enumerate_valid_labels():
        prediction = run_inference(mock(), make_prompt(scene, encode_label(label)))
        assert prediction.label == label
        assert len(prediction.trace) == 1


def test_ground_truth_policy_needs_annotation(scene):
    prompt = assemble_prompt(scene, SoftLabels.uniform(), FewShotContext())
    with pytest.raises(BackendRefusal):
        mock().invoke(prompt)


def test_echo_prior_policy(scene):
    presence = {c: (0.9, 0.1) for c in CANONICAL_ORDER}
    presence[C.SMOKE] = (0.2, 0.8)
    presence[C.MOTION_BLUR] = (0.3, 0.7)
    severity = {c: (0.6, 0.4) for c in CANONICAL_ORDER}
    soft = SoftLabels(presence, severity)
    prediction = run_inference(mock(policy="echo-prior"), make_prompt(scene, "normal", soft=soft))
    assert prediction.label == decode_label("smoke:severe+motion_blur:mild")


def test_fixed_label_policy(scene):
    backend = mock(policy="fixed-label", label="low_light:severe")
    assert run_inference(backend, make_prompt(scene, "smoke:severe")).label == decode_label("low_light:severe")
    assert backend.descriptor.model_id == "mock-fixed-label-low_light:severe"


@pytest.mark.parametrize("options", [
    {"policy": "oracle"},
    {"policy": "noisy", "epsilon": 1.5},
    {"policy": "fixed-label", "label": "smoke:mild"},
])
def test_mock_option_errors(options):
    with pytest.raises(ConfigError):
        mock(**options)


def test_scheduled_epsilon():
    assert scheduled_epsilon(0) == pytest.approx(0.35)
    assert scheduled_epsilon(10) == pytest.approx(0.15)
    assert scheduled_epsilon(15) == pytest.approx(0.05)
    assert scheduled_epsilon(30) == pytest.approx(0.05)


def test_noisy_policy_corruptions_are_nested(scene):
    def corrupted(epsilon):
        backend = mock(policy="noisy", epsilon=epsilon, seed=5)
        wrong = set()
        for i in range(60):
            prediction = run_inference(backend, make_prompt(scene, "motion_blur:mild", query_id=f"q{i}"))
            if encode_label(prediction.label) != "motion_blur:mild":
                wrong.add(i)
        return wrong

    low, high = corrupted(0.1), corrupted(0.5)
    assert low <= high
    assert len(high) > len(low)
    assert corrupted(0.0) == set()
    assert len(corrupted(1.0)) == 60


def test_noisy_policy_is_deterministic(scene):
    prompt = make_prompt(scene, "low_light:mild", query_id="fixed")
    answers = {mock(policy="noisy", epsilon=0.5, seed=1).invoke(prompt).text for _ in range(3)}
    assert len(answers) == 1


# cache

def test_cache_round_trip(tmp_path):
    cache = ResponseCache(tmp_path / "cache")
    key = cache_key("m", b"prompt")
    assert key != cache_key("n", b"prompt")
    assert cache.get(key) is None
    cache.put(key, "réponse", meta={"model_id": "m"})
    assert key in cache
    assert cache.get(key) == "réponse"
    meta = cache.metadata(key)
    assert meta["key"] == key
    assert meta["model_id"] == "m"
    assert meta["bytes"] == len("réponse".encode("utf-8"))
    assert cache.stats == {"hits": 1, "misses": 1, "writes": 1}


def test_warm_cache_skips_backend(scene, tmp_path):
    cache = ResponseCache(tmp_path / "cache")
    prompt = make_prompt(scene)
    first = run_inference(mock(), prompt, cache)
    assert first.backend_meta["cache_hit"] is False

    backend = mock()
    second = run_inference(backend, prompt, cache)
    assert backend.calls == 0
    assert second.backend_meta["cache_hit"] is True
    assert second == first


def test_cache_is_keyed_by_model(scene, tmp_path):
    cache = ResponseCache(tmp_path / "cache")
    prompt = make_prompt(scene, "smoke:severe")
    run_inference(mock(), prompt, cache)
    backend = mock(policy="fixed-label", label="normal")
    assert run_inference(backend, prompt, cache).label.is_normal
    assert backend.calls == 1


def test_unparsable_response_is_cached(scene, tmp_path, fake_client):
    cache = ResponseCache(tmp_path / "cache")
    backend = http(fake_client(["no answer"]))
    prompt = make_prompt(scene)
    with pytest.raises(ParseFailure):
        run_inference(backend, prompt, cache, reask=False)
    assert cache.get(cache_key("fake-vision", prompt.to_bytes())) == "no answer"


# re-ask and label rules

def test_reask_once_after_parse_failure(scene, fake_client):
    client = fake_client(["I am not sure.", "1. Looks hazy.\n" + format_answer(decode_label("smoke:severe"))])
    backend = http(client)
    prediction = run_inference(backend, make_prompt(scene), reask=True)
    assert prediction.label == decode_label("smoke:severe")
    assert prediction.backend_meta["reasked"] is True
    assert backend.calls == 2
    last = client.completions.requests[-1]["messages"][0]["content"][-1]
    assert last == {"type": "text", "text": FORMAT_REMINDER}


def test_reask_failure_surfaces(scene, fake_client):
    backend = http(fake_client(["still nothing"]))
    with pytest.raises(ParseFailure) as info:
        run_inference(backend, make_prompt(scene), reask=True)
    assert info.value.details["raw_response"] == "still nothing"
    assert backend.calls == 2


def test_impossible_label_keeps_raw_response(scene, fake_client):
    raw = ('1. Dark and bright.\n{"distortions": [{"category": "low_light", "severity": "mild"}, '
           '{"category": "over_exposure", "severity": "severe"}]}')
    with pytest.raises(InvariantViolation) as info:
        run_inference(http(fake_client([raw])), make_prompt(scene))
    assert info.value.details["raw_response"] == raw


def test_direct_mode_prediction_has_empty_trace(scene, fake_client):
    answer = format_answer(decode_label("over_exposure:severe"))
    prediction = run_inference(http(fake_client([answer])), make_prompt(scene, mode="direct"))
    assert prediction.label == decode_label("over_exposure:severe")
    assert prediction.to_dict()["trace"] == []
    assert prediction.backend_meta["prompt_tokens"] == 100


# http backend

def test_http_request_wire_format(scene, fake_client):
    client = fake_client([format_answer(decode_label("normal"))])
    prompt = make_prompt(scene)
    http(client, options={"temperature": 0.2, "max_tokens": 300}).invoke(prompt)
    request = client.completions.requests[0]
    assert request["model"] == "fake-vision"
    assert request["temperature"] == 0.2
    assert request["max_tokens"] == 300
    assert request["messages"] == to_chat_messages(prompt)
    parts = request["messages"][0]["content"]
    images = [p for p in parts if p["type"] == "image_url"]
    assert len(images) == 1
    assert images[0]["image_url"]["url"].startswith("data:image/png;base64,")


def test_http_retries_with_backoff(scene, fake_client):
    sleeps = []
    client = fake_client([
        status_error(openai.InternalServerError, 500),
        status_error(openai.RateLimitError, 429),
        format_answer(decode_label("motion_blur:mild")),
    ])
    reply = http(client, sleeps, max_retries=3).invoke(make_prompt(scene))
    assert "motion_blur" in reply.text
    assert sleeps == [settings.backoff_base, settings.backoff_base * 2]
    assert len(client.completions.requests) == 3


def test_http_client_error_is_not_retried(scene, fake_client):
    sleeps = []
    client = fake_client([status_error(openai.BadRequestError, 400)])
    with pytest.raises(BackendRefusal) as info:
        http(client, sleeps).invoke(make_prompt(scene))
    assert info.value.details["status"] == 400
    assert sleeps == []
    assert len(client.completions.requests) == 1


def test_http_retries_exhausted(scene, fake_client):
    request = httpx.Request("POST", URL)
    client = fake_client([openai.APITimeoutError(request=request)])
    with pytest.raises(BackendTimeout):
        http(client, max_retries=2).invoke(make_prompt(scene))
    assert len(client.completions.requests) == 3

    client = fake_client([status_error(openai.InternalServerError, 503)])
    with pytest.raises(BackendRefusal) as info:
        http(client, max_retries=1).invoke(make_prompt(scene))
    assert info.value.details["status"] == 503


def test_http_missing_api_key(monkeypatch):
    monkeypatch.delenv("SURGVIS_API_KEY", raising=False)
    with pytest.raises(ConfigError):
        create_backend(AgentBackendDescriptor.from_dict({"kind": "http"}))


# descriptor

def test_descriptor_defaults():
    desc = AgentBackendDescriptor.from_dict({})
    assert desc.kind == "mock"
    assert desc.model_id == "mock-ground-truth"
    noisy = AgentBackendDescriptor.from_dict({"options": {"policy": "noisy", "seed": 2}})
    assert noisy.model_id == "mock-noisy-schedule-2"
    remote = AgentBackendDescriptor.from_dict({"kind": "http"})
    assert remote.model_id == settings.model_id
    assert remote.max_retries == settings.max_retries
    assert AgentBackendDescriptor.from_dict(remote.to_dict()) == remote


@pytest.mark.parametrize("data", [
    {"kind": "grpc"},
    {"timeout": 0},
    {"max_retries": -1},
    {"model": "gpt"},
])
def test_descriptor_errors(data):
    with pytest.raises(ConfigError):
        AgentBackendDescriptor.from_dict(data)
