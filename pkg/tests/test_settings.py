import json
from pathlib import Path

import numpy as np

from scopeagent.config.settings import Settings
from scopeagent.core.imagecore import Severity
from scopeagent.utils.error import ConfigError, InvariantViolation, ScopeAgentError, format_error
from scopeagent.utils.logging import StructuredLogger


def test_environment_overrides(monkeypatch):
    monkeypatch.setenv("SCOPEAGENT_TEMPERATURE", "2.5")
    monkeypatch.setenv("SCOPEAGENT_MAX_PARALLEL", "7")
    monkeypatch.setenv("SCOPEAGENT_PROGRESS", "no")
    monkeypatch.setenv("SCOPEAGENT_MODEL_ID", "vision-large")
    s = Settings()
    assert s.temperature == 2.5
    assert s.max_parallel == 7
    assert s.progress is False
    assert s.model_id == "vision-large"


def test_api_key_comes_from_named_variable(monkeypatch):
    monkeypatch.setenv("SURGVIS_API_KEY", "sk-test")
    assert Settings().api_key == "sk-test"
    monkeypatch.delenv("SURGVIS_API_KEY")
    assert Settings().api_key == ""


def test_validate():
    assert Settings().validate() == {}
    s = Settings()
    s.temperature = 0.0
    s.context_single = 3
    s.ssim_window = 10
    assert set(s.validate()) == {"temperature", "context_k", "ssim_window"}


def test_error_serialization():
    err = InvariantViolation("Smoke is always severe", details={"severity": "mild"})
    payload = err.to_dict()
    assert payload["type"] == "InvariantViolation"
    assert payload["details"] == {"severity": "mild"}
    assert isinstance(err, ScopeAgentError)
    assert ConfigError("bad").to_dict().get("details") is None
    assert format_error(ValueError("plain"))["type"] == "ValueError"


def test_structured_log_lines(caplog):
    log = StructuredLogger("scopeagent.test")
    log.set_context(run="abc")
    log.info("Processed image", id="img00001")
    log.debug("Hidden")
    log.clear_context()
    lines = [m for m in caplog.messages if m.startswith("Processed image")]
    assert len(lines) == 1
    fields = json.loads(lines[0].split("Processed image ", 1)[1])
    assert fields == {"run": "abc", "id": "img00001"}
    assert not any("Hidden" in m for m in caplog.messages)


def test_log_context_accepts_array_values(caplog):
    log = StructuredLogger("scopeagent.test.values")
    log.info("Loss", loss=np.float64(0.25), shape=np.array([2, 3]), severity=Severity.MILD, path=Path("a/b.png"))
    line = next(m for m in caplog.messages if m.startswith("Loss "))
    assert json.loads(line[len("Loss "):]) == {"loss": 0.25, "shape": [2, 3], "severity": "mild", "path": "a/b.png"}
