"""
Settings module for the surgical image enhancement agent.
Centralizes tunable defaults with environment variable support and validation.
"""

import os
from dataclasses import dataclass
from typing import Dict


@dataclass
class Settings:
    """Application settings with defaults and environment variable overrides."""

    # Logging
    log_level: str = "INFO"
    progress: bool = True

    # Backend
    api_key_env: str = "SURGVIS_API_KEY"
    model_id: str = "gpt-4o"
    http_timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 1.0
    max_in_flight: int = 4
    max_prompt_bytes: int = 20_000_000
    reask_on_parse_failure: bool = True

    # Prior model
    temperature: float = 1.1
    presence_threshold: float = 0.5
    learning_rate: float = 0.1
    epochs: int = 500
    l2: float = 1e-3

    # Few-shot context
    context_k: int = 15
    context_single: int = 8
    context_composite: int = 7

    # Metrics
    psnr_cap: float = 100.0
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    niqe_patch_size: int = 96
    niqe_sharpness: float = 0.75
    niqe_min_corpus: int = 20

    # Enhancement
    rl_iterations: int = 15

    # Harness
    max_parallel: int = 4
    cache_dirname: str = "cache"

    def __post_init__(self):
        """Load settings from environment variables."""
        for field_name in self.__dataclass_fields__:
            env_name = f"SCOPEAGENT_{field_name.upper()}"
            env_value = os.environ.get(env_name)

            if env_value is not None:
                field_type = self.__dataclass_fields__[field_name].type
                if field_type == bool:
                    setattr(self, field_name, env_value.lower() in ('true', 'yes', '1'))
                elif field_type == int:
                    setattr(self, field_name, int(env_value))
                elif field_type == float:
                    setattr(self, field_name, float(env_value))
                else:
                    setattr(self, field_name, env_value)

    @property
    def api_key(self) -> str:
        """API key read from the configured environment variable."""
        return os.environ.get(self.api_key_env, "")

    def validate(self) -> Dict[str, str]:
        """Validate settings and return any errors."""
        errors = {}

        if self.temperature <= 0:
            errors["temperature"] = "Temperature must be positive"
        if not 0.0 <= self.presence_threshold < 1.0:
            errors["presence_threshold"] = "Presence threshold must lie in [0, 1)"
        if self.http_timeout <= 0:
            errors["http_timeout"] = "HTTP timeout must be positive"
        if self.max_retries < 0:
            errors["max_retries"] = "Max retries cannot be negative"
        if self.max_in_flight <= 0:
            errors["max_in_flight"] = "Max in-flight requests must be positive"
        if self.max_parallel <= 0:
            errors["max_parallel"] = "Max parallel images must be positive"
        if self.context_single + self.context_composite != self.context_k:
            errors["context_k"] = "Single plus composite exemplars must equal k"
        if self.ssim_window % 2 == 0:
            errors["ssim_window"] = "SSIM window must be odd"

        return errors


# Singleton instance of settings
settings = Settings()
