"""
Configuration package for the surgical image enhancement agent.
"""

from scopeagent.config.settings import settings, Settings

__all__ = ["settings", "Settings"]
