"""
Utility modules for the surgical image enhancement agent.
"""

from scopeagent.utils.logging import logger

__all__ = ["logger"]
