"""
Command line entry package for the surgical image enhancement agent.
"""

from scopeagent_cli.__main__ import build_parser, main

__version__ = "0.1.0"

__all__ = ["build_parser", "main"]
