"""
Core functionality for the surgical image enhancement agent.
"""

from scopeagent.core.imagecore import (
    DatasetManifest,
    DistortionCategory,
    DistortionLabel,
    ImageBuf,
    ManifestEntry,
    Severity,
)

__all__ = ["DatasetManifest", "DistortionCategory", "DistortionLabel", "ImageBuf", "ManifestEntry", "Severity"]
