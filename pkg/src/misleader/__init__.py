"""Extraction-resistant model serving: a defended ensemble trained against an
in-loop clone, extraction attacks to measure it, and numerical checks of the
accompanying generalization and distribution-shift bounds."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"
