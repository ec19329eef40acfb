"""Concept activation vector laboratory: synthetic Elements data, CNN training and CAV analyses."""
from cavlab.config import TOOL_VERSION as __version__
