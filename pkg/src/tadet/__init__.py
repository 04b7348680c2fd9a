"""Two-stage temporal activity detection on feature videos, in plain numpy."""

__version__ = "0.1.0"
