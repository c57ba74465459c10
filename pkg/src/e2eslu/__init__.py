"""End-to-end speech-to-intent experiments with text-to-intent transfer."""

__version__ = "0.1.0"
