"""Windowed token pruning and phase-level KV reuse for masked diffusion LM inference."""

__version__ = "0.1.0"
