"""Latent action models and an intent-flag locomotion controller on a planar proxy plant."""

from __future__ import annotations

__version__ = "0.1.0"

__all__ = ["diffkit", "synthworld", "lam", "command", "plant", "rewards", "trainer", "evalkit", "cli"]
