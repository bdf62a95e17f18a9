"""Shortcut flow-matching diffusion policy with task conditioning and
rotation-aware action chunks."""

__version__ = "0.1.0"
