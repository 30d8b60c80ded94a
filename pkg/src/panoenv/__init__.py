"""Synthetic panoramic navigation environments, adapted diffusion generators and a navigation agent."""

__version__ = "0.1.0"
