"""Dual-expert vision-language-action policy with a scene-flow motion prior, at desk scale."""

__version__ = "0.1.0"
