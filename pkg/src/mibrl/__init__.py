"""Multimodal information bottleneck representations for pixel + proprioception SAC."""

__version__ = "0.1.0"
