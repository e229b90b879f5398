"""Tone style transfer toolkit: CIELAB color science, 3D LUTs, evaluation
metrics, a contrastive tone-style scorer, a triplet dataset pipeline and a
toy in-context flow-matching generator."""

__version__ = "0.1.0"
