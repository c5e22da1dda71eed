"""Adversarial feature-map perturbation training for occluded person re-identification."""

__version__ = "0.1.0"
