"""Discriminator-guided score diffusion on analytic Gaussian mixtures."""

from .distributions import GaussianMixture, RatioField, canonical_pair
from .errors import DglabError
from .sde import DiffusedScore, SdeSchedule, reverse_sample

__version__ = "0.1.0"

__all__ = [
    "DglabError",
    "DiffusedScore",
    "GaussianMixture",
    "RatioField",
    "SdeSchedule",
    "canonical_pair",
    "reverse_sample",
]
