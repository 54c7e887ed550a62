"""Collaborative-filtering toolkit: bias-aware contrastive training,
all-ranking evaluation, and popularity-debiasing diagnostics."""

__version__ = "0.1.0"
