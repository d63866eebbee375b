"""Desk-scale laboratory for spuriosity-regularized contrastive fine-tuning
of dual vision-language encoders."""

__version__ = "0.1.0"
