"""Autoregressive pretraining on GPS trajectories with user and region fine-tuning."""

__version__ = "0.1.0"
