"""Figures for training runs and ablations."""
