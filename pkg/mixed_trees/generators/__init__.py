"""Synthetic longitudinal panels with known truth."""
