"""Shared helpers for the project."""
