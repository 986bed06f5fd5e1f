"""Tests for mixed_trees."""
