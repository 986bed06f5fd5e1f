"""IO, hashing and report helpers for mixed_trees."""
