"""Cross-validation and scoring of fitted models."""
