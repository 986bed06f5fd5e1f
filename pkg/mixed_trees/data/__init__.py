"""Panel data containers and transforms."""
