"""Mixed-effects regression trees and forests for longitudinal panel data."""

__version__ = "0.1.0"
