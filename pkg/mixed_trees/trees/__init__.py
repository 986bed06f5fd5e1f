"""Regression trees and bagged forests."""
