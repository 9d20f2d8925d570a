"""Utility functions used throughout the project."""
