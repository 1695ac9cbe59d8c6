"""Polynomial expansion pricing with mixture auxiliary densities."""
from __future__ import annotations

__version__ = "0.1.0"
