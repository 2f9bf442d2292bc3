"""Force-centric neural forcefield toolkit."""

__version__ = "0.1.0"
