"""NMPC of PDE-governed reactors with embedded physics-informed surrogates."""

__version__ = "0.1.0"
