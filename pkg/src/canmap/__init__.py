"""Canonical-mapping harmonization of multi-site MRI slices."""
__version__ = "0.1.0"
