"""Prior-conditioned retrospective motion correction for MRI."""

__version__ = "0.1.0"
