"""Two-time position measurements of a free particle on a periodic grid."""

__version__ = "0.1.0"
