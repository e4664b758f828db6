"""Learned proximal-gradient MRI reconstruction at desk scale."""

__version__ = "0.1.0"
