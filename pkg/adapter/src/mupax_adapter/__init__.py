"""Reference bridge server for the MPX1 evaluation protocol."""

__version__ = "0.1.0"
