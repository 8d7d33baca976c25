"""Client-side online tuning of PFS I/O-path parameters, plus a simulator to exercise it."""

__version__ = "0.1.0"
