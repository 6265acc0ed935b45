"""Dynamic Byzantine reliable broadcast: IO-free protocol kernel,
deterministic network simulator, and trace checker."""

__version__ = "0.1.0"
