"""Strong lottery tickets in partially frozen random networks."""

__version__ = "0.1.0"
