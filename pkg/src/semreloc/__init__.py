"""Object-level semantic mapping and object-based camera relocalization."""

__version__ = "0.1.0"
