"""Teacher-guided soft actor-critic on pixel-grid control tasks."""

__version__ = "0.1.0"
