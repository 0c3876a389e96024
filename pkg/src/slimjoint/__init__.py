"""Joint width and weight optimization for slimmable networks, with Slim and
BigNAS-style baselines, at desk scale (numpy only)."""

__version__ = "0.1.0"
