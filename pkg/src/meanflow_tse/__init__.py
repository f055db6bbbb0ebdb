"""One-step mean-flow target source extraction at desk scale."""

__version__ = "0.1.0"
