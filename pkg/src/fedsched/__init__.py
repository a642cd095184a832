"""Multi-job federated learning device scheduling and simulation."""

__version__ = "0.1.0"
