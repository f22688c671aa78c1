"""Multi-task federated learning with a shared representation block and private task heads."""

__version__ = "0.1.0"
