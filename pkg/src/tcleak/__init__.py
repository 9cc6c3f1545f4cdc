"""Side-channel simulation and analysis of GPU Tensor Core weight leakage."""

__version__ = "0.1.0"
