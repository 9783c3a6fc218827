"""Bit-packed XNOR network inference and FPGA accelerator throughput models."""
__version__ = "0.1.0"
