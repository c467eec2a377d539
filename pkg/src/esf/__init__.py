"""Example-server framework: sharded speech storage, on-the-fly augmentation,
feature extraction, streaming batch transport with credit-based flow control,
trainer simulation, and shallow-fusion decoding."""

__version__ = "0.1.0"
