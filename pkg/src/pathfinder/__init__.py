"""Path-loss map prediction with transmitter prompts and mask-guided attention."""

__version__ = "0.1.0"
