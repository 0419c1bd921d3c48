"""Block-sparse video inference with an online REINFORCE block-selection policy."""

__version__ = "0.1.0"
