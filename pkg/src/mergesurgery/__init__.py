"""Multi-task model merging with post-merge representation surgery."""

__version__ = "0.1.0"
