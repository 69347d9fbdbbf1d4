"""Vision Mamba backbone with selective visual prompting, built on numpy."""

__version__ = "0.1.0"
