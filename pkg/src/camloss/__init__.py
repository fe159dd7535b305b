"""CNN training with spatial supervision of class-agnostic activation maps by class activation maps."""

__version__ = "0.1.0"
