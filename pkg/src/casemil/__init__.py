"""Case-level multi-view mammography classification with two-level multiple instance learning."""

__version__ = "0.1.0"
