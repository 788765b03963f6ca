"""Missing PMU data reconstruction with auxiliary low-rank learning."""

__version__ = "0.1.0"
