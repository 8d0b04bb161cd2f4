"""spirokit: spirometry analysis, report generation, and evaluation."""

__version__ = "0.1.0"
