"""Malicious unlearning requests against predictive uncertainty: attack
crafting, unlearning algorithms, uncertainty estimators and calibration
metrics on small numpy MLPs."""

__version__ = "0.1.0"
