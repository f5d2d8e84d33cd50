"""Cellular signal maps: weighted random forests, quality transforms, importance
reweighting, data valuation and propagation / kriging baselines."""

__version__ = "0.1.0"
