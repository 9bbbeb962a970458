"""Remaining-useful-life prediction with mixture (log)-location-scale heads on LSTM features."""

__version__ = "0.1.0"
