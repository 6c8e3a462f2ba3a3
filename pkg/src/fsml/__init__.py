"""Few-shot crop-type classification lab on synthetic parcel time series."""

__version__ = "0.1.0"
