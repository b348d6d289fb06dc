"""Multi-band Wi-Fi sensing: sub-7 GHz CSI and 60 GHz beam SNR fused by a granularity-matching network."""

__version__ = "0.1.0"
