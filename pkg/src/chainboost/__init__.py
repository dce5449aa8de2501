"""Boosting-style chained transformer ensembles with layer-pipelined decoding."""

__version__ = "0.1.0"
