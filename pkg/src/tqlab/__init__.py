"""Exact decoding-time alignment on toy token MDPs, with TQ* decoders compared against controlled decoding."""

__version__ = "0.1.0"
