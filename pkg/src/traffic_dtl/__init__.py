"""Decentralized mobile-traffic forecasting with frozen-layer transfer learning."""

__version__ = "0.1.0"
