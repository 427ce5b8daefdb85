"""Federated image restoration with protocol-conditioned hypernetworks.

A shared imaging network is trained across simulated hospitals while each
hospital keeps a small hypernetwork that turns its scanning protocol into
per-channel scale/bias modulation of the shared features.
"""

__version__ = "0.1.0"
