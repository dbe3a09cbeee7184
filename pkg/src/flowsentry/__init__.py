"""Flow-based DDoS detection: PCAP -> flow samples -> small CNN -> metrics."""

__version__ = "0.1.0"
