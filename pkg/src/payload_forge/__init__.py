"""Raw-byte CNN malware detector, embedding-space payload attack, and
PE injection with a desk-scale evaluation harness."""

__version__ = "0.1.0"
