"""Video-conditioned chord generation and expressive MIDI rendering."""

__version__ = "0.1.0"
