"""Frame-level audio-text alignment with temporally strong captions."""

__version__ = "0.1.0"
