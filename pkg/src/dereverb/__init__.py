"""Desk-scale speech dereverberation toolkit.

Synthesizes reverberant speech from dry recordings and room impulse
responses, and trains magnitude-spectrogram estimators for the dry signal,
the impulse response, and both jointly.
"""

__version__ = "0.1.0"
