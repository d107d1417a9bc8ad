"""Multimodal dialogue toolkit.

Builds dialogue datasets enriched with turn-level and entity-level images,
trains shared or separate encoder-decoder transformer responders on them,
and evaluates generated responses with the usual dialogue metric suite.
"""

__version__ = "0.1.0"
