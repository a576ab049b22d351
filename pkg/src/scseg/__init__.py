"""Subcellular EM segmentation from frozen dual-encoder embeddings.

A trainable stack (feature alignment + fusion, learned class prompts, a
lightweight mask decoder) sits on top of two frozen encoders whose embeddings
are precomputed or produced on the fly. See README.md for the CLI and the
acceptance suite.
"""

__version__ = "0.1.0"
