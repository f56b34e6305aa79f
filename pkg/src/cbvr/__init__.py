"""Content-based video retrieval: encoders, compressed indexes, event
classifiers, late fusion, reranking and text-to-concept search."""

__version__ = "0.1.0"
