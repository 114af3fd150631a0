"""Nearest-neighborhood deep clustering for adapting a source-trained
classifier to an unlabeled target domain without access to source data."""

__version__ = "0.1.0"
