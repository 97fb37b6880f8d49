"""Toolkit for classifying substance involvement in overdose deaths from
free-text cause-of-death statements.

Four model families (per-substance binary classifiers, native multi-label
ensembles, fine-tuned bidirectional encoders, and generative models behind a
text-generation client) share one corpus pipeline and one evaluation harness.
"""

__version__ = "0.1.0"
