"""Binary-corpus curation toolkit.

Operates on disassembly exports: ingestion and validation, opcode-category
feature extraction with call-graph propagation, near-duplicate sample
collapse under a hybrid similarity metric, cross-sample function reuse
clustering, threat-actor alias normalization, and dataset quality-control
statistics.
"""

__version__ = "0.1.0"
