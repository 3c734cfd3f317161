"""Desk-scale discrete-token speech synthesis.

A small causal language model is extended with a speech-token vocabulary,
specialized into low-rank-adapter experts (speech synthesis, text QA,
speech QA), and fused by a learned router; a semantic/acoustic tokenizer
pair and a reused decoder turn generated tokens back into audio.
"""

__version__ = "0.1.0"
