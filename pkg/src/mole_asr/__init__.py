"""Desk-scale multilingual speech recognition finetuning toolkit.

Per-language low-rank adapters on a frozen miniature encoder-decoder
transformer, softmax-weighted adapter fusion with a learned router, and
layer-wise distillation of the expert set into one multilingual adapter.
"""

__version__ = "0.1.0"
