"""Audio-visual speech recognition with cross-modal attention (AV Align),
a dual-attention baseline (AV Cat), a synthetic corpus and diagnostics."""

__version__ = "0.1.0"
