"""Hierarchical windowed-attention audio transformer with a token-semantic head."""
