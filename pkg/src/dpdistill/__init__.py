"""Differentially private knowledge distillation via synthetic text.

A private teacher is trained with DP-SGD on control-code-prefixed text, a
synthetic corpus is sampled from it conditioned on subsampled control codes,
and a smaller student is distilled from teacher and synthetic text without
touching the private data again. The privacy ledger covers the teacher
phase only; everything downstream is post-processing.
"""

__version__ = "0.1.0"
