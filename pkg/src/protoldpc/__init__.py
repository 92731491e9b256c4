"""Protograph LDPC coding laboratory: lifting, classical and neural min-sum decoding, greedy training, T-EXIT."""

__version__ = "0.1.0"
