"""Desk-scale RNN-transducer toolkit with adaptive implicit-LM discounting."""

__version__ = "0.1.0"
