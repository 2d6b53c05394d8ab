from .data import BOS, EOS, PAD, UNK
__version__ = "0.1.0"
