"""ECG-conditioned cine generation on a coupled ECG/cine phantom."""

__version__ = "0.1.0"
