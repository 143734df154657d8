"""From-scratch numpy deep-learning stack for the hybrid autoencoder + residual
classifier skin-lesion pipeline."""

__version__ = "0.1.0"

CLASS_NAMES = ("akiec", "bcc", "bkl", "df", "mel", "nv", "vasc")
DEFAULT_SEED = 20240101
