"""Self-supervised learning over sets of object regions, OIC fine-tuning and late fusion."""

__version__ = "0.1.0"
