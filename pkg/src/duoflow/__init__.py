"""duoflow: desk-scale flow-matching text-to-image lab with a trainable
second-language K/V adapter branch over a frozen backbone."""

__version__ = "0.1.0"
