"""Conversational recommendation engine with KG entity modeling and dialogue augmentation."""

__version__ = "0.1.0"
