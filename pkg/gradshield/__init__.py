"""
gradshield - selective gradient encryption privacy lab for federated learning
"""

__version__ = "0.3.0"
