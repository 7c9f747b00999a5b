"""
MTDnet: multi-task deep metric learning for person re-identification.
"""

__version__ = "1.0.0"
