"""
MESM moment retrieval
Modal-enhanced semantic modeling for video moment retrieval on pre-extracted features
"""

__version__ = "0.1.0"
