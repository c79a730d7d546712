"""Hierarchical situational-graph SLAM back end with a synthetic multi-floor simulator."""

__version__ = "0.1.0"
