"""Temporal-aware lung nodule detection on CT volumes.

Slices of a CT volume are processed like frames of a video: a windowed
attention encoder and a convolutional encoder are fused per slice, and a
convolutional GRU at the bottleneck carries context from slice to slice.
"""

__version__ = "0.1.0"
