"""Automatic point prompts for nucleus instance segmentation.

Proposals on a stride-4 grid are shifted toward nuclei by a learned offset
field, refined to points, and classified with class-knowledge queries. The
surviving prompts drive a point-to-instance segmenter, and the metrics module
scores the result.
"""

__version__ = "0.1.0"
