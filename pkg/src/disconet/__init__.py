"""Collaborative BEV vehicle detection with a distilled, attention-weighted agent graph.

Pure numpy/scipy: a small reverse-mode autodiff core, a procedural multi-agent
LiDAR simulator, BEV encoder/decoder networks, per-cell graph attention fusion,
teacher-student distillation, a byte-counting broadcast channel and rotated-box
AP evaluation.
"""

__version__ = "0.1.0"
