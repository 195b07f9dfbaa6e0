"""Desk-scale BEV perception pipeline.

Radar pillar encoding, KAN-based depth estimation, BEV voxel pooling,
detection-head fusion, and nuScenes-style evaluation, built on numpy with
every numeric stage verified against independent oracles.
"""

__version__ = "0.1.0"
