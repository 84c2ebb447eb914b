"""Multi-view 3D scene understanding on procedural desk-scale scenes.

Trains per-pixel semantic, instance and articulation heads over procedural
backbone features using teacher distillation, confidence-weighted
multi-view consistency, contrastive grouping and focal/L2 articulation
supervision, then fuses, clusters and evaluates directly in 3D.
"""

__version__ = "0.1.0"
