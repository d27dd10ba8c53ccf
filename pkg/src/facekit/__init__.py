"""facekit: a from-scratch multi-task face toolkit.

Detection, 68-point landmark decoding, structural reparameterization of the
network graph, EPnP head-pose recovery, and an evaluation harness, all on
plain numpy tensors with an optional JIT fast path.
"""

__version__ = "0.1.0"
