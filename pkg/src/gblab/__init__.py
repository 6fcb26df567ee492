"""Desk-scale laboratory for backdoor attacks on graph pre-training.

Subpackages cover the full pipeline: a minimal reverse-mode autodiff engine
(`autodiff`), graph data and generators (`graphcore`), the frozen GCN encoder
and its self-supervised pre-training (`encoder`), farthest-point prototype
selection (`prototypes`), the node-adaptive trigger generator and attack
training loop (`trigger`), mixup-based parameter-sensitivity anchoring
(`persistence`), the attack evaluation harness (`evaluation`), and the
experiment driver (`pipeline`, `cli`).
"""

__version__ = "0.1.0"
