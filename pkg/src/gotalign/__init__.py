"""Graph-optimal-transport alignment of paired patch/token features.

Library + CLI for weakly-supervised local alignment: entropic optimal
transport and graph matching over dynamic feature graphs, multi-view
redundancy-reduction losses, and a toy dual encoder with gated
cross-attention fusion, trained end to end on synthetic paired data.
"""

__version__ = "0.1.0"
