"""Link prediction with a pretrained two-branch mixture of experts.

A node branch scores pairs from hop-aggregated features, an edge branch from
structural distance counts; a frozen bank of both is adapted to a new graph
by a linear map over expert logits.
"""

__version__ = "0.1.0"
