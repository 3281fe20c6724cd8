"""Group-connected MLP networks: learned sparse feature groups, group-wise
dense layers, tree pooling, and the training/analysis tooling around them."""

__version__ = "0.1.0"
