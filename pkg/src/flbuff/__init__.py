"""Desk-scale federated-learning simulator with a buffer-layer backdoor defense.

Subpackages:
    nn           -- MLP classifiers with manual backprop, flat param vectors
    data         -- dataset loading/generation and six client partitioners
    attacks      -- backdoor attacks (badnets, dba, scaling, alie, adaptive)
    defense      -- PLR extraction, contrastive encoder, MMD trust scoring
    orchestrator -- FL round loop, shadow collection, metric evaluation
    cli          -- `flbuff run|sweep|shadow` experiment runner
"""

__version__ = "0.1.0"
