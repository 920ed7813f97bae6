"""Dual-encoder template retrieval and listwise ranking for single-step
retrosynthesis, built on a pluggable synthetic string-rewrite engine.

Subpackage map:

- ``tokenizer``        shared character vocabulary, string -> padded id sequences
- ``encoder``          numpy transformer towers with reverse-mode gradients
- ``checkpoint``       binary container for named parameter arrays
- ``objectives``       contrastive, smoothed listwise, and KLD losses
- ``retrieval``        template bank, exact k-NN, candidate-set assembly
- ``trainer``          AdamW, schedules, EMA, the two training stages
- ``reaction_engine``  template application, canonical reactant keys
- ``curation``         synthetic corpus generation, validity staging, leakage removal
- ``evaluation``       reactant ranking and all reported metrics
- ``baseline``         closed-vocabulary classifier head for the long-tail comparison
- ``stability``        EMA drift bound and empirical drift measurement
- ``cli``              command-line driver for reproducible runs
"""

__version__ = "0.1.0"
