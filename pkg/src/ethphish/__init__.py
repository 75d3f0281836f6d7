"""Phishing detection over Ethereum transaction logs.

Modules: ingest (log parsing/normalization), htamg (temporal multigraph),
features (handcrafted node features), numeric (autodiff), phishtgl (temporal
graph encoder), contrastive (self-supervised pretraining), gbdt (boosted
classifier), pipeline (evaluation harness), fundflow (taint tracing),
synthetic (planted-pattern ledgers), config and cli.
"""

__version__ = "0.1.0"
