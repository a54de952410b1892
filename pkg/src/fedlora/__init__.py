"""Federated LoRA fine-tuning with alternating factor aggregation and client-level DP."""

__version__ = "0.1.0"
CONFIG_SCHEMA_VERSION = 1
