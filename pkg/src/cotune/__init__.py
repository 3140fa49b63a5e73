"""Desk-scale simulator for cloud-edge co-tuning of tiny language models.

Subpackages cover the full pipeline: numerics (autodiff), tokenizers, model
(tiny transformers with LoRA and domain adapters), alignment (cross-tokenizer
token maps), transfer (pooled-KL mutual learning losses), training loops,
data synthesis/partitioning, evaluation, and the federation round driver.
"""

__version__ = "0.1.0"
