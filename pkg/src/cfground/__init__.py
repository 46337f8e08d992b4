"""Counterfactual evidence-grounding toolkit: instance construction, output parsing,
composite rewards and a small GRPO trainer."""

__version__ = "0.1.0"
