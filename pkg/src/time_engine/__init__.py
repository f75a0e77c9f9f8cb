"""Tabular-image multimodal engine with a frozen in-context tabular encoder."""
