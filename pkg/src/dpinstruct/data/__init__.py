"""Shipped registries and few-shot fixtures."""
