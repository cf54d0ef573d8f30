"""Federated-learning poisoning lab.

A small, deterministic federated simulator for text classification with a
suite of robust aggregation defenses and a graph-representation stealth
attack that crafts malicious updates from the structure of benign ones.
"""

from fedpoison import data, defense, grmp, model, sim  # noqa: F401

__version__ = "0.1.0"
