"""Dual chain-of-thought distillation toolkit.

Builds dual (correct/wrong) reasoning datasets against a teacher endpoint
or offline fixtures, locates the divergent key steps between paired
chains of thought with a minimum-edit-distance alignment, and trains a
small built-in autoregressive model in two stages: supervised fine-tuning
on correct chains, then key-reasoning-step learning on the dual pairs.
"""

__version__ = "0.1.0"
