"""Variational latent embeddings of an MDP family, with master Q-function, master policy and fast adaptation."""

__version__ = "0.1.0"
