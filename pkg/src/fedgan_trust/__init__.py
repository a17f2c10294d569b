"""Federated GAN training for a consortium of registries, coordinated through a
simulated permissioned ledger with Paillier-encrypted averaging and
Shamir-shared decryption keys."""

__version__ = "0.1.0"
