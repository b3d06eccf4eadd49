"""Toy proof-of-work ledger, sharded verification and an episodic-memory chain."""

from .hashing import Digest, hash_bytes, sparse_separate
from .ledger import Block, Chain, Transaction, verify_chain

__version__ = "0.1.0"

__all__ = ["Block", "Chain", "Digest", "Transaction", "hash_bytes", "sparse_separate",
           "verify_chain"]
