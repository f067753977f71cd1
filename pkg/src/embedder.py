import hashlib
from typing import NamedTuple

import numpy as np


class HashedBagEmbedder(NamedTuple):
    """
    Hashed bag-of-tokens text embedder.

    Whitespace tokens (lower-cased) are hashed into ``dim`` buckets with a
    stable digest, counted and l2-normalized. Empty text maps to zeros.

    Attributes:
        dim (int): Number of hash buckets (output dimension).
    """

    dim: int

    def bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dim

    def embed(self, text: str) -> np.ndarray:
        counts = np.zeros(self.dim)
        for token in text.lower().split():
            counts[self.bucket(token)] += 1.0
        norm = np.linalg.norm(counts)
        return counts / norm if norm > 0.0 else counts
