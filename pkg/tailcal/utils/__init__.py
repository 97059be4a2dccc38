from .seeding import derive_rng
from .hashing import canonical_json, fingerprint

__all__ = [
    "derive_rng",
    "canonical_json",
    "fingerprint",
]
