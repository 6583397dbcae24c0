"""Deterministic seed derivation shared by every randomized stage.

All randomness in the engine flows from one master seed through this
function, never through Python's salted ``hash()``, so runs reproduce
across processes, platforms, and worker counts.
"""

import hashlib


def derive_seed(*parts) -> int:
    """Fold parts into a u64 via sha256 of their joined string forms."""
    text = ":".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")
