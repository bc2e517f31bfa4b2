"""Stable 64-bit FNV-1a hashing for features, partitioning, and seed derivation."""

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def fnv1a64_str(s: str) -> int:
    return fnv1a64(s.encode("utf-8"))


def derive_seed(*parts) -> int:
    """Deterministic child seed from arbitrary string/int parts.

    Used everywhere a per-example or per-subtask seed is needed so that
    concurrency and iteration order never change outputs.
    """
    return fnv1a64("\x1f".join(str(p) for p in parts).encode("utf-8"))
