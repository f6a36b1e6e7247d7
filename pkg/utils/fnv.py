FNV64_OFFSET_BASIS = 0xcbf29ce484222325
FNV64_PRIME = 0x100000001b3
_MASK64 = 0xffffffffffffffff


def fnv1a_64(data: bytes) -> int:
    """
    FNV-1a 64-bit hash of a byte string.
    Used for record digests, op-log frame checks and shard routing, so the
    result must stay bit-exact.
    """
    h = FNV64_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def fnv1a_64_hex(data: bytes) -> str:
    return f"{fnv1a_64(data):016x}"
