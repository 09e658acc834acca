"""Named sub-seed derivation and canonical JSON helpers."""
import hashlib
import json

import numpy as np


def derive_seed(*keys):
    """Map a tuple of ints/strings to a 64-bit seed, stable across runs and platforms."""
    words = []
    for key in keys:
        if isinstance(key, str):
            digest = hashlib.sha256(key.encode("utf-8")).digest()
            words.extend(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))
        else:
            key = int(key)
            if key < 0:
                raise ValueError(f"seed keys must be nonnegative, got {key}")
            words.extend([key & 0xFFFFFFFF, (key >> 32) & 0xFFFFFFFF])
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def rng(*keys):
    return np.random.default_rng(np.random.SeedSequence([derive_seed(*keys)]))


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_digest(obj):
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()
