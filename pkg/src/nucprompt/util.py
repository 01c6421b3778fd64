import zlib

import torch


def derive_seed(seed: int, name: str) -> int:
    return (int(seed) * 1_000_003 + zlib.crc32(name.encode())) % (2**63)


def seeded(seed: int, name: str, factory, dtype=torch.float32):
    """Construct ``factory()`` under a private RNG stream keyed by ``(seed, name)``.

    Parameters of one submodule then do not depend on which other submodules
    were built before it, so ablated models share their common weights.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, name))
        module = factory()
    return module.to(dtype)
