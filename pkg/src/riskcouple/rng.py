"""Counter-based Brownian increments.

Every normal draw is addressed by ``(path, agent, step)``: path ``p`` owns a
contiguous run of Philox counter blocks, and inside that run agent ``a`` and
step ``k`` sit at offset ``a * n_steps + k``.  Draws for a range of paths can
therefore be produced in any order or chunking and always agree.
"""

import zlib

import numpy as np
from scipy.special import ndtri

_M64 = (1 << 64) - 1
_WORDS_PER_BLOCK = 4


def _check_seed(seed):
    seed = int(seed)
    if seed < 0 or seed > _M64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def standard_normals(seed, first_path, n_paths, per_path):
    """Standard normals of shape ``(n_paths, per_path)`` for paths
    ``first_path .. first_path + n_paths - 1``."""
    seed = _check_seed(seed)
    blocks = -(-per_path // _WORDS_PER_BLOCK)
    bit_gen = np.random.Philox(key=seed, counter=first_path * blocks)
    raw = bit_gen.random_raw(n_paths * blocks * _WORDS_PER_BLOCK)
    raw = raw.reshape(n_paths, blocks * _WORDS_PER_BLOCK)[:, :per_path]
    # 53-bit uniform on the open interval (0, 1)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def brownian_increments(seed, n_paths, n_agents, n_steps, dt, first_path=0,
                        shared_agents=False):
    """Brownian increments with shape ``(n_paths, n_agents, n_steps)``.

    ``shared_agents`` copies agent 0's stream to every agent (test hook for
    exactly symmetric ensembles).
    """
    width = 1 if shared_agents else n_agents
    z = standard_normals(seed, first_path, n_paths, width * n_steps)
    z = z.reshape(n_paths, width, n_steps) * np.sqrt(dt)
    if shared_agents:
        z = np.repeat(z, n_agents, axis=1)
    return z


def derive_seed(seed, *tags):
    """Child seed for a labelled sub-experiment (e.g. ``("true", N)``).

    Tags may be ints or strings; the mapping is fixed, so derived seeds are
    reproducible across runs and platforms.
    """
    key = []
    for tag in tags:
        if isinstance(tag, str):
            key.append(zlib.crc32(tag.encode()))
        else:
            key.append(int(tag) & 0xFFFFFFFF)
    ss = np.random.SeedSequence(entropy=_check_seed(seed), spawn_key=tuple(key))
    return int(ss.generate_state(1, np.uint64)[0])
