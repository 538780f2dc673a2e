"""Counter-based random streams for reproducible path simulation.

Every normal increment is a pure function of (seed, path index, step index),
so simulations are bit-identical no matter how paths are batched or scheduled.
The generator is a SplitMix64 finalizer applied to a per-path key XOR'd with
the step counter; uniforms feed a Box-Muller pair.
"""

import math

import numpy as np
from numba import njit, uint64

_GOLDEN = uint64(0x9E3779B97F4A7C15)
_MIX1 = uint64(0xBF58476D1CE4E5B9)
_MIX2 = uint64(0x94D049BB133111EB)
_PATH_SALT = uint64(0xD6E8FEB86659FD93)
_INV_2_53 = 1.0 / 9007199254740992.0  # 2**-53
_TWO_PI = 2.0 * math.pi


@njit(cache=True, inline="always")
def mix64(x):
    z = uint64(x) + _GOLDEN
    z = (z ^ (z >> uint64(30))) * _MIX1
    z = (z ^ (z >> uint64(27))) * _MIX2
    return z ^ (z >> uint64(31))


@njit(cache=True, inline="always")
def path_key(seed, path_index):
    # two finalizer rounds decorrelate adjacent (seed, path) pairs
    return mix64(mix64(uint64(seed)) ^ (uint64(path_index) * _PATH_SALT))


@njit(cache=True, inline="always")
def uniform_at(key, counter):
    # uniform on (0, 1): the +0.5 keeps it away from both endpoints
    bits = mix64(key ^ uint64(counter))
    return (float(bits >> uint64(11)) + 0.5) * _INV_2_53


@njit(cache=True, inline="always")
def normal_pair(key, counter):
    """Two standard normals for step counters (counter, counter + 1)."""
    u1 = uniform_at(key, uint64(counter))
    u2 = uniform_at(key, uint64(counter) + uint64(1))
    rad = math.sqrt(-2.0 * math.log(u1))
    ang = _TWO_PI * u2
    return rad * math.cos(ang), rad * math.sin(ang)


def normals(seed, path_index, n):
    """Array of the n normals that the path kernels would consume (for tests)."""
    key = path_key(seed, path_index)
    out = np.empty(n)
    for k in range(0, n, 2):
        z0, z1 = normal_pair(key, k)
        out[k] = z0
        if k + 1 < n:
            out[k + 1] = z1
    return out
