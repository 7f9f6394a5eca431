"""Counter-based random numbers and hashing.

Every random draw is a pure function of ``(seed, pixel, bounce, stream)`` so a
pixel sees the same sample sequence no matter which rank evaluates it.
Integers are carried in int64 and masked to 32 bits; that keeps the jitted and
the plain-Python paths bit-identical.
"""

from numba import njit

MASK32 = 0xFFFFFFFF

# golden-ratio and murmur-style odd constants; changing any of them changes
# every image and every forwarding decision
_K_SEED = 0x9E3779B9
_K_PIXEL = 0x85EBCA77
_K_BOUNCE = 0xC2B2AE3D
_K_STREAM = 0x27D4EB2F
_K_HOP = 0x165667B1


@njit(cache=True, nogil=True)
def fmix32(h):
    """Murmur3 32-bit finalizer."""
    h = h & MASK32
    h ^= h >> 16
    h = (h * 0x85EBCA6B) & MASK32
    h ^= h >> 13
    h = (h * 0xC2B2AE35) & MASK32
    h ^= h >> 16
    return h


@njit(cache=True, nogil=True)
def hash4(a, b, c, d):
    h = fmix32((a & MASK32) ^ _K_SEED)
    h = fmix32(h ^ ((b * _K_PIXEL) & MASK32))
    h = fmix32(h ^ ((c * _K_BOUNCE) & MASK32))
    h = fmix32(h ^ ((d * _K_STREAM) & MASK32))
    return h


@njit(cache=True, nogil=True)
def uniform(seed, pixel, bounce, stream):
    """Uniform float in [0, 1) with 24 bits of resolution."""
    return (hash4(seed, pixel, bounce, stream) >> 8) * (1.0 / 16777216.0)


@njit(cache=True, nogil=True)
def pick_seed(pixel, bounce, hops):
    """Seed for pseudo-random rank picks.

    ``hops`` is the popcount of the visited mask, which replay can reconstruct
    without knowing anything else about the ray's history.
    """
    h = fmix32((pixel & MASK32) ^ _K_PIXEL)
    h = fmix32(h ^ ((bounce * _K_BOUNCE) & MASK32))
    h = fmix32(h ^ ((hops * _K_HOP) & MASK32))
    return h


@njit(cache=True, nogil=True)
def sample_seed(frame_seed, sample):
    """Derive the per-sample seed for sample ``sample`` of a frame."""
    return fmix32(fmix32((frame_seed & MASK32) ^ _K_STREAM) ^ ((sample * _K_SEED) & MASK32))


# stream ids used by the shading code
STREAM_JITTER_X = 0
STREAM_JITTER_Y = 1
STREAM_ROULETTE = 2
STREAM_BSDF_U = 3
STREAM_BSDF_V = 4
STREAM_LIGHT_U = 6
STREAM_LIGHT_V = 7
STREAM_RESERVOIR = 16  # + light index
