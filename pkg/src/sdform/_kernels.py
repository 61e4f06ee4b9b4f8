"""Hot elementwise kernels with a numba path and a pure-numpy path.

Set ``SDFORM_DISABLE_NUMBA=1`` to force the numpy implementations (numba is
also skipped automatically when it cannot be imported). Both paths return
bit-identical results; ``tests/test_kernels.py`` checks that.
"""
import math
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SDFORM_DISABLE_NUMBA", "0") not in ("1", "true", "yes")

__all__ = [
    "USE_NUMBA",
    "pow2_project",
    "shift_add_rebuild",
    "bucket_step",
    "huffman_decode",
]


# --------------------------------------------------------------------------
# nearest power of two
# --------------------------------------------------------------------------

def pow2_project_np(x, p_min, p_max):
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    mant, e = np.frexp(a)
    p = e.astype(np.int64) - 1  # a in [2^p, 2^(p+1))
    up = a > 1.5 * np.ldexp(1.0, p)  # exact midpoint ties go to the smaller magnitude
    p = p + up
    p = np.clip(p, p_min, p_max)
    zero = a <= math.ldexp(1.0, p_min - 1)
    sign = np.where(zero, 0, np.where(x < 0, -1, 1)).astype(np.int8)
    exp = np.where(zero, 0, p).astype(np.int8)
    return sign, exp


def _pow2_project_nb_impl(x, p_min, p_max, sign, exp):
    zero_cut = math.ldexp(1.0, p_min - 1)
    top = math.ldexp(1.0, p_max)
    for i in range(x.size):
        v = x[i]
        a = abs(v)
        if a <= zero_cut:
            sign[i] = 0
            exp[i] = 0
            continue
        if a >= top:
            p = p_max
        else:
            m, e = math.frexp(a)
            p = e - 1
            if a > 1.5 * math.ldexp(1.0, p):
                p += 1
            if p < p_min:
                p = p_min
        sign[i] = -1 if v < 0 else 1
        exp[i] = p


# --------------------------------------------------------------------------
# shift-and-add rebuild: out[g] = C[g] @ B[g] with C entries sign * 2^exp
# --------------------------------------------------------------------------

def shift_add_rebuild_np(sign, exp, basis):
    G, m, r = sign.shape
    n = basis.shape[2]
    out = np.zeros((G, m, n), dtype=np.float64)
    for k in range(r):
        s = sign[:, :, k, None]
        term = np.ldexp(basis[:, None, k, :], exp[:, :, k, None].astype(np.int32))
        term = np.where(s < 0, -term, term)
        out = np.where(s != 0, out + term, out)
    return out


def _shift_add_rebuild_nb_impl(sign, exp, basis, out):
    G, m, r = sign.shape
    n = basis.shape[2]
    for g in range(G):
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for k in range(r):
                    s = sign[g, i, k]
                    if s == 0:
                        continue
                    t = math.ldexp(basis[g, k, j], exp[g, i, k])
                    if s < 0:
                        acc -= t
                    else:
                        acc += t
                out[g, i, j] = acc


# --------------------------------------------------------------------------
# bucket switch update (flat arrays, in place)
# --------------------------------------------------------------------------

def bucket_step_np(sign, exp, counter, parked, frozen, grad,
                   theta_g, theta_c, p_min, p_max, direction):
    g = np.asarray(grad, dtype=np.float64)
    signal = np.where(np.abs(g) < theta_g, 0, np.sign(g)).astype(np.int64) * direction
    signal[frozen] = 0
    active = signal != 0
    c = np.clip(counter.astype(np.int64) + signal, -theta_c, theta_c)
    c = np.where(active, c, counter)
    up = active & (c == theta_c)
    down = active & (c == -theta_c)
    c[up | down] = 0

    nz = sign != 0
    # magnitude up on live entries, saturating at p_max
    grow = up & nz
    exp[grow] = np.minimum(exp[grow].astype(np.int64) + 1, p_max)
    # revive parked zeros at p_min with their remembered sign
    revive = up & ~nz & (parked != 0)
    sign[revive] = parked[revive]
    exp[revive] = p_min
    parked[revive] = 0
    # magnitude down; below p_min the entry parks at zero
    shrink = down & nz
    park = shrink & (exp == p_min)
    step = shrink & ~park
    exp[step] = exp[step] - 1
    parked[park] = sign[park]
    sign[park] = 0
    exp[park] = 0
    counter[:] = c


def _bucket_step_nb_impl(sign, exp, counter, parked, frozen, grad,
                         theta_g, theta_c, p_min, p_max, direction):
    for i in range(sign.size):
        if frozen[i]:
            continue
        gi = grad[i]
        if not (abs(gi) >= theta_g) or gi == 0.0:
            continue
        s = direction if gi > 0 else -direction
        c = counter[i] + s
        if c > theta_c:
            c = theta_c
        elif c < -theta_c:
            c = -theta_c
        if c == theta_c:
            c = 0
            if sign[i] != 0:
                if exp[i] < p_max:
                    exp[i] += 1
            elif parked[i] != 0:
                sign[i] = parked[i]
                exp[i] = p_min
                parked[i] = 0
        elif c == -theta_c:
            c = 0
            if sign[i] != 0:
                if exp[i] == p_min:
                    parked[i] = sign[i]
                    sign[i] = 0
                    exp[i] = 0
                else:
                    exp[i] -= 1
        counter[i] = c


# --------------------------------------------------------------------------
# canonical Huffman decode
# --------------------------------------------------------------------------

def huffman_decode_np(payload, nbits, count, first_code, len_count, first_index, ordered):
    """Return (symbols, bits consumed); consumed == -1 when the stream runs dry."""
    out = np.empty(count, dtype=np.int64)
    max_len = len(len_count) - 1
    pos = 0
    for k in range(count):
        code = 0
        length = 0
        while True:
            if pos >= nbits or length >= max_len:
                return out[:k], -1
            bit = (payload[pos >> 3] >> (7 - (pos & 7))) & 1
            pos += 1
            code = (code << 1) | int(bit)
            length += 1
            off = code - first_code[length]
            if 0 <= off < len_count[length]:
                out[k] = ordered[first_index[length] + off]
                break
    return out, pos


def _huffman_decode_nb_impl(payload, nbits, count, first_code, len_count, first_index, ordered, out):
    max_len = len_count.shape[0] - 1
    pos = 0
    for k in range(count):
        code = 0
        length = 0
        while True:
            if pos >= nbits or length >= max_len:
                return k, -1
            bit = (payload[pos >> 3] >> (7 - (pos & 7))) & 1
            pos += 1
            code = (code << 1) | bit
            length += 1
            off = code - first_code[length]
            if off >= 0 and off < len_count[length]:
                out[k] = ordered[first_index[length] + off]
                break
    return count, pos


if HAVE_NUMBA:
    _pow2_project_nb = njit(cache=True)(_pow2_project_nb_impl)
    _shift_add_rebuild_nb = njit(cache=True)(_shift_add_rebuild_nb_impl)
    _bucket_step_nb = njit(cache=True)(_bucket_step_nb_impl)
    _huffman_decode_nb = njit(cache=True)(_huffman_decode_nb_impl)


def pow2_project_nb(x, p_min, p_max):
    x = np.ascontiguousarray(x, dtype=np.float64)
    sign = np.empty(x.shape, dtype=np.int8)
    exp = np.empty(x.shape, dtype=np.int8)
    _pow2_project_nb(x.ravel(), int(p_min), int(p_max), sign.reshape(-1), exp.reshape(-1))
    return sign, exp


def shift_add_rebuild_nb(sign, exp, basis):
    sign = np.ascontiguousarray(sign, dtype=np.int8)
    exp = np.ascontiguousarray(exp, dtype=np.int8)
    basis = np.ascontiguousarray(basis, dtype=np.float64)
    out = np.empty((sign.shape[0], sign.shape[1], basis.shape[2]), dtype=np.float64)
    _shift_add_rebuild_nb(sign, exp, basis, out)
    return out


def bucket_step_nb(sign, exp, counter, parked, frozen, grad,
                   theta_g, theta_c, p_min, p_max, direction):
    _bucket_step_nb(sign, exp, counter, parked, frozen,
                    np.ascontiguousarray(grad, dtype=np.float64),
                    float(theta_g), int(theta_c), int(p_min), int(p_max), int(direction))


def huffman_decode_nb(payload, nbits, count, first_code, len_count, first_index, ordered):
    out = np.empty(count, dtype=np.int64)
    k, pos = _huffman_decode_nb(np.asarray(payload, dtype=np.uint8), int(nbits), int(count),
                                first_code, len_count, first_index, ordered, out)
    return out[:k], pos


def pow2_project(x, p_min, p_max):
    """Nearest element of {0, +-2^p : p_min <= p <= p_max} as (sign, exponent) int8 grids."""
    if USE_NUMBA:
        return pow2_project_nb(x, p_min, p_max)
    return pow2_project_np(x, p_min, p_max)


def shift_add_rebuild(sign, exp, basis):
    """Batched C @ B where C holds signed powers of two; shapes (G,m,r), (G,r,n)."""
    if USE_NUMBA:
        return shift_add_rebuild_nb(sign, exp, basis)
    return shift_add_rebuild_np(sign, exp, basis)


def bucket_step(sign, exp, counter, parked, frozen, grad,
                theta_g, theta_c, p_min, p_max, direction):
    """In-place bucket switch over flat int8 state arrays."""
    if USE_NUMBA:
        return bucket_step_nb(sign, exp, counter, parked, frozen, grad,
                              theta_g, theta_c, p_min, p_max, direction)
    return bucket_step_np(sign, exp, counter, parked, frozen, grad,
                          theta_g, theta_c, p_min, p_max, direction)


def huffman_decode(payload, nbits, count, first_code, len_count, first_index, ordered):
    if USE_NUMBA:
        return huffman_decode_nb(payload, nbits, count, first_code, len_count, first_index, ordered)
    return huffman_decode_np(payload, nbits, count, first_code, len_count, first_index, ordered)
