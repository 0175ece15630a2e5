"""Independent oracles for the codec tests.

Deliberately naive re-implementations written straight from the documented
algorithms, using explicit modular arithmetic instead of the package's
mask-and-shift style.  Nothing here imports cherisim, so a bug cannot be
shared with the code under test by construction.
"""


def oracle_bounds(address: int, b_field: int, t_field: int, exponent: int) -> tuple[int, int]:
    """Line-by-line interpretation of the bounds decompression recipe."""
    a_mid = (address // 2**exponent) % 512
    a_hi = 1 if a_mid < b_field else 0
    t_hi = 1 if t_field < b_field else 0
    c_b = 0 - a_hi
    c_t = t_hi - a_hi
    a_top = address // 2 ** (exponent + 9)
    base = ((a_top + c_b) * 512 + b_field) * 2**exponent % 2**32
    top = ((a_top + c_t) * 512 + t_field) * 2**exponent % 2**33
    return base, top


def oracle_corrections(address: int, b_field: int, t_field: int, exponent: int) -> tuple[int, int]:
    a_mid = (address // 2**exponent) % 512
    a_hi = 1 if a_mid < b_field else 0
    t_hi = 1 if t_field < b_field else 0
    return (0 - a_hi, t_hi - a_hi)


def oracle_min_superset(address: int, req_len: int, max_exp: int = 3):
    """Smallest representable region containing [address, address+req_len)
    among exponents 0..max_exp, or None if no such exponent can encode one.

    Any representable region at exponent e that contains the request also
    contains the aligned hull at e, and hulls grow with e, so the hull at
    the smallest workable exponent is the unique minimum.
    """
    req_top = address + req_len
    for e in range(max_exp + 1):
        gran = 2**e
        base_al = address // gran * gran
        top_al = (req_top + gran - 1) // gran * gran
        if (top_al - base_al) // gran > 511:
            continue
        b_field = base_al // gran % 512
        t_field = top_al // gran % 512
        if oracle_bounds(address, b_field, t_field, e) == (base_al, top_al):
            return (base_al, top_al, e)
    return None


# 64 boundary values for the 9-bit bound fields: both edges, the middle,
# and power-of-two neighbourhoods where the field comparisons flip.
BOUNDARY_9BIT = sorted(
    set(range(0, 16))
    | set(range(248, 264))
    | set(range(496, 512))
    | {31, 32, 33, 63, 64, 65, 127, 128, 129, 130, 191, 192, 193, 383, 384, 385}
)
assert len(BOUNDARY_9BIT) == 64

# 64 boundary addresses: zero, the top of the address space, and block-size
# neighbourhoods for every exponent's 2**(e+9) carry position.
BOUNDARY_ADDRS = sorted(
    {0, 1, 0xFFFFFFFE, 0xFFFFFFFF}
    | {v for k in range(9, 29) for v in (2**k - 1, 2**k, 2**k + 1)}
)
assert len(BOUNDARY_ADDRS) == 64
