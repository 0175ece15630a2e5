"""cherisim: an executable capability-machine model, a cycle-timed micro
model of its pipeline, and a differential checking harness that runs the
two side by side."""

__version__ = "0.1.0"

from .capability import (
    Capability,
    PermissionSet,
    Bounds,
    Corrections,
    ExceptionCause,
    NULL_CAP,
    bounds_of,
    corrections_of,
    is_representable,
    set_address,
    set_bounds,
    and_perms,
    seal,
    unseal,
    check_access,
    to_bits,
    from_bits,
    is_mem_wellformed,
    cap_stricter_than,
    perms_decode,
    perms_encode,
)

__all__ = [
    "Capability",
    "PermissionSet",
    "Bounds",
    "Corrections",
    "ExceptionCause",
    "NULL_CAP",
    "bounds_of",
    "corrections_of",
    "is_representable",
    "set_address",
    "set_bounds",
    "and_perms",
    "seal",
    "unseal",
    "check_access",
    "to_bits",
    "from_bits",
    "is_mem_wellformed",
    "cap_stricter_than",
    "perms_decode",
    "perms_encode",
]
