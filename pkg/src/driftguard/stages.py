"""AASM sleep stage encoding.

The integer values are part of the public contract: the causal median filter
orders stages by these indices and every CSV/JSON artifact stores them.
"""

from __future__ import annotations

import enum

N_STAGES = 5


class StageLabel(enum.IntEnum):
    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4


class _ExcludedType:
    """Sentinel for epochs that carry no scorable stage (movement, unknown, gaps)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "Excluded"

    def __reduce__(self):
        return (_ExcludedType, ())


Excluded = _ExcludedType()

# Integer code used for Excluded in label arrays and files.
EXCLUDED_CODE = -1

STAGE_NAMES = tuple(s.name for s in StageLabel)


def to_code(label) -> int:
    return EXCLUDED_CODE if label is Excluded else int(label)


def from_code(code: int):
    return Excluded if code == EXCLUDED_CODE else StageLabel(code)
