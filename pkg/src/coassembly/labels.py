"""The intention library: reach-block labels R_1..R_12 plus Idle."""
from __future__ import annotations

IDLE = "Idle"
NUM_BLOCKS = 12

ALL_LABELS = tuple(f"R_{i}" for i in range(1, NUM_BLOCKS + 1)) + (IDLE,)
NUM_LABELS = len(ALL_LABELS)

_INDEX = {label: i for i, label in enumerate(ALL_LABELS)}


def reach_label(block: int) -> str:
    if not 1 <= block <= NUM_BLOCKS:
        raise ValueError(f"block id {block} outside 1..{NUM_BLOCKS}")
    return f"R_{block}"


def block_of(label: str) -> int | None:
    """Block id for a reach label, None for Idle."""
    if label == IDLE:
        return None
    return int(label.split("_", 1)[1])


def label_index(label: str) -> int:
    return _INDEX[label]


def label_from_index(index: int) -> str:
    return ALL_LABELS[index]
