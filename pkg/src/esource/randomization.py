"""Permuted-block randomization, stratified per practice.

Blocks of four, two of each arm, shuffled by a generator seeded from the
study seed, the practice id and the block index. The whole sequence is a pure
function of (study_seed, practice_id): any prefix can be recomputed, which is
what the determinism and balance tests lean on. 1:1 allocation with this
block size bounds any prefix imbalance at 2.
"""

from __future__ import annotations

import random

BLOCK_SIZE = 4
ARMS = ("T", "C")
_BLOCK_TEMPLATE = ("T", "T", "C", "C")


def block_for(study_seed: int | str, practice_id: str, block_index: int) -> tuple[str, ...]:
    rng = random.Random(f"{study_seed}:randomization:{practice_id}:{block_index}")
    block = list(_BLOCK_TEMPLATE)
    rng.shuffle(block)
    return tuple(block)


def arm_for_slot(study_seed: int | str, practice_id: str, slot_index: int) -> str:
    """Arm for the 1-based slot in this practice's assignment sequence."""
    if slot_index < 1:
        raise ValueError(f"slot index is 1-based, got {slot_index}")
    block_index, offset = divmod(slot_index - 1, BLOCK_SIZE)
    return block_for(study_seed, practice_id, block_index)[offset]


def sequence_prefix(study_seed: int | str, practice_id: str, length: int) -> list[str]:
    return [arm_for_slot(study_seed, practice_id, i + 1) for i in range(length)]
