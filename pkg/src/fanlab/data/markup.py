"""The 68-point markup: mirror pairs and named subsets."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError

# (left-of-image index, right-of-image index); unlisted indices are on the midline.
FLIP_PAIRS_68 = (
    [(i, 16 - i) for i in range(8)]                                     # jaw
    + [(17, 26), (18, 25), (19, 24), (20, 23), (21, 22)]                # brows
    + [(31, 35), (32, 34)]                                              # nostrils
    + [(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)]      # eyes
    + [(48, 54), (49, 53), (50, 52), (55, 59), (56, 58)]                # outer lip
    + [(60, 64), (61, 63), (65, 67)]                                    # inner lip
)


def _perm_from_pairs(n, pairs) -> np.ndarray:
    perm = np.arange(n)
    for a, b in pairs:
        perm[a], perm[b] = b, a
    return perm


FLIP_PERM_68 = _perm_from_pairs(68, FLIP_PAIRS_68)

# Outer eye corners, nose tip, mouth corners.
SUBSETS = {
    68: np.arange(68),
    5: np.array([36, 45, 30, 48, 54]),
}


def subset_indices(n: int) -> np.ndarray:
    try:
        return SUBSETS[n]
    except KeyError:
        raise ConfigurationError(f"no landmark subset with {n} points (have {sorted(SUBSETS)})") from None


def flip_permutation(n: int) -> np.ndarray:
    """Index permutation that relabels landmarks after a horizontal flip."""
    idx = subset_indices(n)
    where = {int(v): i for i, v in enumerate(idx)}
    try:
        return np.array([where[int(FLIP_PERM_68[v])] for v in idx])
    except KeyError:
        raise ConfigurationError(f"{n}-point subset is not closed under flipping") from None
