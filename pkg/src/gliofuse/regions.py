"""Evaluation regions: the base labels plus the composites TC and WT."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .volume import LabelMap

# Column order of the result tables.
REPORT_REGIONS = ("ET", "NETC", "RC", "SNFH", "TC", "WT")

DEFAULT_COMPOSITES: dict[str, tuple[str, ...]] = {
    "TC": ("ET", "NETC"),
    "WT": ("ET", "NETC", "SNFH"),
}


def region_names(lm: LabelMap, composites: Mapping[str, Sequence[str]] | None = None) -> list[str]:
    comps = DEFAULT_COMPOSITES if composites is None else composites
    return [lm.encoding[c] for c in lm.codes] + list(comps)


def binarize(
    lm: LabelMap, region: str, composites: Mapping[str, Sequence[str]] | None = None
) -> np.ndarray:
    """Boolean mask of ``region`` (a base label name or a composite name)."""
    comps = DEFAULT_COMPOSITES if composites is None else composites
    codes = {name: code for code, name in lm.encoding.items()}
    if region in codes:
        return lm.data == codes[region]
    if region in comps:
        members = comps[region]
        missing = [m for m in members if m not in codes]
        if missing:
            raise KeyError(f"composite {region} refers to unknown labels {missing}")
        return np.isin(lm.data, [codes[m] for m in members])
    valid = ", ".join(region_names(lm, comps))
    raise KeyError(f"unknown region {region!r}; valid regions: {valid}")


def describe(encoding: Mapping[int, str], composites: Mapping[str, Sequence[str]] | None = None) -> str:
    comps = DEFAULT_COMPOSITES if composites is None else composites
    lines = [f"{name}: label == {code}" for code, name in sorted(encoding.items())]
    lines += [f"{name}: {' | '.join(members)}" for name, members in comps.items()]
    return "\n".join(lines)
