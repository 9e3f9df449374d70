"""Offline evaluation metrics: hitrate against held-out behavior and a PVR proxy."""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Mapping

from ..model import RetrievalSet

logger = logging.getLogger(__name__)

BACKGROUND = "__background__"


def retrieved_items(sets: Iterable[RetrievalSet]) -> set[str]:
    """Union of item ids over one user's channels."""
    out: set[str] = set()
    for rs in sets:
        out.update(c.item_id for c in rs.items)
    return out


def hitrate(retrieved: Mapping[str, Iterable[str] | RetrievalSet], truth: Mapping[str, Iterable[str]],
            warnings: list | None = None) -> float:
    """Mean over users of hits / number retrieved.

    ``retrieved`` maps user -> item ids (or a RetrievalSet).  Users with empty
    truth are excluded and reported through ``warnings``; evaluated users with
    nothing retrieved contribute 0.
    """
    total = 0.0
    n = 0
    for user, truth_items in truth.items():
        truth_set = set(truth_items)
        if not truth_set:
            if warnings is not None:
                warnings.append(user)
            logger.debug("user %s has no ground truth; excluded", user)
            continue
        got = retrieved.get(user, ())
        if isinstance(got, RetrievalSet):
            got = got.item_ids()
        got = set(got)
        n += 1
        if got:
            total += len(got & truth_set) / len(got)
    return total / n if n else 0.0


def user_hitrate(retrieved: Iterable[str], truth_items: Iterable[str]) -> float:
    got = set(retrieved)
    if not got:
        return 0.0
    return len(got & set(truth_items)) / len(got)


def pvr_proxy(channels: Mapping[str, RetrievalSet], exposure_k: int,
              oracle: Callable[[list[str]], Iterable[float]],
              background: Iterable[str] = ()) -> dict[str, float]:
    """Share of the simulated exposure attributable to each channel.

    The union of channel items and ``background`` is scored by ``oracle`` (a
    stand-in for the downstream ranking model) and the top ``exposure_k`` are
    exposed.  An exposed item belongs to the channel that gave it the highest
    final_score (ties go to the smallest scenario id); items no channel
    supplied count as background.  Shares are over the exposed items, so they
    sum to 1 whenever anything was exposed.
    """
    if exposure_k < 1:
        raise ValueError("exposure_k must be >= 1")
    owner: dict[str, tuple[float, str]] = {}
    for sid in sorted(channels):
        for c in channels[sid].items:
            prev = owner.get(c.item_id)
            if prev is None or c.final_score > prev[0]:
                owner[c.item_id] = (c.final_score, sid)
    pool = list(owner)
    pool += [i for i in dict.fromkeys(background) if i not in owner]
    shares = {sid: 0.0 for sid in channels}
    shares[BACKGROUND] = 0.0
    if not pool:
        return shares
    scores = list(oracle(pool))
    ranked = sorted(range(len(pool)), key=lambda j: (-scores[j], pool[j]))
    exposed = ranked[:exposure_k]
    for j in exposed:
        item = pool[j]
        shares[owner[item][1] if item in owner else BACKGROUND] += 1
    return {sid: count / len(exposed) for sid, count in shares.items()}
