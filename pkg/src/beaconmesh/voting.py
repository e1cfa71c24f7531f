"""Confidence-weighted majority vote over chain answers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

from .execution import ChainResult, normalize_answer


class NoSurvivingChains(Exception):
    pass


@dataclass(frozen=True)
class Verdict:
    answer: str
    total_weight: float
    per_answer_weights: dict[str, float]
    contributing_chains: tuple[int, ...]

    def to_json(self) -> dict:
        return {
            "answer": self.answer,
            "total_weight": self.total_weight,
            "per_answer_weights": dict(self.per_answer_weights),
            "contributing_chains": list(self.contributing_chains),
        }


def _tally(candidates: list[ChainResult], weighted: bool):
    groups: dict[str, list[ChainResult]] = {}
    for c in candidates:
        groups.setdefault(normalize_answer(c.final_answer), []).append(c)
    weights = {
        a: math.fsum(c.confidence if weighted else 1.0 for c in members) for a, members in groups.items()
    }
    return groups, weights


def vote(candidates: Iterable[ChainResult], weighted: bool = True) -> Verdict:
    """Pick the answer with the largest summed weight.

    Ties go to the group holding the single most confident chain, then to
    the lexicographically smaller normalized answer. Groups are ranked on
    exact rational sums, since two different sums can round to one float;
    the reported weights are the correctly rounded ``fsum`` values.
    """
    candidates = list(candidates)
    if not candidates:
        raise NoSurvivingChains("no chain survived to the vote")
    groups, weights = _tally(candidates, weighted)

    exact = {a: sum(Fraction(c.confidence) if weighted else 1 for c in members) for a, members in groups.items()}

    def key(answer: str):
        return (-exact[answer], -max(c.confidence for c in groups[answer]), answer)

    winner = min(groups, key=key)
    return Verdict(
        answer=winner,
        total_weight=weights[winner],
        per_answer_weights=dict(sorted(weights.items())),
        contributing_chains=tuple(sorted(c.chain_id for c in groups[winner])),
    )


def vote_unweighted(candidates: Iterable[ChainResult]) -> Verdict:
    """Plain majority vote: every chain counts 1; ties broken as in :func:`vote`."""
    return vote(candidates, weighted=False)
