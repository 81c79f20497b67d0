"""Paired-comparison scoring of perturbation visibility (Case V model).

Respondents see an original/protected pair and answer which image is
perturbed (or "same"). Detection rates map to Z-scores through the inverse
normal CDF under the unit-variance assumption; rates are clamped away from
0 and 1 so the score stays finite.
"""

import warnings
from collections import defaultdict
from dataclasses import dataclass
from statistics import NormalDist, stdev


@dataclass(frozen=True)
class Judgement:
    pair_id: str
    budget: float
    respondent_id: str
    choice: str  # "A", "B", or "same"
    truth: str  # "A" or "B"

    def __post_init__(self):
        if self.choice not in ("A", "B", "same"):
            raise ValueError(f"choice must be A, B, or same, got {self.choice!r}")
        if self.truth not in ("A", "B"):
            raise ValueError(f"ground truth must be A or B, got {self.truth!r}")

    @property
    def correct(self) -> bool:
        return self.choice == self.truth


def _z_from_rate(rate: float, n: int) -> float:
    eps = 1.0 / (2.0 * n)
    lo, hi = 1.0 / n + eps, 1.0 - eps
    clamped = min(max(rate, lo), hi)
    if clamped != rate:
        warnings.warn(f"detection rate {rate:.4f} clamped to {clamped:.4f}")
    return NormalDist().inv_cdf(clamped)


def thurstone_case_v(table) -> dict:
    """Per-budget error rate, Z-score, and across-respondent Z spread.

    Args:
        table: iterable of Judgement rows; every budget needs >= 1 row.

    Returns:
        {budget: {"error_rate", "z_score", "std", "n_judgements"}}.
    """
    rows = list(table)
    if not rows:
        raise ValueError("judgement table is empty")
    by_budget = defaultdict(list)
    for row in rows:
        by_budget[row.budget].append(row)

    out = {}
    for budget, group in sorted(by_budget.items()):
        n = len(group)
        errors = sum(0 if r.correct else 1 for r in group)
        error_rate = errors / n
        z = _z_from_rate(1.0 - error_rate, n)

        per_resp = defaultdict(list)
        for r in group:
            per_resp[r.respondent_id].append(r.correct)
        resp_z = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for answers in per_resp.values():
                resp_z.append(_z_from_rate(sum(answers) / len(answers), len(answers)))
        std = stdev(resp_z) if len(resp_z) > 1 else 0.0
        out[budget] = {
            "error_rate": error_rate,
            "z_score": z,
            "std": std,
            "n_judgements": n,
        }
    return out
