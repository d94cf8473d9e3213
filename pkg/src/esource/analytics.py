"""Evaluation statistics: recruitment tables, matched-pairs and proportion tests.

Everything here is a pure function over a recruitment log or plain numbers.

Method choices, spelled out because they change third digits:
- Wilcoxon signed-rank: zero differences are dropped (n shrinks), ties among
  the remaining |d| get average ranks. Exact mode enumerates the full sign
  distribution for n <= EXACT_LIMIT via a convolution over doubled ranks
  (identical to summing all 2^n assignments); above that a normal
  approximation with the standard tie correction is used, without continuity
  correction. Two-sided p doubles the smaller tail and caps at 1.0.
- Two-sample proportion test: pooled-variance z; an exact conditional
  (hypergeometric) p accompanies it as a cross-check and is the only answer
  when the pooled proportion is degenerate (0 or 1).
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from statistics import NormalDist

from .tss import RecruitmentLog

EXACT_LIMIT = 20

# The planned effect from the trial design: lifting the recruitment-linked
# completion rate from 20% to 35% (a rate ratio of 1.75).
PLANNED_BASELINE_RATE = 0.20
PLANNED_IMPROVED_RATE = 0.35
PLANNED_RATE_RATIO = 1.75
AVERAGE_PRACTICE_CLUSTER = 7

_NORMAL = NormalDist()


# Wilcoxon matched-pairs signed-ranks ------------------------------------------------


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float          # min(W+, W-) over the nonzero differences
    p_value: float
    n_used: int               # pairs remaining after zero differences drop
    method: str               # "exact" | "normal-approx" | "degenerate"
    w_plus: float
    w_minus: float
    all_zero: bool = False


def _signed_ranks(diffs: list) -> tuple[list[tuple], list[int]]:
    """Average ranks of |d| with tie-group sizes; zeros must be gone already."""
    indexed = sorted(range(len(diffs)), key=lambda i: abs(diffs[i]))
    ranks = [0.0] * len(diffs)
    tie_sizes: list[int] = []
    i = 0
    while i < len(indexed):
        j = i
        while (j + 1 < len(indexed)
               and abs(diffs[indexed[j + 1]]) == abs(diffs[indexed[i]])):
            j += 1
        avg = (i + j + 2) / 2  # ranks are 1-based
        for k in range(i, j + 1):
            ranks[indexed[k]] = avg
        tie_sizes.append(j - i + 1)
        i = j + 1
    return [(diffs[i], ranks[i]) for i in range(len(diffs))], tie_sizes


def _exact_tail_counts(doubled_ranks: list[int]) -> list[int]:
    """counts[s] = number of sign assignments with doubled W+ equal to s."""
    total = sum(doubled_ranks)
    counts = [0] * (total + 1)
    counts[0] = 1
    for r in doubled_ranks:
        for s in range(total - r, -1, -1):
            if counts[s]:
                counts[s + r] += counts[s]
    return counts


def wilcoxon_signed_rank(pairs) -> WilcoxonResult:
    """Matched-pairs signed-ranks test over (t_value, c_value) pairs.

    Also accepts precomputed differences (a sequence of numbers). Values are
    used as given: Fractions keep exact tie structure, which matters because
    ranks change with it.
    """
    diffs = []
    for entry in pairs:
        if isinstance(entry, (tuple, list)):
            diffs.append(entry[0] - entry[1])
        else:
            diffs.append(entry)
    if not diffs:
        raise ValueError("at least one pair is required")
    nonzero = [d for d in diffs if d != 0]
    if not nonzero:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate", 0.0, 0.0, all_zero=True)
    ranked, tie_sizes = _signed_ranks(nonzero)
    w_plus = sum(rank for d, rank in ranked if d > 0)
    w_minus = sum(rank for d, rank in ranked if d < 0)
    statistic = min(w_plus, w_minus)
    m = len(nonzero)
    if m <= EXACT_LIMIT:
        doubled = [round(2 * rank) for _, rank in ranked]
        counts = _exact_tail_counts(doubled)
        denom = Fraction(2) ** m
        w2 = round(2 * w_plus)
        lower = Fraction(sum(counts[: w2 + 1]), 1) / denom
        upper = Fraction(sum(counts[w2:]), 1) / denom
        p = min(Fraction(1), 2 * min(lower, upper))
        return WilcoxonResult(statistic, float(p), m, "exact", w_plus, w_minus)
    mu = m * (m + 1) / 4
    tie_term = sum(t ** 3 - t for t in tie_sizes) / 48
    sigma = math.sqrt(m * (m + 1) * (2 * m + 1) / 24 - tie_term)
    z = (w_plus - mu) / sigma
    p = min(1.0, 2 * (1 - _NORMAL.cdf(abs(z))))
    return WilcoxonResult(statistic, p, m, "normal-approx", w_plus, w_minus)


# Two-sample test of proportions ------------------------------------------------------


@dataclass(frozen=True)
class ProportionTestResult:
    p1: float
    p2: float
    z: float | None           # None when the pooled variance is degenerate
    p_value: float | None
    exact_p: float            # exact conditional (hypergeometric), two-sided
    degenerate: bool


def _validate_counts(x1: int, n1: int, x2: int, n2: int) -> None:
    for x, n, side in ((x1, n1, "1"), (x2, n2, "2")):
        if n < 1:
            raise ValueError(f"n{side} must be at least 1")
        if not 0 <= x <= n:
            raise ValueError(f"x{side} must lie in [0, n{side}]")


def _hypergeom_pmf(i: int, n1: int, n2: int, k: int) -> Fraction:
    return Fraction(math.comb(n1, i) * math.comb(n2, k - i),
                    math.comb(n1 + n2, k))


def exact_conditional_p(x1: int, n1: int, x2: int, n2: int) -> float:
    """Two-sided exact p: total probability of tables no more likely than ours."""
    _validate_counts(x1, n1, x2, n2)
    k = x1 + x2
    lo, hi = max(0, k - n2), min(k, n1)
    observed = _hypergeom_pmf(x1, n1, n2, k)
    p = sum((pmf for i in range(lo, hi + 1)
             if (pmf := _hypergeom_pmf(i, n1, n2, k)) <= observed),
            start=Fraction(0))
    return float(min(p, Fraction(1)))


def one_sided_exact_p(x1: int, n1: int, x2: int, n2: int,
                      alternative: str = "greater") -> float:
    """Exact conditional one-sided p.

    "greater" tests the alternative that arm 1's rate is the higher one
    (small p = strong evidence for arm 1); it is non-increasing as x1 grows.
    """
    _validate_counts(x1, n1, x2, n2)
    k = x1 + x2
    lo, hi = max(0, k - n2), min(k, n1)
    if alternative == "greater":
        span = range(x1, hi + 1)
    elif alternative == "less":
        span = range(lo, x1 + 1)
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    p = sum((_hypergeom_pmf(i, n1, n2, k) for i in span), start=Fraction(0))
    return float(min(p, Fraction(1)))


def two_sample_proportion_test(x1: int, n1: int, x2: int, n2: int) -> ProportionTestResult:
    _validate_counts(x1, n1, x2, n2)
    p1, p2 = x1 / n1, x2 / n2
    pooled = (x1 + x2) / (n1 + n2)
    exact = exact_conditional_p(x1, n1, x2, n2)
    if pooled in (0.0, 1.0):
        return ProportionTestResult(p1, p2, None, None, exact, True)
    se = math.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
    z = (p1 - p2) / se
    p = min(1.0, 2 * (1 - _NORMAL.cdf(abs(z))))
    return ProportionTestResult(p1, p2, z, p, exact, False)


# Recruitment tables -----------------------------------------------------------------


@dataclass(frozen=True)
class RecruitmentRow:
    country: str
    t_count: int
    c_count: int

    @property
    def total(self) -> int:
        return self.t_count + self.c_count


@dataclass(frozen=True)
class RecruitmentTable:
    rows: tuple[RecruitmentRow, ...]

    @property
    def total_t(self) -> int:
        return sum(r.t_count for r in self.rows)

    @property
    def total_c(self) -> int:
        return sum(r.c_count for r in self.rows)

    @property
    def grand_total(self) -> int:
        return self.total_t + self.total_c

    def row(self, country: str) -> RecruitmentRow:
        for r in self.rows:
            if r.country == country:
                return r
        return RecruitmentRow(country, 0, 0)

    def share_of(self, countries) -> Fraction:
        """Fraction of all randomized subjects contributed by these countries."""
        wanted = set(countries)
        if self.grand_total == 0:
            return Fraction(0)
        part = sum(r.total for r in self.rows if r.country in wanted)
        return Fraction(part, self.grand_total)


def tabulate_recruitment(log: RecruitmentLog) -> RecruitmentTable:
    """Randomized subjects by country and arm, countries alphabetical."""
    counts: dict[str, dict[str, int]] = {}
    for event in log.events:
        if event.kind != "Randomized":
            continue
        by_arm = counts.setdefault(event.country, {"T": 0, "C": 0})
        by_arm[event.arm] += 1
    rows = tuple(RecruitmentRow(country, counts[country]["T"], counts[country]["C"])
                 for country in sorted(counts))
    return RecruitmentTable(rows)


# Completion rates -------------------------------------------------------------------


@dataclass(frozen=True)
class CompletionRates:
    crom2_given_crom1: dict[str, Fraction | None]
    prom2_given_prom1: dict[str, Fraction | None]


def _conditional_counts(log: RecruitmentLog, first: str,
                        second: str) -> dict[str, tuple[int, int] | None]:
    """(with both, with first) per arm; None when nobody has the first form."""
    arm_of: dict[str, str] = {}
    held: dict[str, set[str]] = {}
    for event in log.events:
        if event.arm is not None:
            arm_of[event.pseudonym] = event.arm
        if event.kind in (first, second):
            held.setdefault(event.pseudonym, set()).add(event.kind)
    out: dict[str, tuple[int, int] | None] = {}
    for arm in ("T", "C"):
        with_first = [p for p, kinds in held.items()
                      if first in kinds and arm_of.get(p) == arm]
        if not with_first:
            out[arm] = None
            continue
        with_both = [p for p in with_first if second in held[p]]
        out[arm] = (len(with_both), len(with_first))
    return out


def _conditional(log: RecruitmentLog, first: str, second: str) -> dict[str, Fraction | None]:
    return {arm: Fraction(*counts) if counts is not None else None
            # None marks undefined, deliberately not zero
            for arm, counts in _conditional_counts(log, first, second).items()}


def completion_rates(log: RecruitmentLog) -> CompletionRates:
    return CompletionRates(_conditional(log, "Crom1", "Crom2"),
                           _conditional(log, "Prom1", "Prom2"))


# Weekly recruitment rates -------------------------------------------------------------


def weekly_rates(log: RecruitmentLog, kind: str = "Randomized") -> dict[str, Fraction]:
    """Events per week for each practice, over the shared observation window.

    The window runs from the first to the last event of this kind anywhere in
    the log (every practice was open for the whole trial), in whole weeks.
    """
    instants: list[str] = []
    counts: dict[str, int] = {}
    for event in log.events:
        if event.kind != kind:
            continue
        instants.append(event.instant)
        counts[event.practice_id] = counts.get(event.practice_id, 0) + 1
    if not instants:
        return {}
    first = min(dt.date.fromisoformat(i[:10]) for i in instants)
    last = max(dt.date.fromisoformat(i[:10]) for i in instants)
    span_weeks = (last - first).days // 7 + 1
    return {practice: Fraction(count, span_weeks)
            for practice, count in sorted(counts.items())}


def paired_weekly_rates(log: RecruitmentLog,
                        practice_pairs) -> list[tuple[Fraction, Fraction]]:
    """(treatment rate, control rate) per matched practice pair, exact."""
    rates = weekly_rates(log)
    return [(rates.get(t, Fraction(0)), rates.get(c, Fraction(0)))
            for t, c in practice_pairs]


# Sample size ---------------------------------------------------------------------


def subjects_per_arm_needed(baseline: float = PLANNED_BASELINE_RATE,
                            improved: float = PLANNED_IMPROVED_RATE,
                            alpha: float = 0.05, power: float = 0.80) -> int:
    """Standard two-proportion sample size, per arm."""
    if not 0 < baseline < 1 or not 0 < improved < 1 or baseline == improved:
        raise ValueError("rates must be distinct and inside (0, 1)")
    z_a = _NORMAL.inv_cdf(1 - alpha / 2)
    z_b = _NORMAL.inv_cdf(power)
    mean = (baseline + improved) / 2
    num = (z_a * math.sqrt(2 * mean * (1 - mean))
           + z_b * math.sqrt(baseline * (1 - baseline) + improved * (1 - improved)))
    return math.ceil((num / abs(improved - baseline)) ** 2)


def practice_pairs_needed(baseline: float = PLANNED_BASELINE_RATE,
                          improved: float = PLANNED_IMPROVED_RATE,
                          alpha: float = 0.05, power: float = 0.80,
                          subjects_per_practice: int = AVERAGE_PRACTICE_CLUSTER) -> int:
    per_arm = subjects_per_arm_needed(baseline, improved, alpha, power)
    return math.ceil(per_arm / subjects_per_practice)


# Report rendering -------------------------------------------------------------------


def render_report(log: RecruitmentLog, practice_pairs=None) -> str:
    """Plain-text evaluation report: the by-site table plus test results."""
    table = tabulate_recruitment(log)
    lines = ["Recruitment of subjects by site", ""]
    header = f"{'Country':<16}{'Arm T':>8}{'Arm C':>8}{'Total':>8}"
    lines.append(header)
    lines.append("-" * len(header))
    for row in table.rows:
        lines.append(f"{row.country:<16}{row.t_count:>8}{row.c_count:>8}{row.total:>8}")
    lines.append("-" * len(header))
    lines.append(f"{'Total':<16}{table.total_t:>8}{table.total_c:>8}"
                 f"{table.grand_total:>8}")
    lines.append("")

    lines.append("Completion (conditional on the preceding form)")
    for label, first, second in (("2nd CROM given 1st", "Crom1", "Crom2"),
                                 ("2nd PROM given 1st", "Prom1", "Prom2")):
        counts = _conditional_counts(log, first, second)
        for arm in ("T", "C"):
            if counts[arm] is None:
                lines.append(f"  {label}, arm {arm}: absent")
                continue
            x, n = counts[arm]
            lines.append(f"  {label}, arm {arm}: {x / n:.2f} ({Fraction(x, n)})")
        if counts["T"] is not None and counts["C"] is not None:
            test = two_sample_proportion_test(*counts["T"], *counts["C"])
            if test.degenerate:
                lines.append(f"  {label}: z undefined (degenerate variance), "
                             f"exact p = {test.exact_p:.4g}")
            else:
                lines.append(f"  {label}: z = {test.z:.2f}, "
                             f"p = {test.p_value:.4g}, "
                             f"exact p = {test.exact_p:.4g}")
    lines.append("")

    per_practice = weekly_rates(log)
    if per_practice:
        lines.append("Weekly recruitment rate per practice")
        for practice, rate in per_practice.items():
            lines.append(f"  {practice:<16}{float(rate):6.2f}")
        lines.append("")

    if practice_pairs:
        pairs = paired_weekly_rates(log, practice_pairs)
        result = wilcoxon_signed_rank(pairs)
        t_mean = float(sum(t for t, _ in pairs) / len(pairs))
        c_mean = float(sum(c for _, c in pairs) / len(pairs))
        lines.append("Matched-pairs comparison of weekly rates")
        lines.append(f"  arm T mean {t_mean:.2f}, arm C mean {c_mean:.2f}")
        lines.append(f"  Wilcoxon signed-rank: W = {result.statistic:g}, "
                     f"p = {result.p_value:.4f} ({result.method}, "
                     f"n = {result.n_used})")
        lines.append("")
    return "\n".join(lines) + "\n"


def load_practice_pairs(path) -> list[tuple[str, str]]:
    with open(path) as fh:
        data = json.load(fh)
    return [(pair["treatment"], pair["control"]) for pair in data["pairs"]]
