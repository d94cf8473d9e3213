"""Regenerate the evaluation fixtures under src/esource/fixtures/eval/.

The recruitment-by-site counts are published; the event-level logs behind
them are not. This script constructs logs that reproduce the published
aggregates exactly, checks every target against the package's own
statistics before writing, and refuses to write anything that misses.

Run from the repository root: python3 scripts/build_fixtures.py
"""

import hashlib
import json
import sys
from fractions import Fraction
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from esource import analytics
from esource.tss import RecruitmentEvent, RecruitmentLog, save_recruitment_log

OUT_DIR = Path(__file__).resolve().parent.parent / "src/esource/fixtures/eval"

TRIAL_START_ORDINAL = 735659          # 2015-03-02, a Monday
TRIAL_DAYS = 175                      # 25 whole weeks

# Published recruitment by site: country -> (treatment, control).
BY_SITE = {
    "Greece": (122, 121),
    "Netherlands": (10, 6),
    "Poland": (156, 177),
    "UK": (5, 3),
}

# Completion targets: arm -> (with first form, with both forms).
CROM_COMPLETION = {"T": (20, 17), "C": (100, 71)}    # 0.85 vs 0.71
PROM_COMPLETION = {"T": (100, 61), "C": (100, 100)}  # 0.61 vs 1.00

# Weekly-rate targets: per-practice mean over 8 matched pairs and 25 weeks.
WEEKLY_PAIRS = 8
WEEKLY_T_MEAN = Fraction(284, 100)
WEEKLY_C_MEAN = Fraction(239, 100)
WEEKLY_TARGET_P = Fraction(43, 64)    # nearest exact value to the reported 0.67


def _pseudonym(tag: str) -> str:
    return hashlib.sha256(f"fixture:{tag}".encode()).hexdigest()[:16]


def _day(ordinal_offset: int) -> str:
    import datetime as dt
    return dt.date.fromordinal(TRIAL_START_ORDINAL + ordinal_offset).isoformat()


def _spread(n: int) -> list[int]:
    """n event days covering the whole window, first on day 0, last on day 174."""
    if n == 1:
        return [0]
    return [round(i * (TRIAL_DAYS - 1) / (n - 1)) for i in range(n)]


def build_recruitment_by_site() -> RecruitmentLog:
    log = RecruitmentLog()
    for country, (t_count, c_count) in sorted(BY_SITE.items()):
        code = country[:2].lower()
        for arm, count in (("T", t_count), ("C", c_count)):
            days = _spread(count)
            for i in range(count):
                practice = f"{code}-{arm.lower()}{i % 3 + 1:02d}"
                pseudonym = _pseudonym(f"site:{country}:{arm}:{i}")
                day = days[i]
                log.append(RecruitmentEvent(practice, country, pseudonym,
                                            "Flagged", _day(max(0, day - 14))))
                log.append(RecruitmentEvent(practice, country, pseudonym,
                                            "Consented", _day(max(0, day - 7))))
                log.append(RecruitmentEvent(practice, country, pseudonym,
                                            "Randomized", _day(day), arm))
    table = analytics.tabulate_recruitment(log)
    for country, (t_count, c_count) in BY_SITE.items():
        row = table.row(country)
        assert (row.t_count, row.c_count) == (t_count, c_count), country
    assert table.grand_total == 600
    assert table.share_of(["Greece", "Poland"]) == Fraction(96, 100)
    return log


def build_completion_log() -> RecruitmentLog:
    log = RecruitmentLog()

    def cohort(prefix: str, arm: str, first: str, second: str,
               with_first: int, with_both: int) -> None:
        country = "Poland"
        practice = f"pl-{prefix}"
        for i in range(with_first):
            pseudonym = _pseudonym(f"completion:{prefix}:{i}")
            log.append(RecruitmentEvent(practice, country, pseudonym,
                                        "Randomized", _day(0), arm))
            log.append(RecruitmentEvent(practice, country, pseudonym,
                                        first, _day(7), arm))
            if i < with_both:
                log.append(RecruitmentEvent(practice, country, pseudonym,
                                            second, _day(35), arm))

    cohort("crom-t", "T", "Crom1", "Crom2", *CROM_COMPLETION["T"])
    cohort("crom-c", "C", "Crom1", "Crom2", *CROM_COMPLETION["C"])
    cohort("prom-t", "T", "Prom1", "Prom2", *PROM_COMPLETION["T"])
    cohort("prom-c", "C", "Prom1", "Prom2", *PROM_COMPLETION["C"])

    rates = analytics.completion_rates(log)
    assert rates.crom2_given_crom1 == {"T": Fraction(85, 100), "C": Fraction(71, 100)}
    assert rates.prom2_given_prom1 == {"T": Fraction(61, 100), "C": Fraction(1)}
    return log


def _weekly_differences() -> list[int]:
    """Per-pair count differences t_i - c_i hitting the target exact p.

    The exact two-sided p depends only on the rank pattern of |d| and the
    signs. The pattern searched for here: five distinct positive magnitudes,
    one tied magnitude appearing once positive and once negative, and one
    larger negative magnitude (ranks 1..5 and 6.5 positive; 6.5 and 8
    negative). The magnitudes then only need to satisfy the sum constraint.
    """
    diff_sum = int((WEEKLY_T_MEAN - WEEKLY_C_MEAN) * WEEKLY_PAIRS * 25)
    for largest_neg in range(diff_sum // 3, diff_sum):
        for tied in range(6, largest_neg):
            positive_sum = diff_sum + largest_neg  # five magnitudes below `tied`
            base = positive_sum // 5
            five = [base - 2, base - 1, base, base + 1,
                    positive_sum - 4 * base + 2]
            if len(set(five)) != 5 or min(five) < 1:
                continue
            if not all(v < tied for v in five) or not five == sorted(five):
                continue
            diffs = five + [tied, -tied, -largest_neg]
            rates = [(Fraction(d, 25), Fraction(0)) for d in diffs]
            result = analytics.wilcoxon_signed_rank(rates)
            if Fraction(result.p_value) == WEEKLY_TARGET_P:
                return diffs
    raise AssertionError("no difference pattern reaches the target p")


def build_weekly_log() -> tuple[RecruitmentLog, list[dict]]:
    diffs = _weekly_differences()
    c_total = int(WEEKLY_C_MEAN * WEEKLY_PAIRS * 25)
    base, remainder = divmod(c_total, WEEKLY_PAIRS)
    c_counts = [base + (1 if i < remainder else 0) for i in range(WEEKLY_PAIRS)]
    t_counts = [c + d for c, d in zip(c_counts, diffs)]
    assert all(t > 0 for t in t_counts)

    log = RecruitmentLog()
    pairs = []
    for i, (t_count, c_count) in enumerate(zip(t_counts, c_counts), start=1):
        pair = {"treatment": f"gp-t{i:02d}", "control": f"gp-c{i:02d}"}
        pairs.append(pair)
        for practice, arm, count in ((pair["treatment"], "T", t_count),
                                     (pair["control"], "C", c_count)):
            for j, day in enumerate(_spread(count)):
                pseudonym = _pseudonym(f"weekly:{practice}:{j}")
                log.append(RecruitmentEvent(practice, "Poland", pseudonym,
                                            "Randomized", _day(day), arm))

    rate_pairs = analytics.paired_weekly_rates(
        log, [(p["treatment"], p["control"]) for p in pairs])
    t_mean = sum(t for t, _ in rate_pairs) / WEEKLY_PAIRS
    c_mean = sum(c for _, c in rate_pairs) / WEEKLY_PAIRS
    assert t_mean == WEEKLY_T_MEAN, t_mean
    assert c_mean == WEEKLY_C_MEAN, c_mean
    result = analytics.wilcoxon_signed_rank(rate_pairs)
    assert Fraction(result.p_value) == WEEKLY_TARGET_P, result
    return log, pairs


def main() -> None:
    OUT_DIR.mkdir(parents=True, exist_ok=True)

    by_site = build_recruitment_by_site()
    save_recruitment_log(by_site, OUT_DIR / "recruitment_by_site.jsonl")
    print(f"recruitment_by_site.jsonl: {len(by_site.events)} events, "
          f"600 randomized, share(GR+PL) = 96%")

    completion = build_completion_log()
    save_recruitment_log(completion, OUT_DIR / "completion_log.jsonl")
    print(f"completion_log.jsonl: {len(completion.events)} events, "
          f"CROM 0.85/0.71, PROM 0.61/1.00")

    weekly, pairs = build_weekly_log()
    save_recruitment_log(weekly, OUT_DIR / "weekly_recruitment.jsonl")
    (OUT_DIR / "practice_pairs.json").write_text(
        json.dumps({"pairs": pairs}, indent=2) + "\n")
    result = analytics.wilcoxon_signed_rank(analytics.paired_weekly_rates(
        weekly, [(p["treatment"], p["control"]) for p in pairs]))
    print(f"weekly_recruitment.jsonl: {len(weekly.events)} events, "
          f"means 2.84/2.39, exact p = {result.p_value}")


if __name__ == "__main__":
    main()
