"""Scratch checks for analytics before the real test suite."""
import math
import random
from fractions import Fraction

import scipy.stats as st

from esource import analytics as an
from esource.tss import RecruitmentEvent, RecruitmentLog

# Wilcoxon exact vs scipy ------------------------------------------------------
rng = random.Random(11)
for trial in range(200):
    m = rng.randint(1, 12)
    diffs = [rng.randint(-6, 6) for _ in range(m)]
    if all(d == 0 for d in diffs):
        continue
    mine = an.wilcoxon_signed_rank(diffs)
    nz = [d for d in diffs if d != 0]
    ref = st.wilcoxon(nz, mode="exact", zero_method="wilcox")
    assert math.isclose(mine.statistic, ref.statistic), (diffs, mine, ref)
    # scipy's exact mode mishandles ties; compare p only on tie-free draws
    if len(set(abs(d) for d in nz)) == len(nz):
        assert math.isclose(mine.p_value, ref.pvalue), (diffs, mine.p_value, ref.pvalue)
print("wilcoxon exact matches scipy on tie-free data: ok")

# brute-force enumeration oracle including ties
for trial in range(60):
    m = rng.randint(2, 9)
    diffs = [rng.choice([-3, -2, -1, 1, 2, 3]) for _ in range(m)]
    mine = an.wilcoxon_signed_rank(diffs)
    ranked, _ = an._signed_ranks(diffs)
    ranks = [r for _, r in ranked]
    w_obs = sum(r for d, r in ranked if d > 0)
    lo = hi = 0
    for mask in range(2 ** m):
        w = sum(ranks[i] for i in range(m) if (mask >> i) & 1)
        if w <= w_obs + 1e-12:
            lo += 1
        if w >= w_obs - 1e-12:
            hi += 1
    p = min(1.0, 2 * min(lo, hi) / 2 ** m)
    assert math.isclose(mine.p_value, p), (diffs, mine.p_value, p)
print("wilcoxon exact matches 2^m enumeration with ties: ok")

# zero handling / degenerate
r = an.wilcoxon_signed_rank([0, 0, 0])
assert r.all_zero and r.p_value == 1.0 and r.n_used == 0 and r.method == "degenerate"
r = an.wilcoxon_signed_rank([(5, 5), (7, 4), (2, 6)])
assert r.n_used == 2
print("zero-difference handling: ok")

# normal approximation branch
big = [rng.gauss(0.3, 1) for _ in range(40)]
mine = an.wilcoxon_signed_rank(big)
ref = st.wilcoxon(big, correction=False, mode="approx")
assert mine.method == "normal-approx"
assert math.isclose(mine.p_value, ref.pvalue, rel_tol=1e-9), (mine.p_value, ref.pvalue)
print("wilcoxon normal approximation matches scipy (no continuity correction): ok")

# proportions: z against hand formula, exact against scipy fisher_exact
res = an.two_sample_proportion_test(249, 293, 218, 307)
pooled = (249 + 218) / 600
z_hand = (249 / 293 - 218 / 307) / math.sqrt(pooled * (1 - pooled) * (1 / 293 + 1 / 307))
assert math.isclose(res.z, z_hand)
assert res.p_value < 0.001 and res.p1 > res.p2
fisher = st.fisher_exact([[249, 293 - 249], [218, 307 - 218]]).pvalue
assert math.isclose(res.exact_p, fisher, rel_tol=1e-9), (res.exact_p, fisher)
print(f"CROM completion: p1={res.p1:.2f} p2={res.p2:.2f} z={res.z:.2f} "
      f"p={res.p_value:.2e} exact={res.exact_p:.2e}")

res = an.two_sample_proportion_test(61, 100, 100, 100)
assert res.p_value < 0.001 and res.p2 > res.p1
fisher = st.fisher_exact([[61, 39], [100, 0]]).pvalue
assert math.isclose(res.exact_p, fisher, rel_tol=1e-9)
print(f"PROM completion: p={res.p_value:.2e} exact={res.exact_p:.2e}")

# random fisher agreement
for trial in range(200):
    n1, n2 = rng.randint(1, 25), rng.randint(1, 25)
    x1, x2 = rng.randint(0, n1), rng.randint(0, n2)
    mine = an.exact_conditional_p(x1, n1, x2, n2)
    ref = st.fisher_exact([[x1, n1 - x1], [x2, n2 - x2]]).pvalue
    assert math.isclose(mine, ref, rel_tol=1e-9, abs_tol=1e-12), (x1, n1, x2, n2)
print("exact conditional p matches fisher_exact on 200 random tables: ok")

# degenerate pooled
res = an.two_sample_proportion_test(0, 10, 0, 12)
assert res.degenerate and res.z is None and res.p_value is None and res.exact_p == 1.0
res = an.two_sample_proportion_test(10, 10, 12, 12)
assert res.degenerate and res.exact_p == 1.0
print("degenerate pooled proportion: ok")

# equal rates -> z == 0, p == 1
res = an.two_sample_proportion_test(5, 10, 10, 20)
assert res.z == 0.0 and res.p_value == 1.0
print("equal rates: ok")

# one-sided monotonicity spot check
prev = None
for x1 in range(0, 11):
    p = an.one_sided_exact_p(x1, 10, 4, 12)
    if prev is not None:
        assert p <= prev + 1e-12
    prev = p
print("one-sided p non-increasing in x1: ok")

# recruitment tabulation -------------------------------------------------------
log = RecruitmentLog()
seq = 0
def add(country, arm, n, kind="Randomized", practice=None, day=0):
    global seq
    for _ in range(n):
        seq += 1
        log.append(RecruitmentEvent(practice or f"{country[:2].lower()}-1", country,
                                    f"p{seq:04d}", kind,
                                    f"2015-03-{(day % 28) + 1:02d}", arm))

add("Greece", "T", 122); add("Greece", "C", 121)
add("Netherlands", "T", 10); add("Netherlands", "C", 6)
add("Poland", "T", 156); add("Poland", "C", 177)
add("UK", "T", 5); add("UK", "C", 3)
table = an.tabulate_recruitment(log)
assert [r.country for r in table.rows] == ["Greece", "Netherlands", "Poland", "UK"]
assert (table.row("Greece").t_count, table.row("Greece").c_count) == (122, 121)
assert table.total_t == 293 and table.total_c == 307 and table.grand_total == 600
share = table.share_of(["Greece", "Poland"])
assert share == Fraction(576, 600), share
print(f"tabulation: totals 293/307/600, GR+PL share {float(share):.4f}")

# hold on: Greece 243 + Poland 333 = 576, not 578. Check: 122+121=243, 156+177=333,
# 243+333=576 -> 96.0%. (578 was an arithmetic slip in my notes; 576/600 = 0.96 exactly.)
assert float(share) == 0.96

# completion rates with absent arm
clog = RecruitmentLog()
def subj(pid, arm, kinds, practice="pr-1", country="Poland"):
    clog.append(RecruitmentEvent(practice, country, pid, "Randomized", "2015-01-01", arm))
    for k in kinds:
        clog.append(RecruitmentEvent(practice, country, pid, k, "2015-02-01", arm))

for i in range(17):
    subj(f"t{i}", "T", ["Crom1", "Crom2"])
for i in range(17, 20):
    subj(f"t{i}", "T", ["Crom1"])
for i in range(71):
    subj(f"c{i}", "C", ["Crom1", "Crom2"])
for i in range(71, 100):
    subj(f"c{i}", "C", ["Crom1"])
rates = an.completion_rates(clog)
assert rates.crom2_given_crom1["T"] == Fraction(17, 20)
assert rates.crom2_given_crom1["C"] == Fraction(71, 100)
assert rates.prom2_given_prom1["T"] is None and rates.prom2_given_prom1["C"] is None
print("completion rates incl. absent-arm None: ok")

# weekly rates over the global span
wlog = RecruitmentLog()
wlog.append(RecruitmentEvent("a", "Poland", "s1", "Randomized", "2015-03-02", "T"))
wlog.append(RecruitmentEvent("a", "Poland", "s2", "Randomized", "2015-03-09", "T"))
wlog.append(RecruitmentEvent("b", "Poland", "s3", "Randomized", "2015-03-20", "C"))
w = an.weekly_rates(wlog)
# span 2015-03-02..2015-03-20 = 18 days -> 3 weeks
assert w == {"a": Fraction(2, 3), "b": Fraction(1, 3)}, w
pairs = an.paired_weekly_rates(wlog, [("a", "b")])
assert pairs == [(Fraction(2, 3), Fraction(1, 3))]
print("weekly rates use the shared window: ok")

# sample size constants
assert an.subjects_per_arm_needed() == 138
assert an.practice_pairs_needed() == 20
assert an.PLANNED_RATE_RATIO == 1.75
print(f"sample size: {an.subjects_per_arm_needed()}/arm, "
      f"{an.practice_pairs_needed()} practice pairs")

# report rendering + tss wiring
report = an.render_report(log)
assert "Greece" in report and "600" in report
from esource import tss
print("render_report: ok")

print("ALL ANALYTICS SMOKE CHECKS PASSED")
