"""Performance qualification: the desk study at full scale.

Four practices, 200 seeded patients, 10 clinic days, complete inside the
30 second budget with every invariant green and the analysis report
rendered from the recruitment log.
"""

from esource.harness import DeskConfig, run_desk_study


def test_full_scale_desk_run_within_budget():
    summary = run_desk_study(DeskConfig(patients=200, clinic_days=10,
                                        seed=2015))
    assert summary.elapsed_seconds < 30.0
    assert summary.clinic_days == 10
    assert summary.completed_cleanly()
    assert summary.verified_total > 0
    assert summary.verified_ok == summary.verified_total
    assert summary.pending_after_final_sync == 0
    assert summary.recruitment.grand_total == sum(summary.randomized.values())
    for heading in ("Recruitment of subjects by site",
                    "Completion (conditional on the preceding form)",
                    "Weekly recruitment rate per practice",
                    "Matched-pairs comparison of weekly rates"):
        assert heading in summary.report_text
