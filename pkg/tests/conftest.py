import sys

CRITERIA = {
    "test_gradient_suite": "gradient-suite",
    "test_oracle_equivalence": "oracle-equivalence",
    "test_adaptive_weight_postcondition": "adaptive-weight-postcondition",
    "test_margin_semantics": "margin-semantics",
    "test_uniformity_trend_three_seeds": "uniformity-trend",
    "test_sampler_exactness": "sampler-exactness",
    "test_lognorm_statistics": "lognorm-sampler",
    "test_dit_convergence": "dit-convergence",
    "test_round_trips": "round-trips",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    details = dict(getattr(mod, "RESULTS", ())) if mod else {}
    seen = []
    for status, key in (("PASS", "passed"), ("FAIL", "failed")):
        for report in terminalreporter.stats.get(key, []):
            if "test_acceptance.py::" not in report.nodeid:
                continue
            criterion = CRITERIA.get(report.nodeid.split("::")[-1])
            if criterion:
                seen.append((criterion, status))
    if not seen:
        return
    terminalreporter.write_line("")
    terminalreporter.write_sep("-", "acceptance criteria")
    for criterion, status in seen:
        terminalreporter.write_line(f"[ACCEPTANCE] {criterion}: {status} {details.get(criterion, '')}")
