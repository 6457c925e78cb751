"""Shared pytest plumbing: the shipping-gate summary block.

Tests named test_criterion_<n>* roll up into one PASS/FAIL line per
numbered gate at the end of the run; a gate with several tests passes
only if all of them do, and skips count as failures so a gate cannot
pass silently.
"""

import re

CRITERIA = {
    1: "compute model within 15% of the published dense cost",
    2: "gated-pair cost law: keep x dense plus small predictor",
    3: "gradient checks: ops, full model, gated path, losses",
    4: "masked vs compact execution agree; top-k matches sort oracle",
    5: "sparsity schedule ramp shape",
    6: "ablation ordering on the synthetic task, seed-averaged",
    7: "gates vary across inputs; always/never-active sets non-empty",
    8: "analysis statistics match oracles",
    9: "byte-identical CSV outputs on rerun",
}

_PAT = re.compile(r"test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes = {}
    for reps in terminalreporter.stats.values():
        for rep in reps:
            nodeid = getattr(rep, "nodeid", "")
            match = _PAT.search(nodeid)
            if not match:
                continue
            n = int(match.group(1))
            when = getattr(rep, "when", None)
            if when == "call":
                ok = rep.passed
            elif getattr(rep, "failed", False) or getattr(rep, "skipped", False):
                ok = False  # setup/teardown error, or skipped outright
            else:
                continue
            outcomes[n] = outcomes.get(n, True) and ok
    if not outcomes:
        return
    terminalreporter.write_sep("=", "shipping gates")
    for n in sorted(outcomes):
        verdict = "PASS" if outcomes[n] else "FAIL"
        label = CRITERIA.get(n, "unnamed gate")
        terminalreporter.write_line(f"criterion {n} ({label}): {verdict}")
