"""Prints one PASS/FAIL line per acceptance criterion after the run.

Acceptance tests tag themselves with ``record_property("criterion", n)`` and
may add a ``detail`` property with the measured numbers.
"""

CRITERIA = {
    1: "gradient suite on the 2-layer toy model (rel err < 1e-4, < 60 s)",
    2: "identity at init (logits within 1e-10, alpha=1 fusion exact, < 5 s)",
    3: "H-score matches the published table within 0.5",
    4: "fast AUROC equals the pairwise oracle (200 instances, < 1e-12, < 10 s)",
    5: "SAM mechanics (|eps| = rho, rho=0 equivalence, bitwise restore)",
    6: "frozen invariance over 50 batches and causality",
    7: "adaptation benefit: AUROC +0.02, ACC drop <= 0.01, last quarter >= first (< 5 min)",
    8: "ablation: HLN-only AUROC >= no-adapter, AAN-only ACC >= no-adapter",
    9: "determinism: two CLI runs give byte-identical CSV and JSON",
}

_results: dict[int, list[tuple[bool, str]]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        passed = report.outcome == "passed"
        _results.setdefault(int(props["criterion"]), []).append((passed, str(props.get("detail", ""))))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        runs = _results.get(n)
        if runs is None:
            tr.write_line(f"SKIP  {n}. {title}")
            continue
        ok = all(p for p, _ in runs)
        detail = "; ".join(d for _, d in runs if d)
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  {n}. {title}" + (f"  [{detail}]" if detail else ""))
