"""One summary line per acceptance criterion at the end of the run."""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call":
                continue
            props = dict(rep.user_properties)
            if "criterion" not in props:
                continue
            lines.append((props["criterion"], outcome.upper()[:4], props.get("detail", "")))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for crit, status, detail in sorted(lines):
        terminalreporter.write_line(f"criterion {crit:>2}: {status}  {detail}")
