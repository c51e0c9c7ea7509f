from __future__ import annotations

import support


def pytest_terminal_summary(terminalreporter):
    if not support.ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(support.ACCEPTANCE):
        title, ok, detail = support.ACCEPTANCE[n]
        line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}"
        if detail:
            line += f" ({detail})"
        tr.write_line(line)
