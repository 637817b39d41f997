"""Collects one verdict per acceptance criterion for the end-of-run summary."""

RESULTS = {}


def record(n, passed, detail):
    RESULTS[n] = (bool(passed), detail)
    return passed


def summary_lines():
    lines = []
    for n in range(1, 12):
        if n in RESULTS:
            ok, detail = RESULTS[n]
            lines.append(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            lines.append(f"criterion {n:2d}: NOT RUN")
    return lines
