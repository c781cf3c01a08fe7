"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

LINES: dict = {}


def report(number: int, title: str, passed: bool, detail: str) -> str:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}"
    LINES[number] = line
    print(line)
    return line
