"""Collects one result line per acceptance criterion for the terminal summary."""

LINES: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> bool:
    LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
    print(LINES[number])
    return passed
