"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

LINES = {}


def record(number: int, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {detail}"
    LINES[number] = line
    print(line)
    return ok
