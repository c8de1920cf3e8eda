"""Collects one verdict line per acceptance criterion for the terminal summary."""

LINES: list[str] = []


def record(criterion: int, ok: bool, title: str, details: list[str]) -> None:
    LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {title}")
    LINES.extend(f"         {d}" for d in details)
