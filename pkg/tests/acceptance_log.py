"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

LINES: list[str] = []
