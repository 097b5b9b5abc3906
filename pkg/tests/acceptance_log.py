"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
import contextlib
import time

LINES: dict[int, str] = {}


class _Check:
    detail = ""


@contextlib.contextmanager
def criterion(number: int, title: str):
    c = _Check()
    t0 = time.perf_counter()
    try:
        yield c
    except BaseException as e:
        LINES[number] = f"FAIL  criterion {number:2d}  {title}: {type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}"
        print(LINES[number])
        raise
    LINES[number] = f"PASS  criterion {number:2d}  {title} ({time.perf_counter() - t0:.1f}s) {c.detail}".rstrip()
    print(LINES[number])
