"""Shared pass/fail record for the acceptance criteria."""

RESULTS: dict[int, tuple[bool, str]] = {}


def record(num: int, ok: bool, detail: str) -> bool:
    RESULTS[num] = (bool(ok), detail)
    print(line(num))
    return bool(ok)


def line(num: int) -> str:
    ok, detail = RESULTS[num]
    return f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}"
