from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class ValidationReport:
    """Collected invariant violations; empty means valid.

    Validation never raises. Callers decide whether a non-empty report is
    fatal (see :meth:`raise_if_invalid`).
    """

    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems

    def __bool__(self) -> bool:
        return self.ok

    def add(self, message: str) -> None:
        self.problems.append(message)

    def extend(self, other: "ValidationReport", prefix: str = "") -> None:
        self.problems.extend(prefix + p for p in other.problems)

    def raise_if_invalid(self, what: str = "configuration") -> None:
        if self.problems:
            raise ValueError(f"invalid {what}: " + "; ".join(self.problems))
