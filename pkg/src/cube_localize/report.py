"""Common report format shared by audits, certification, and the CLI."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

__all__ = ["Assertion", "AuditReport", "canonical_json", "to_jsonable"]


def to_jsonable(obj: Any) -> Any:
    """Convert numpy scalars/arrays and non-finite floats into JSON-safe values."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def canonical_json(obj: Any, drop: tuple[str, ...] = ()) -> str:
    """Stable serialization: sorted keys, fixed separators, optional top-level key removal.

    ``drop`` entries may be dotted paths such as ``"manifest.wall_clock"``.
    """
    data = to_jsonable(obj)
    for path in drop:
        parts = path.split(".")
        node = data
        for p in parts[:-1]:
            node = node.get(p, {}) if isinstance(node, dict) else {}
        if isinstance(node, dict):
            node.pop(parts[-1], None)
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass
class Assertion:
    """One checked claim ``lhs <relation> rhs`` up to ``tolerance``."""

    claim: str
    lhs: float
    rhs: float
    tolerance: float = 0.0
    relation: str = "<="
    passed: bool = field(init=False)

    def __post_init__(self) -> None:
        lhs, rhs, tol = float(self.lhs), float(self.rhs), float(self.tolerance)
        if self.relation == "<=":
            ok = lhs <= rhs + tol
        elif self.relation == ">=":
            ok = lhs >= rhs - tol
        elif self.relation == "==":
            ok = abs(lhs - rhs) <= tol
        else:
            raise ValueError(f"unknown relation {self.relation!r}")
        self.passed = bool(ok and math.isfinite(lhs) and math.isfinite(rhs))

    def to_dict(self) -> dict[str, Any]:
        return {
            "claim": self.claim,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "relation": self.relation,
            "tolerance": self.tolerance,
            "pass": self.passed,
        }


@dataclass
class AuditReport:
    name: str
    measure: str = ""
    params: dict[str, Any] = field(default_factory=dict)
    assertions: list[Assertion] = field(default_factory=list)
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def check(self, claim: str, lhs: float, rhs: float, tolerance: float = 0.0, relation: str = "<=") -> Assertion:
        a = Assertion(claim, float(lhs), float(rhs), float(tolerance), relation)
        self.assertions.append(a)
        return a

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertions)

    def failures(self) -> list[Assertion]:
        return [a for a in self.assertions if not a.passed]

    def to_dict(self) -> dict[str, Any]:
        return to_jsonable(
            {
                "name": self.name,
                "measure": self.measure,
                "params": self.params,
                "assertions": [a.to_dict() for a in self.assertions],
                "diagnostics": self.diagnostics,
                "pass": self.passed,
            }
        )

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def table(self) -> str:
        lines = [f"{self.name}  [{self.measure}]  {'PASS' if self.passed else 'FAIL'}"]
        for a in self.assertions:
            lines.append(
                f"  {'ok  ' if a.passed else 'FAIL'} {a.claim}: {a.lhs:.6g} {a.relation} {a.rhs:.6g}"
                f" (tol {a.tolerance:.3g})"
            )
        for k in sorted(self.diagnostics):
            v = self.diagnostics[k]
            if isinstance(v, (int, float, np.floating, np.integer)):
                lines.append(f"  . {k} = {float(v):.6g}")
        return "\n".join(lines)
