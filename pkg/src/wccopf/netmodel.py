"""Grid data model, JSON case loading and the DC flow (PTDF) matrix."""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)


class CaseParseError(ValueError):
    """The case document does not match the JSON case schema."""


class CaseStructureError(ValueError):
    """The case is well-formed but structurally invalid (bad ids, islands)."""


class SingularNetworkError(ArithmeticError):
    """The reduced bus susceptance matrix cannot be inverted."""


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    susceptance: float
    flow_limit: float


@dataclass(frozen=True)
class Generator:
    bus: int
    cost: float
    p_min: float
    p_max: float


@dataclass(frozen=True)
class WindSource:
    bus: int
    forecast: float


@dataclass(frozen=True)
class NetworkCase:
    """Deterministic grid description.

    Buses are ``0..n_buses-1``.  ``demand`` is a per-bus MW vector; buses
    without load carry zero.  Use :meth:`validate` (called by :func:`load_case`)
    to check the structural invariants.
    """

    n_buses: int
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    wind: tuple[WindSource, ...]
    demand: np.ndarray
    slack_bus: int = 0
    base_mva: float = 100.0
    name: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        d = np.array(self.demand, dtype=float)
        d.flags.writeable = False
        object.__setattr__(self, "demand", d)
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "wind", tuple(self.wind))

    @property
    def buses(self) -> list[int]:
        return list(range(self.n_buses))

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @property
    def n_gens(self) -> int:
        return len(self.generators)

    def _frozen(self, key, build):
        if key not in self._cache:
            arr = build()
            arr.flags.writeable = False
            self._cache[key] = arr
        return self._cache[key]

    @property
    def gen_bus_matrix(self) -> np.ndarray:
        """``(n_buses, n_gens)`` incidence: column k has a one at generator k's bus."""
        def build():
            G = np.zeros((self.n_buses, self.n_gens))
            for k, g in enumerate(self.generators):
                G[g.bus, k] = 1.0
            return G
        return self._frozen("G", build)

    @property
    def forecast(self) -> np.ndarray:
        """Per-bus wind forecast in MW."""
        def build():
            v = np.zeros(self.n_buses)
            for w in self.wind:
                v[w.bus] += w.forecast
            return v
        return self._frozen("v", build)

    @property
    def cost(self) -> np.ndarray:
        return self._frozen("c", lambda: np.array([g.cost for g in self.generators], float))

    @property
    def p_min(self) -> np.ndarray:
        return self._frozen("pmin", lambda: np.array([g.p_min for g in self.generators], float))

    @property
    def p_max(self) -> np.ndarray:
        return self._frozen("pmax", lambda: np.array([g.p_max for g in self.generators], float))

    @property
    def flow_limits(self) -> np.ndarray:
        return self._frozen("fmax", lambda: np.array([ln.flow_limit for ln in self.lines], float))

    @property
    def net_load(self) -> float:
        """Total demand minus total forecast wind, i.e. what dispatch must cover."""
        return float(self.demand.sum() - self.forecast.sum())

    def validate(self) -> None:
        m = self.n_buses
        if m < 1:
            raise CaseStructureError("case has no buses")
        if not 0 <= self.slack_bus < m:
            raise CaseStructureError(f"slack_bus {self.slack_bus} is not a bus id")
        if self.demand.shape != (m,):
            raise CaseStructureError("demand vector length differs from bus count")
        if not np.all(np.isfinite(self.demand)) or np.any(self.demand < 0):
            raise CaseStructureError("demands must be finite and non-negative")
        for k, ln in enumerate(self.lines):
            for end in (ln.from_bus, ln.to_bus):
                if not 0 <= end < m:
                    raise CaseStructureError(f"lines[{k}] references unknown bus {end}")
            if ln.from_bus == ln.to_bus:
                raise CaseStructureError(f"lines[{k}] is a self-loop")
            if not ln.susceptance > 0:
                raise CaseStructureError(f"lines[{k}].susceptance must be > 0")
            if not ln.flow_limit > 0:
                raise CaseStructureError(f"lines[{k}].limit_mw must be > 0")
        for k, g in enumerate(self.generators):
            if not 0 <= g.bus < m:
                raise CaseStructureError(f"generators[{k}] references unknown bus {g.bus}")
            if not (0 <= g.p_min <= g.p_max):
                raise CaseStructureError(f"generators[{k}] needs 0 <= p_min <= p_max")
            if not math.isfinite(g.cost):
                raise CaseStructureError(f"generators[{k}].cost must be finite")
        for k, w in enumerate(self.wind):
            if not 0 <= w.bus < m:
                raise CaseStructureError(f"wind[{k}] references unknown bus {w.bus}")
            if w.forecast < 0:
                raise CaseStructureError(f"wind[{k}].forecast_mw must be >= 0")
        if not _is_connected(m, self.lines):
            raise CaseStructureError("line graph is disconnected")


def _is_connected(m: int, lines) -> bool:
    adj = [[] for _ in range(m)]
    for ln in lines:
        adj[ln.from_bus].append(ln.to_bus)
        adj[ln.to_bus].append(ln.from_bus)
    seen = {0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for w in adj[u]:
            if w not in seen:
                seen.add(w)
                queue.append(w)
    return len(seen) == m


_TOP_KEYS = {"name", "buses", "slack_bus", "base_mva", "lines", "generators", "wind", "demand"}
_REQUIRED_TOP = {"buses", "lines", "generators"}
_ITEM_KEYS = {
    "lines": ({"from", "to", "susceptance", "limit_mw"}, set()),
    "generators": ({"bus", "cost", "p_max"}, {"p_min"}),
    "wind": ({"bus", "forecast_mw"}, set()),
    "demand": ({"bus", "mw"}, set()),
}


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CaseParseError(f"{where}: expected a number, got {value!r}")
    if not math.isfinite(value):
        raise CaseParseError(f"{where}: expected a finite number")
    return float(value)


def _integer(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise CaseParseError(f"{where}: expected an integer, got {value!r}")
    return value


def _items(doc: dict, key: str) -> list[dict]:
    raw = doc.get(key, [])
    if not isinstance(raw, list):
        raise CaseParseError(f"{key}: expected a list")
    required, optional = _ITEM_KEYS[key]
    for k, item in enumerate(raw):
        if not isinstance(item, dict):
            raise CaseParseError(f"{key}[{k}]: expected an object")
        missing = required - item.keys()
        if missing:
            raise CaseParseError(f"{key}[{k}]: missing field {sorted(missing)[0]!r}")
        unknown = item.keys() - required - optional
        if unknown:
            raise CaseParseError(f"{key}[{k}]: unknown field {sorted(unknown)[0]!r}")
    return raw


def case_from_dict(doc: dict) -> NetworkCase:
    """Build and validate a :class:`NetworkCase` from a parsed case document."""
    if not isinstance(doc, dict):
        raise CaseParseError("case document must be a JSON object")
    unknown = doc.keys() - _TOP_KEYS
    if unknown:
        raise CaseParseError(f"unknown field {sorted(unknown)[0]!r}")
    missing = _REQUIRED_TOP - doc.keys()
    if missing:
        raise CaseParseError(f"missing field {sorted(missing)[0]!r}")

    n_buses = _integer(doc["buses"], "buses")
    lines = [
        Line(
            _integer(it["from"], f"lines[{k}].from"),
            _integer(it["to"], f"lines[{k}].to"),
            _number(it["susceptance"], f"lines[{k}].susceptance"),
            _number(it["limit_mw"], f"lines[{k}].limit_mw"),
        )
        for k, it in enumerate(_items(doc, "lines"))
    ]
    gens = [
        Generator(
            _integer(it["bus"], f"generators[{k}].bus"),
            _number(it["cost"], f"generators[{k}].cost"),
            _number(it.get("p_min", 0.0), f"generators[{k}].p_min"),
            _number(it["p_max"], f"generators[{k}].p_max"),
        )
        for k, it in enumerate(_items(doc, "generators"))
    ]
    wind = [
        WindSource(
            _integer(it["bus"], f"wind[{k}].bus"),
            _number(it["forecast_mw"], f"wind[{k}].forecast_mw"),
        )
        for k, it in enumerate(_items(doc, "wind"))
    ]
    demand = np.zeros(max(n_buses, 0))
    for k, it in enumerate(_items(doc, "demand")):
        bus = _integer(it["bus"], f"demand[{k}].bus")
        if not 0 <= bus < n_buses:
            raise CaseStructureError(f"demand[{k}] references unknown bus {bus}")
        demand[bus] += _number(it["mw"], f"demand[{k}].mw")

    case = NetworkCase(
        n_buses=n_buses,
        lines=lines,
        generators=gens,
        wind=wind,
        demand=demand,
        slack_bus=_integer(doc.get("slack_bus", 0), "slack_bus"),
        base_mva=_number(doc.get("base_mva", 100.0), "base_mva"),
        name=str(doc.get("name", "")),
    )
    case.validate()
    return case


def load_case(path_or_text) -> NetworkCase:
    """Load a case from a file path, a JSON string, or an already-parsed dict."""
    if isinstance(path_or_text, dict):
        return case_from_dict(path_or_text)
    if isinstance(path_or_text, Path) or (
        isinstance(path_or_text, str) and not path_or_text.lstrip().startswith("{")
    ):
        text = Path(path_or_text).read_text()
    else:
        text = path_or_text
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"invalid JSON: {exc}") from exc
    return case_from_dict(doc)


def case_to_dict(case: NetworkCase) -> dict:
    doc = {
        "buses": case.n_buses,
        "slack_bus": case.slack_bus,
        "base_mva": case.base_mva,
        "lines": [
            {"from": ln.from_bus, "to": ln.to_bus, "susceptance": ln.susceptance,
             "limit_mw": ln.flow_limit}
            for ln in case.lines
        ],
        "generators": [
            {"bus": g.bus, "cost": g.cost, "p_min": g.p_min, "p_max": g.p_max}
            for g in case.generators
        ],
        "wind": [{"bus": w.bus, "forecast_mw": w.forecast} for w in case.wind],
        "demand": [{"bus": b, "mw": float(x)} for b, x in enumerate(case.demand) if x != 0],
    }
    if case.name:
        doc["name"] = case.name
    return doc


def bus_susceptance(case: NetworkCase) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(B_bus, B_f)``: the ``m x m`` bus and ``n x m`` line susceptance matrices."""
    m, n = case.n_buses, case.n_lines
    Bf = np.zeros((n, m))
    for k, ln in enumerate(case.lines):
        Bf[k, ln.from_bus] = ln.susceptance
        Bf[k, ln.to_bus] = -ln.susceptance
    A = np.zeros((n, m))
    for k, ln in enumerate(case.lines):
        A[k, ln.from_bus] = 1.0
        A[k, ln.to_bus] = -1.0
    return A.T @ Bf, Bf


@dataclass(frozen=True)
class FlowMatrix:
    """``n_lines x n_buses`` map from nodal injections (MW) to line flows (MW).

    The slack column is zero, so ``M @ ones`` is well defined but only
    meaningful for balanced injections.
    """

    M: np.ndarray
    slack_bus: int

    def __array__(self, dtype=None, copy=None):
        return self.M if dtype is None else self.M.astype(dtype)

    @property
    def shape(self):
        return self.M.shape

    def row(self, line: int) -> np.ndarray:
        return self.M[line]

    def flows(self, injection: np.ndarray) -> np.ndarray:
        return np.asarray(injection) @ self.M.T


def build_flow_matrix(case: NetworkCase) -> FlowMatrix:
    """Build ``M = B_f [B_red^-1 0; 0 0]`` with the slack row/column removed."""
    Bbus, Bf = bus_susceptance(case)
    keep = np.array([b for b in range(case.n_buses) if b != case.slack_bus], dtype=int)
    M = np.zeros((case.n_lines, case.n_buses))
    if keep.size:
        Bred = Bbus[np.ix_(keep, keep)]
        cond = np.linalg.cond(Bred)
        if not np.isfinite(cond) or cond > 1e14:
            raise SingularNetworkError(f"reduced bus susceptance matrix is singular (cond={cond:.3g})")
        # B_f restricted to non-slack columns times B_red^-1
        M[:, keep] = np.linalg.solve(Bred.T, Bf[:, keep].T).T
    M.flags.writeable = False
    return FlowMatrix(M, case.slack_bus)


def angle_flows(case: NetworkCase, injection: np.ndarray) -> np.ndarray:
    """Line flows from a direct solve of the reduced angle system ``B theta = p``.

    The slack angle is fixed at zero.  This is the reference computation that
    :func:`build_flow_matrix` must agree with for balanced injections.
    """
    Bbus, Bf = bus_susceptance(case)
    keep = [b for b in range(case.n_buses) if b != case.slack_bus]
    theta = np.zeros(case.n_buses)
    theta[keep] = np.linalg.solve(Bbus[np.ix_(keep, keep)], np.asarray(injection)[keep])
    return Bf @ theta


def line_flow(case: NetworkCase, M, p, omega, policy=None) -> np.ndarray:
    """Line flows ``M (G p_tilde(omega) - d + v + omega)`` in MW.

    ``omega`` is a per-bus fluctuation vector or an ``(n_samples, n_buses)``
    batch.  ``policy`` supplies the generator response; when it is None,
    ``p`` is taken as the realised generator output.
    """
    M = np.asarray(M)
    omega = np.asarray(omega, dtype=float)
    if omega.shape[-1] != case.n_buses:
        raise ValueError(f"omega has {omega.shape[-1]} entries, case has {case.n_buses} buses")
    if M.shape != (case.n_lines, case.n_buses):
        raise ValueError(f"flow matrix shape {M.shape} does not match case")
    if policy is None:
        out = np.broadcast_to(np.asarray(p, dtype=float), omega.shape[:-1] + (case.n_gens,))
    else:
        out = policy.respond(omega)
    if out.shape[-1] != case.n_gens:
        raise ValueError(f"dispatch has {out.shape[-1]} entries, case has {case.n_gens} generators")
    injection = out @ case.gen_bus_matrix.T - case.demand + case.forecast + omega
    return injection @ M.T
