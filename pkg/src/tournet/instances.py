"""Problem instances: generation, distance metrics, tours, TSPLIB ingestion.

All types are immutable after construction and freely shareable across
threads. Node indices are 0-based everywhere inside the package; TSPLIB's
1-based indices are converted at the parsing boundary.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

METRICS = ("euclid", "manhattan", "att", "geo", "ceil2d", "explicit")

# great-circle radius used by the classic TSPLIB geographic distance
GEO_RADIUS = 6378.388
_GEO_PI = 3.141592


class InstanceError(ValueError):
    """Raised for malformed instances or unparsable instance files."""


@dataclass(frozen=True)
class TspInstance:
    coords: np.ndarray  # (n, d) float64
    metric: str = "euclid"
    name: str = ""
    explicit_matrix: np.ndarray | None = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[0] < 2:
            raise InstanceError("instance needs an (n>=2, d) coordinate matrix")
        object.__setattr__(self, "coords", coords)
        if self.metric not in METRICS:
            raise InstanceError(f"unknown metric {self.metric!r}")
        if self.metric == "explicit":
            m = self.explicit_matrix
            if m is None:
                raise InstanceError("explicit metric requires a matrix")
            m = np.asarray(m, dtype=np.float64)
            n = coords.shape[0]
            if m.shape != (n, n):
                raise InstanceError("explicit matrix must be square and match n")
            if np.any(m < 0) or np.any(np.diag(m) != 0):
                raise InstanceError("explicit matrix must be non-negative with zero diagonal")
            object.__setattr__(self, "explicit_matrix", m)
        elif self.explicit_matrix is not None:
            raise InstanceError("explicit_matrix only allowed for metric='explicit'")

    @property
    def n(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class CvrpInstance:
    depot: np.ndarray  # (2,)
    coords: np.ndarray  # (n, 2) customers
    demands: np.ndarray  # (n,) positive
    capacity: float
    name: str = ""

    def __post_init__(self):
        depot = np.asarray(self.depot, dtype=np.float64).reshape(2)
        coords = np.asarray(self.coords, dtype=np.float64)
        demands = np.asarray(self.demands, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 1:
            raise InstanceError("customer coords must be (n>=1, 2)")
        if demands.shape != (coords.shape[0],):
            raise InstanceError("demands must align with customers")
        if self.capacity <= 0 or np.any(demands <= 0) or np.any(demands > self.capacity):
            raise InstanceError("demands must satisfy 0 < D_i <= capacity")
        object.__setattr__(self, "depot", depot)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "demands", demands)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def all_coords(self) -> np.ndarray:
        """Depot followed by the customers; node 0 is the depot."""
        return np.vstack([self.depot[None, :], self.coords])


@dataclass(frozen=True)
class CvrpSolution:
    routes: tuple  # tuple of tuples of combined node indices (1..n)

    def __post_init__(self):
        object.__setattr__(self, "routes", tuple(tuple(int(i) for i in r) for r in self.routes))


def generate_uniform(n: int, seed: int, metric: str = "euclid", name: str = "") -> TspInstance:
    """n nodes i.i.d. uniform on the unit square, deterministic per seed."""
    if n < 2:
        raise InstanceError("need at least 2 nodes")
    rng = np.random.default_rng(seed)
    coords = rng.random((n, 2))
    return TspInstance(coords=coords, metric=metric, name=name or f"uniform{n}-{seed}")


def generate_cvrp(n: int, seed: int, capacity: float = 1.0,
                  demand_choices: Sequence[int] = tuple(range(1, 10)),
                  demand_scale: float = 40.0, name: str = "") -> CvrpInstance:
    """Unit-square depot+customers; demands drawn from choices/scale."""
    rng = np.random.default_rng(seed)
    pts = rng.random((n + 1, 2))
    demands = rng.choice(np.asarray(demand_choices, dtype=np.float64), size=n) / demand_scale
    return CvrpInstance(depot=pts[0], coords=pts[1:], demands=demands,
                        capacity=capacity, name=name or f"cvrp{n}-{seed}")


def _nint(x: float) -> int:
    # C-style nearest int (half away from zero), as TSPLIB specifies
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def _geo_radians(coords: np.ndarray) -> np.ndarray:
    """Convert DD.MM degree-minute pairs to radians (TSPLIB convention)."""
    deg = np.array([[_nint(v) for v in row] for row in coords], dtype=np.float64)
    minutes = coords - deg
    return _GEO_PI * (deg + 5.0 * minutes / 3.0) / 180.0


def distance_matrix(inst: TspInstance) -> np.ndarray:
    """(n, n) symmetric non-negative distances for the instance's metric."""
    c = inst.coords
    if inst.metric == "explicit":
        return inst.explicit_matrix.copy()
    diff = c[:, None, :] - c[None, :, :]
    if inst.metric == "euclid":
        return np.sqrt((diff**2).sum(axis=-1))
    if inst.metric == "manhattan":
        return np.abs(diff).sum(axis=-1)
    if inst.metric == "ceil2d":
        return np.ceil(np.sqrt((diff**2).sum(axis=-1)))
    if inst.metric == "att":
        r = np.sqrt((diff**2).sum(axis=-1) / 10.0)
        t = np.floor(r + 0.5)
        d = np.where(t < r, t + 1.0, t)
        np.fill_diagonal(d, 0.0)
        return d
    if inst.metric == "geo":
        rad = _geo_radians(c)
        lat, lon = rad[:, 0], rad[:, 1]
        q1 = np.cos(lon[:, None] - lon[None, :])
        q2 = np.cos(lat[:, None] - lat[None, :])
        q3 = np.cos(lat[:, None] + lat[None, :])
        arg = np.clip(0.5 * ((1.0 + q1) * q2 - (1.0 - q1) * q3), -1.0, 1.0)
        d = np.floor(GEO_RADIUS * np.arccos(arg) + 1.0)
        np.fill_diagonal(d, 0.0)
        return d
    raise InstanceError(f"unknown metric {inst.metric!r}")


def validate_tour(order: np.ndarray, n: int) -> np.ndarray:
    order = np.asarray(order, dtype=np.int64)
    if order.shape != (n,) or not np.array_equal(np.sort(order), np.arange(n)):
        raise InstanceError("tour is not a permutation of all nodes")
    return order


def tour_length(order: np.ndarray, dm: np.ndarray) -> float:
    """Closed-cycle length: consecutive edges plus the closing edge."""
    order = validate_tour(order, dm.shape[0])
    return float(dm[order, np.roll(order, -1)].sum())


def cvrp_route_length(solution: CvrpSolution, dm: np.ndarray) -> float:
    """Total length of depot-rooted routes; dm indexed with depot at 0."""
    total = 0.0
    for route in solution.routes:
        prev = 0
        for node in route:
            total += dm[prev, node]
            prev = node
        total += dm[prev, 0]
    return float(total)


def validate_cvrp_solution(solution: CvrpSolution, inst: CvrpInstance) -> None:
    seen: list[int] = []
    for route in solution.routes:
        if not route:
            raise InstanceError("empty route")
        load = sum(inst.demands[i - 1] for i in route)
        if load > inst.capacity + 1e-9:
            raise InstanceError("route exceeds capacity")
        seen.extend(route)
    if sorted(seen) != list(range(1, inst.n + 1)):
        raise InstanceError("customers not covered exactly once")


def cvrp_node_features(inst: CvrpInstance) -> np.ndarray:
    """(n+1, 3) model input: coordinates plus demand/capacity (0 for depot)."""
    feats = np.zeros((inst.n + 1, 3))
    feats[:, :2] = inst.all_coords()
    feats[1:, 2] = inst.demands / inst.capacity
    return feats


def normalize_coords(inst: TspInstance) -> TspInstance:
    """Affine map into the unit square with one shared scale for both axes.

    A uniform scale keeps Euclidean/Manhattan optima intact; per-axis
    scaling would distort tours.
    """
    if inst.metric not in ("euclid", "manhattan"):
        raise InstanceError("normalization defined for euclid/manhattan only")
    lo = inst.coords.min(axis=0)
    span = float((inst.coords.max(axis=0) - lo).max())
    if span <= 0:
        raise InstanceError("degenerate instance: all points identical")
    coords = (inst.coords - lo) / span
    return TspInstance(coords=coords, metric=inst.metric, name=inst.name)


# ---------------------------------------------------------------------------
# TSPLIB text format

_WEIGHT_TYPE_TO_METRIC = {
    "EUC_2D": "euclid",
    "ATT": "att",
    "GEO": "geo",
    "CEIL_2D": "ceil2d",
    "EXPLICIT": "explicit",
}
_METRIC_TO_WEIGHT_TYPE = {v: k for k, v in _WEIGHT_TYPE_TO_METRIC.items()}


def parse_tsplib(text: str) -> TspInstance:
    """Parse a TSPLIB document (coords or explicit weights) into an instance."""
    header: dict[str, str] = {}
    sections: dict[str, list[str]] = {}
    current: str | None = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line == "EOF":
            continue
        upper = line.upper()
        if upper.startswith(("NODE_COORD_SECTION", "EDGE_WEIGHT_SECTION",
                             "DISPLAY_DATA_SECTION", "DEMAND_SECTION",
                             "DEPOT_SECTION", "TOUR_SECTION")):
            current = upper.split(":")[0].split()[0]
            sections[current] = []
            continue
        if ":" in line and current is None:
            key, _, val = line.partition(":")
            header[key.strip().upper()] = val.strip()
            continue
        if current is not None:
            sections[current].append(line)
            continue
        # keyword without colon (rare but legal)
        parts = line.split()
        if len(parts) >= 2:
            header[parts[0].upper()] = " ".join(parts[1:])

    for key in ("DIMENSION", "EDGE_WEIGHT_TYPE"):
        if key not in header:
            raise InstanceError(f"missing TSPLIB keyword {key}")
    name = header.get("NAME", "")
    n = int(header["DIMENSION"])
    wtype = header["EDGE_WEIGHT_TYPE"].upper()
    if wtype not in _WEIGHT_TYPE_TO_METRIC:
        raise InstanceError(f"unsupported EDGE_WEIGHT_TYPE {wtype!r}")
    metric = _WEIGHT_TYPE_TO_METRIC[wtype]

    if metric == "explicit":
        fmt = header.get("EDGE_WEIGHT_FORMAT", "FULL_MATRIX").upper()
        if "EDGE_WEIGHT_SECTION" not in sections:
            raise InstanceError("explicit weights require EDGE_WEIGHT_SECTION")
        values = [float(tok) for line in sections["EDGE_WEIGHT_SECTION"] for tok in line.split()]
        matrix = _weights_to_matrix(values, n, fmt)
        coords = _parse_coord_section(sections.get("DISPLAY_DATA_SECTION"), n) \
            if "DISPLAY_DATA_SECTION" in sections else np.zeros((n, 2))
        return TspInstance(coords=coords, metric="explicit", name=name,
                           explicit_matrix=matrix)

    if "NODE_COORD_SECTION" not in sections:
        raise InstanceError("coordinate metric requires NODE_COORD_SECTION")
    coords = _parse_coord_section(sections["NODE_COORD_SECTION"], n)
    return TspInstance(coords=coords, metric=metric, name=name)


def _parse_coord_section(lines: Iterable[str] | None, n: int) -> np.ndarray:
    if lines is None:
        raise InstanceError("missing coordinate section")
    rows = {}
    for line in lines:
        parts = line.split()
        if len(parts) < 3:
            raise InstanceError(f"bad coordinate line: {line!r}")
        rows[int(parts[0])] = (float(parts[1]), float(parts[2]))
    if len(rows) != n:
        raise InstanceError(f"DIMENSION={n} but section has {len(rows)} entries")
    coords = np.zeros((n, 2))
    for idx, xy in rows.items():
        if not (1 <= idx <= n):
            raise InstanceError(f"node index {idx} out of range")
        coords[idx - 1] = xy
    return coords


def _weights_to_matrix(values: list[float], n: int, fmt: str) -> np.ndarray:
    m = np.zeros((n, n))
    if fmt == "FULL_MATRIX":
        if len(values) != n * n:
            raise InstanceError("FULL_MATRIX length mismatch with DIMENSION")
        m = np.asarray(values, dtype=np.float64).reshape(n, n)
    elif fmt == "UPPER_ROW":
        if len(values) != n * (n - 1) // 2:
            raise InstanceError("UPPER_ROW length mismatch with DIMENSION")
        it = iter(values)
        for i in range(n):
            for j in range(i + 1, n):
                m[i, j] = m[j, i] = next(it)
    elif fmt == "LOWER_DIAG_ROW":
        if len(values) != n * (n + 1) // 2:
            raise InstanceError("LOWER_DIAG_ROW length mismatch with DIMENSION")
        it = iter(values)
        for i in range(n):
            for j in range(i + 1):
                m[i, j] = m[j, i] = next(it)
    else:
        raise InstanceError(f"unsupported EDGE_WEIGHT_FORMAT {fmt!r}")
    np.fill_diagonal(m, 0.0)
    return m


def format_tsplib(inst: TspInstance) -> str:
    """Minimal TSPLIB writer; parse(format(x)) round-trips supported fields."""
    out = io.StringIO()
    out.write(f"NAME : {inst.name or 'instance'}\n")
    out.write("TYPE : TSP\n")
    out.write(f"DIMENSION : {inst.n}\n")
    out.write(f"EDGE_WEIGHT_TYPE : {_METRIC_TO_WEIGHT_TYPE[inst.metric]}\n")
    if inst.metric == "explicit":
        out.write("EDGE_WEIGHT_FORMAT : FULL_MATRIX\n")
        out.write("EDGE_WEIGHT_SECTION\n")
        for row in inst.explicit_matrix:
            out.write(" ".join(repr(float(v)) for v in row) + "\n")
    else:
        out.write("NODE_COORD_SECTION\n")
        for i, (x, y) in enumerate(inst.coords, start=1):
            out.write(f"{i} {float(x)!r} {float(y)!r}\n")
    out.write("EOF\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# JSON-lines instance files: one object per line, streamable and diffable.

def instance_to_record(inst: TspInstance | CvrpInstance) -> dict:
    if isinstance(inst, CvrpInstance):
        return {
            "name": inst.name,
            "metric": "euclid",
            "coords": inst.all_coords().tolist(),
            "demands": inst.demands.tolist(),
            "capacity": float(inst.capacity),
        }
    rec = {"name": inst.name, "metric": inst.metric, "coords": inst.coords.tolist()}
    if inst.explicit_matrix is not None:
        rec["matrix"] = inst.explicit_matrix.tolist()
    return rec


def record_to_instance(rec: dict) -> TspInstance | CvrpInstance:
    if "demands" in rec:
        coords = np.asarray(rec["coords"], dtype=np.float64)
        return CvrpInstance(depot=coords[0], coords=coords[1:],
                            demands=np.asarray(rec["demands"], dtype=np.float64),
                            capacity=float(rec["capacity"]),
                            name=rec.get("name", ""))
    return TspInstance(coords=np.asarray(rec["coords"], dtype=np.float64),
                       metric=rec.get("metric", "euclid"),
                       name=rec.get("name", ""),
                       explicit_matrix=np.asarray(rec["matrix"], dtype=np.float64)
                       if "matrix" in rec else None)


def write_instances_jsonl(path, instances: Iterable[TspInstance | CvrpInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_record(inst)) + "\n")


def read_instances_jsonl(path) -> list[TspInstance | CvrpInstance]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(record_to_instance(json.loads(line)))
    return out
