"""
MATPOWER case ingestion and network model.

Reads the restricted MATPOWER ``.m`` dialect (``function mpc = name``,
``mpc.baseMVA``, and the ``bus``/``gen``/``branch``/``gencost`` matrices),
converts everything to per-unit on the system base, drops out-of-service
elements and remaps external bus numbers to contiguous indices.
"""

import functools
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import jsonschema
import networkx as nx
import numpy as np


logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
NETWORK_SCHEMA = Path(__file__).resolve().parent.parent / "schemas" / "network.schema.json"

BUS_KINDS = {1: "pq", 2: "pv", 3: "slack"}


class CaseFormatError(ValueError):
    """Raised when a case file cannot be parsed."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line else ""
        super().__init__(f"{message}{where}")


class NetworkValidationError(ValueError):
    """Raised when parsed data violates a network invariant."""


@dataclass(frozen=True)
class Bus:
    index: int
    external_id: int
    kind: str  # "slack" | "pv" | "pq"
    p_demand: float
    q_demand: float
    g_shunt: float
    b_shunt: float
    v_mag_init: float
    v_ang_init: float  # radians
    v_min: float
    v_max: float
    base_kv: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float
    tap: float = 1.0
    shift: float = 0.0  # radians
    in_service: bool = True
    rate_a: float = 0.0


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost_c2: float
    cost_c1: float
    cost_c0: float
    v_setpoint: float
    p_setpoint: float = 0.0

    def cost(self, p: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        """Quadratic generation cost at per-unit output ``p``."""
        return self.cost_c2 * p * p + self.cost_c1 * p + self.cost_c0


@dataclass(frozen=True)
class Network:
    name: str
    base_mva: float
    buses: Tuple[Bus, ...]
    branches: Tuple[Branch, ...]
    generators: Tuple[Generator, ...]
    # None for a parsed base case
    topology_id: Optional[int] = None

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def slack_bus(self) -> int:
        return next(b.index for b in self.buses if b.kind == "slack")

    @property
    def slack_generator(self) -> int:
        """Index of the first generator sitting on the slack bus."""
        slack = self.slack_bus
        return next(i for i, g in enumerate(self.generators) if g.bus == slack)

    @property
    def non_slack_generators(self) -> List[int]:
        slack_gen = self.slack_generator
        return [i for i in range(self.n_gen) if i != slack_gen]

    @property
    def load_buses(self) -> List[int]:
        """Buses with nonzero base demand, in bus order."""
        return [b.index for b in self.buses if b.p_demand != 0.0 or b.q_demand != 0.0]

    def demand(self) -> Tuple[np.ndarray, np.ndarray]:
        pd = np.array([b.p_demand for b in self.buses], dtype=float)
        qd = np.array([b.q_demand for b in self.buses], dtype=float)
        return pd, qd

    def gen_bus_matrix(self) -> np.ndarray:
        """Bus-by-generator incidence matrix."""
        cg = np.zeros((self.n_bus, self.n_gen))
        for i, gen in enumerate(self.generators):
            cg[gen.bus, i] = 1.0
        return cg

    def with_demand(self, p_demand: np.ndarray, q_demand: np.ndarray) -> "Network":
        buses = tuple(
            replace(b, p_demand=float(p), q_demand=float(q))
            for b, p, q in zip(self.buses, p_demand, q_demand)
        )
        return replace(self, buses=buses)

    def in_service_branches(self) -> Iterator[Tuple[int, Branch]]:
        return ((k, br) for k, br in enumerate(self.branches) if br.in_service)

    def graph(self) -> nx.MultiGraph:
        """Bus graph over in-service branches (parallel lines kept)."""
        g = nx.MultiGraph()
        g.add_nodes_from(range(self.n_bus))
        for k, br in self.in_service_branches():
            g.add_edge(br.from_bus, br.to_bus, key=k)
        return g

    def is_connected(self) -> bool:
        return self.n_bus > 0 and nx.is_connected(self.graph())


@dataclass
class AdmittanceMatrix:
    """Dense bus admittance matrix Y = G + jB."""

    g: np.ndarray
    b: np.ndarray
    # per-branch primitives, rows aligned with Network.branches
    y_ff: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, complex))
    y_ft: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, complex))
    y_tf: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, complex))
    y_tt: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, complex))

    @property
    def y(self) -> np.ndarray:
        return self.g + 1j * self.b

    def branch_flows(self, net: Network, v: np.ndarray) -> np.ndarray:
        """Complex power entering each branch at (from, to) ends; zeros when out of service."""
        f = np.array([br.from_bus for br in net.branches], dtype=int)
        t = np.array([br.to_bus for br in net.branches], dtype=int)
        if len(f) == 0:
            return np.zeros((0, 2), dtype=complex)
        i_f = self.y_ff * v[f] + self.y_ft * v[t]
        i_t = self.y_tf * v[f] + self.y_tt * v[t]
        return np.column_stack([v[f] * np.conj(i_f), v[t] * np.conj(i_t)])


# ---------------------------------------------------------------------------
# .m tokenizer / parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<comment>%[^\n]*)
  | (?P<newline>\n)
  | (?P<ws>[ \t\r]+)
  | (?P<ellipsis>\.\.\.[^\n]*\n)
  | (?P<number>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?Inf\b|NaN\b)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*)
  | (?P<string>'[^'\n]*')
  | (?P<op>[=\[\];,{}()])
    """,
    re.VERBOSE,
)


@dataclass
class _Token:
    kind: str
    text: str
    line: int
    column: int


def _tokenize(text: str) -> List[_Token]:
    tokens: List[_Token] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            raise CaseFormatError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = match.lastgroup or ""
        column = pos - line_start + 1
        if kind == "newline":
            tokens.append(_Token("newline", "\n", line, column))
            line += 1
            line_start = match.end()
        elif kind == "ellipsis":
            line += 1
            line_start = match.end()
        elif kind not in ("ws", "comment"):
            tokens.append(_Token(kind, match.group(), line, column))
        pos = match.end()
    tokens.append(_Token("eof", "", line, pos - line_start + 1))
    return tokens


class _CaseParser:
    """Statement-level parser for the restricted MATPOWER dialect."""

    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.name = ""
        self.scalars: Dict[str, float] = {}
        self.matrices: Dict[str, List[List[float]]] = {}

    def _peek(self) -> _Token:
        return self.tokens[self.pos]

    def _next(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def _expect(self, kind: str, text: Optional[str] = None) -> _Token:
        tok = self._next()
        if tok.kind != kind or (text is not None and tok.text != text):
            wanted = text or kind
            raise CaseFormatError(f"expected {wanted!r}, found {tok.text or tok.kind!r}", tok.line, tok.column)
        return tok

    def _skip_separators(self) -> None:
        while self._peek().kind == "newline" or self._peek().text in (";", ","):
            self.pos += 1

    def parse(self) -> "_CaseParser":
        self._skip_separators()
        while self._peek().kind != "eof":
            self._statement()
            self._skip_separators()
        return self

    def _statement(self) -> None:
        tok = self._expect("ident")
        if tok.text == "function":
            self._expect("ident")
            self._expect("op", "=")
            self.name = self._expect("ident").text
            return
        if not tok.text.startswith("mpc."):
            raise CaseFormatError(f"unsupported statement {tok.text!r}", tok.line, tok.column)
        key = tok.text[4:]
        self._expect("op", "=")
        value = self._peek()
        if value.kind == "number":
            self.scalars[key] = float(self._next().text)
        elif value.kind == "string":
            self._next()
        elif value.text == "[":
            self.matrices[key] = self._matrix()
        elif value.text == "{":
            self._skip_cell()
        else:
            raise CaseFormatError(f"unsupported value for mpc.{key}", value.line, value.column)

    def _matrix(self) -> List[List[float]]:
        self._expect("op", "[")
        rows: List[List[float]] = []
        current: List[float] = []
        while True:
            tok = self._next()
            if tok.kind == "number":
                current.append(float(tok.text))
            elif tok.kind == "newline" or tok.text == ";":
                if current:
                    rows.append(current)
                    current = []
            elif tok.text == ",":
                continue
            elif tok.text == "]":
                if current:
                    rows.append(current)
                return rows
            else:
                raise CaseFormatError(f"unexpected {tok.text or tok.kind!r} in matrix", tok.line, tok.column)

    def _skip_cell(self) -> None:
        start = self._expect("op", "{")
        while self._peek().text != "}":
            if self._peek().kind == "eof":
                raise CaseFormatError("unterminated cell array", start.line, start.column)
            self.pos += 1
        self.pos += 1


def _require_columns(rows: List[List[float]], width: int, section: str) -> None:
    for i, row in enumerate(rows):
        if len(row) < width:
            raise CaseFormatError(f"mpc.{section} row {i + 1} has {len(row)} columns, need {width}")


def parse_case_text(text: str, name: Optional[str] = None) -> Network:
    """Parse MATPOWER source text into a validated per-unit Network."""
    parsed = _CaseParser(text).parse()

    base_mva = parsed.scalars.get("baseMVA")
    if base_mva is None or base_mva <= 0:
        raise CaseFormatError("missing or nonpositive mpc.baseMVA")
    for section in ("bus", "gen", "branch", "gencost"):
        if section not in parsed.matrices:
            raise CaseFormatError(f"missing mpc.{section}")

    bus_rows = parsed.matrices["bus"]
    gen_rows = parsed.matrices["gen"]
    branch_rows = parsed.matrices["branch"]
    cost_rows = parsed.matrices["gencost"]
    _require_columns(bus_rows, 13, "bus")
    _require_columns(gen_rows, 10, "gen")
    _require_columns(branch_rows, 11, "branch")
    _require_columns(cost_rows, 4, "gencost")
    if len(cost_rows) < len(gen_rows):
        raise CaseFormatError(f"mpc.gencost has {len(cost_rows)} rows for {len(gen_rows)} generators")

    index_of: Dict[int, int] = {}
    buses: List[Bus] = []
    for row in bus_rows:
        ext = int(row[0])
        if ext in index_of:
            raise NetworkValidationError(f"duplicate bus id {ext}")
        kind = BUS_KINDS.get(int(row[1]))
        if kind is None:
            raise NetworkValidationError(f"bus {ext} has unsupported type {int(row[1])}")
        v_min, v_max = row[12], row[11]
        if not v_min < v_max:
            raise NetworkValidationError(f"bus {ext} has v_min {v_min} >= v_max {v_max}")
        v_mag, v_ang = row[7], math.radians(row[8])
        if kind == "slack":
            v_mag, v_ang = 1.0, 0.0
        index_of[ext] = len(buses)
        buses.append(
            Bus(
                index=len(buses),
                external_id=ext,
                kind=kind,
                p_demand=row[2] / base_mva,
                q_demand=row[3] / base_mva,
                g_shunt=row[4] / base_mva,
                b_shunt=row[5] / base_mva,
                v_mag_init=min(max(v_mag, v_min), v_max),
                v_ang_init=v_ang,
                v_min=v_min,
                v_max=v_max,
                base_kv=row[9],
            )
        )

    def bus_index(ext: float, what: str) -> int:
        try:
            return index_of[int(ext)]
        except KeyError:
            raise NetworkValidationError(f"{what} references unknown bus {int(ext)}") from None

    generators: List[Generator] = []
    for i, (row, cost) in enumerate(zip(gen_rows, cost_rows)):
        if row[7] <= 0:
            continue
        model, ncost = int(cost[0]), int(cost[3])
        if model != 2:
            raise CaseFormatError(f"gencost row {i + 1}: only polynomial costs (model 2) are supported")
        if ncost > 3:
            raise CaseFormatError(f"gencost row {i + 1}: polynomial degree {ncost - 1} > 2")
        coeffs = list(cost[4 : 4 + ncost])
        if len(coeffs) < ncost:
            raise CaseFormatError(f"gencost row {i + 1}: expected {ncost} coefficients")
        c2, c1, c0 = ([0.0] * (3 - ncost) + coeffs)[-3:]
        p_min, p_max = row[9] / base_mva, row[8] / base_mva
        if not p_min < p_max:
            raise NetworkValidationError(f"generator {i + 1} has p_min >= p_max")
        generators.append(
            Generator(
                bus=bus_index(row[0], f"generator {i + 1}"),
                p_min=p_min,
                p_max=p_max,
                q_min=row[4] / base_mva,
                q_max=row[3] / base_mva,
                cost_c2=c2 * base_mva**2,
                cost_c1=c1 * base_mva,
                cost_c0=c0,
                v_setpoint=row[5],
                p_setpoint=row[1] / base_mva,
            )
        )

    branches: List[Branch] = []
    for i, row in enumerate(branch_rows):
        if row[10] <= 0:
            continue
        if row[3] == 0.0:
            raise NetworkValidationError(f"branch {i + 1} has zero reactance")
        branches.append(
            Branch(
                from_bus=bus_index(row[0], f"branch {i + 1}"),
                to_bus=bus_index(row[1], f"branch {i + 1}"),
                r=row[2],
                x=row[3],
                b_charging=row[4],
                tap=row[8] if row[8] != 0.0 else 1.0,
                shift=math.radians(row[9]),
                in_service=True,
                rate_a=row[5] / base_mva,
            )
        )

    net = Network(
        name=name or parsed.name or "case",
        base_mva=base_mva,
        buses=tuple(buses),
        branches=tuple(branches),
        generators=tuple(generators),
    )
    validate_network(net)
    logger.info(
        f"Parsed {net.name}: {net.n_bus} buses, {len(net.branches)} branches, "
        f"{net.n_gen} generators, {len(net.load_buses)} load buses"
    )
    return net


def parse_case(path: Union[str, Path]) -> Network:
    """Parse a MATPOWER ``.m`` file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Case file not found: {path}")
    return parse_case_text(path.read_text(encoding="utf-8"), name=path.stem)


def validate_network(net: Network) -> None:
    """Check the structural invariants every downstream module relies on."""
    slacks = [b.index for b in net.buses if b.kind == "slack"]
    if len(slacks) != 1:
        raise NetworkValidationError(f"expected exactly one slack bus, found {len(slacks)}")
    if not any(g.bus == slacks[0] for g in net.generators):
        raise NetworkValidationError("slack bus hosts no in-service generator")
    if net.n_gen == 0:
        raise NetworkValidationError("network has no generators")
    if not net.is_connected():
        components = nx.number_connected_components(net.graph())
        raise NetworkValidationError(f"network graph is disconnected ({components} components)")


def build_ybus(net: Network) -> AdmittanceMatrix:
    """Assemble the bus admittance matrix including taps, shifts and line charging."""
    n = net.n_bus
    y = np.zeros((n, n), dtype=complex)
    nbr = len(net.branches)
    y_ff = np.zeros(nbr, dtype=complex)
    y_ft = np.zeros(nbr, dtype=complex)
    y_tf = np.zeros(nbr, dtype=complex)
    y_tt = np.zeros(nbr, dtype=complex)

    for k, br in net.in_service_branches():
        ys = 1.0 / complex(br.r, br.x)
        tap = br.tap * np.exp(1j * br.shift)
        y_tt[k] = ys + 0.5j * br.b_charging
        y_ff[k] = y_tt[k] / (tap * np.conj(tap))
        y_ft[k] = -ys / np.conj(tap)
        y_tf[k] = -ys / tap
        f, t = br.from_bus, br.to_bus
        y[f, f] += y_ff[k]
        y[f, t] += y_ft[k]
        y[t, f] += y_tf[k]
        y[t, t] += y_tt[k]

    for bus in net.buses:
        y[bus.index, bus.index] += complex(bus.g_shunt, bus.b_shunt)

    return AdmittanceMatrix(g=y.real.copy(), b=y.imag.copy(), y_ff=y_ff, y_ft=y_ft, y_tf=y_tf, y_tt=y_tt)


# ---------------------------------------------------------------------------
# JSON interchange
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def _network_validator() -> jsonschema.Draft202012Validator:
    return jsonschema.Draft202012Validator(json.loads(NETWORK_SCHEMA.read_text(encoding="utf-8")))


def schema_problems(doc: Dict[str, Any]) -> List[str]:
    """Schema violations of a decoded network document, one line each."""
    errors = sorted(_network_validator().iter_errors(doc), key=lambda e: str(list(e.absolute_path)))
    return [f"{_json_path(e)}: {e.message}" for e in errors]


def _json_path(error: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in error.absolute_path) or "<root>"


def network_to_dict(net: Network) -> Dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "name": net.name,
        "base_mva": net.base_mva,
        "buses": [asdict(b) for b in net.buses],
        "branches": [asdict(br) for br in net.branches],
        "generators": [asdict(g) for g in net.generators],
        "topology_id": net.topology_id,
    }


def network_from_dict(data: Dict[str, Any]) -> Network:
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise NetworkValidationError(f"unsupported network schema version {version!r}")
    try:
        net = Network(
            name=data["name"],
            base_mva=float(data["base_mva"]),
            buses=tuple(Bus(**b) for b in data["buses"]),
            branches=tuple(Branch(**br) for br in data["branches"]),
            generators=tuple(Generator(**g) for g in data["generators"]),
            topology_id=data.get("topology_id"),
        )
    except (KeyError, TypeError) as e:
        raise NetworkValidationError(f"malformed network document: {e}") from e
    for i, bus in enumerate(net.buses):
        if bus.index != i:
            raise NetworkValidationError(f"bus at position {i} carries index {bus.index}")
    return net


def dumps_network(net: Network) -> str:
    return json.dumps(network_to_dict(net), indent=1, sort_keys=True)


def loads_network(text: str) -> Network:
    data = json.loads(text)
    if isinstance(data, dict) and data.get("schema_version") == SCHEMA_VERSION:
        problems = schema_problems(data)
        if problems:
            raise NetworkValidationError("network document fails its schema: " + "; ".join(problems))
    return network_from_dict(data)


def save_network(net: Network, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps_network(net) + "\n", encoding="utf-8")


def load_network(path: Union[str, Path]) -> Network:
    return loads_network(Path(path).read_text(encoding="utf-8"))


def with_branch_status(net: Network, out_of_service: Sequence[int]) -> Network:
    """Copy of ``net`` with the given branch positions switched off."""
    removed = set(out_of_service)
    branches = tuple(
        replace(br, in_service=False) if k in removed else br for k, br in enumerate(net.branches)
    )
    return replace(net, branches=branches)
