"""Physical parameters of the single particle model.

Parameter files are TOML documents with the sections ``[cell]``,
``[positive]``, ``[negative]``, ``[ocp_positive]`` and ``[ocp_negative]`` plus
a top-level ``schema_version``. See ``data/lg_m50.toml`` for the layout.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from scipy import constants

from .ocp import OCPCurve, ocp_from_section

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

SCHEMA_VERSION = 1
FARADAY = constants.physical_constants["Faraday constant"][0]
GAS_CONSTANT = constants.R

SIDES = ("pos", "neg")

# file key -> ElectrodeParams attribute
_ELECTRODE_KEYS = {
    "diffusivity": "D",
    "particle_radius": "R_p",
    "max_concentration": "c_max",
    "min_concentration": "c_min",
    "volume_fraction": "eps",
    "thickness": "delta",
    "reaction_rate": "k",
    "theta_0": "theta_0",
    "theta_100": "theta_100",
}
_CELL_KEYS = {
    "electrode_area": "A",
    "electrolyte_concentration": "c_e",
    "temperature": "T",
    "nominal_capacity": "nominal_capacity",
    "lower_voltage_cutoff": "v_min",
    "upper_voltage_cutoff": "v_max",
}


class ParameterError(ValueError):
    """Invalid or missing parameter; the message names the offending field(s)."""


@dataclass(frozen=True)
class ElectrodeParams:
    D: float
    R_p: float
    c_max: float
    c_min: float
    eps: float
    delta: float
    k: float
    theta_0: float
    theta_100: float

    def __post_init__(self):
        validate_electrode(dataclasses.asdict(self))

    @property
    def surface_area_density(self) -> float:
        """Active surface area per electrode volume, ``3 eps / R_p`` (1/m)."""
        return 3.0 * self.eps / self.R_p


@dataclass(frozen=True)
class CellParams:
    pos: ElectrodeParams
    neg: ElectrodeParams
    A: float
    c_e: float
    T: float
    ocp_pos: OCPCurve = field(compare=False)
    ocp_neg: OCPCurve = field(compare=False)
    nominal_capacity: float = 18000.0
    v_min: float = 2.5
    v_max: float = 4.2
    F: float = FARADAY
    R_gas: float = GAS_CONSTANT
    source_hash: str = field(default="", compare=False)

    def __post_init__(self):
        for name in ("A", "c_e", "T", "nominal_capacity"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"cell.{name} must be > 0, got {getattr(self, name)}")
        if not self.v_min < self.v_max:
            raise ParameterError("cell.lower_voltage_cutoff must be below cell.upper_voltage_cutoff")
        if self.F != FARADAY or self.R_gas != GAS_CONSTANT:
            raise ParameterError("F and R_gas are fixed at their CODATA values")

    def electrode(self, side: str) -> ElectrodeParams:
        if side == "pos":
            return self.pos
        if side == "neg":
            return self.neg
        raise ValueError(f"side must be 'pos' or 'neg', got {side!r}")

    def ocp(self, side: str) -> OCPCurve:
        return self.ocp_pos if side == "pos" else self.ocp_neg

    def with_electrode(self, side: str, e: ElectrodeParams) -> "CellParams":
        return dataclasses.replace(self, **{side: e})

    @property
    def one_c_current(self) -> float:
        """Current (A) that moves the nominal capacity in one hour."""
        return self.nominal_capacity / 3600.0


@dataclass(frozen=True)
class DegradationScenario:
    eps_factor_pos: float = 1.0
    eps_factor_neg: float = 1.0
    d_factor_pos: float = 1.0
    d_factor_neg: float = 1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if not getattr(self, f.name) > 0:
                raise ParameterError(f"{f.name} must be > 0")


def validate_electrode(values: dict, label: str = "electrode") -> None:
    """Check electrode invariants on a field mapping; raise naming the field."""
    for name in ("D", "R_p", "delta", "k"):
        value = values[name]
        if not (math.isfinite(value) and value > 0):
            raise ParameterError(f"{label}.{name} must be > 0, got {value}")
    if not 0 < values["eps"] <= 1:
        raise ParameterError(f"{label}.eps must be in (0,1], got {values['eps']}")
    c_min, c_max = values["c_min"], values["c_max"]
    if not (c_min > 0 and c_max > 0):
        raise ParameterError(f"{label}.c_min and {label}.c_max must be > 0")
    if not c_min < c_max:
        raise ParameterError(f"{label}.c_min ({c_min}) must be below {label}.c_max ({c_max})")
    for name in ("theta_0", "theta_100"):
        if not 0 <= values[name] <= 1:
            raise ParameterError(f"{label}.{name} must be in [0,1], got {values[name]}")
    if values["theta_0"] == values["theta_100"]:
        raise ParameterError(f"{label}.theta_0 and {label}.theta_100 must differ")


def _read_section(doc: dict, section: str, keys: dict[str, str]) -> dict:
    if section not in doc:
        raise ParameterError(f"missing section [{section}]")
    raw = doc[section]
    out = {}
    for file_key, attr in keys.items():
        if file_key not in raw:
            raise ParameterError(f"missing field {section}.{file_key}")
        value = raw[file_key]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ParameterError(f"field {section}.{file_key} must be a number, got {value!r}")
        out[attr] = float(value)
    return out


def _build_electrode(doc: dict, section: str) -> ElectrodeParams:
    values = _read_section(doc, section, _ELECTRODE_KEYS)
    validate_electrode(values, section)
    return ElectrodeParams(**values)


def parse_parameter_set(text: str, source_hash: str = "") -> CellParams:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParameterError(f"malformed parameter file: {exc}") from exc
    if "schema_version" not in doc:
        raise ParameterError("missing field schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ParameterError(f"unsupported schema_version {doc['schema_version']!r} (expected {SCHEMA_VERSION})")
    pos = _build_electrode(doc, "positive")
    neg = _build_electrode(doc, "negative")
    cell = _read_section(doc, "cell", _CELL_KEYS)
    ocps = {}
    for side in ("positive", "negative"):
        section = f"ocp_{side}"
        if section not in doc:
            raise ParameterError(f"missing section [{section}]")
        try:
            ocps[side] = ocp_from_section(doc[section])
        except ValueError as exc:
            raise ParameterError(f"{section}: {exc}") from exc
    return CellParams(
        pos=pos,
        neg=neg,
        ocp_pos=ocps["positive"],
        ocp_neg=ocps["negative"],
        source_hash=source_hash,
        **cell,
    )


def load_parameter_set(path: str | Path) -> CellParams:
    """Read and validate a TOML parameter file."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ParameterError(f"cannot read parameter file {path}: {exc}") from exc
    digest = hashlib.sha256(data).hexdigest()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParameterError(f"malformed parameter file {path}: not UTF-8") from exc
    return parse_parameter_set(text, source_hash=digest)


def default_parameter_path() -> Path:
    return Path(str(resources.files("spmpinn") / "data" / "lg_m50.toml"))


def load_default() -> CellParams:
    return load_parameter_set(default_parameter_path())


def apply_degradation(base: CellParams, s: DegradationScenario) -> CellParams:
    """Scale active-material fractions and diffusivities of both electrodes."""
    out = {}
    for side in SIDES:
        e = base.electrode(side)
        eps = e.eps * getattr(s, f"eps_factor_{side}")
        if eps > 1:
            raise ParameterError(f"{side}.eps after degradation is {eps:.4g} > 1")
        out[side] = dataclasses.replace(e, eps=eps, D=e.D * getattr(s, f"d_factor_{side}"))
    return dataclasses.replace(base, **out)


def soc_to_initial_stoichiometry(soc0: float, e: ElectrodeParams, side: str) -> float:
    """Initial particle stoichiometry for a cell at state of charge ``soc0``.

    Linear between the electrode's stoichiometric limits. With
    ``theta_0 = c_min/c_max`` and ``theta_100 = 1`` this is the usual
    ``(SOC - c_min/c_max)``-style mapping.
    """
    if side not in SIDES:
        raise ValueError(f"side must be 'pos' or 'neg', got {side!r}")
    if not 0.0 <= soc0 <= 1.0:
        raise ValueError(f"soc0 must be in [0,1], got {soc0}")
    return e.theta_0 + soc0 * (e.theta_100 - e.theta_0)


def electrode_capacity(e: ElectrodeParams, cell: CellParams) -> float:
    """Charge (A s) stored between the stoichiometric limits."""
    return cell.F * cell.A * e.delta * e.eps * e.c_max * abs(e.theta_100 - e.theta_0)


def cell_capacity(cell: CellParams) -> float:
    return min(electrode_capacity(cell.pos, cell), electrode_capacity(cell.neg, cell))


def capacity_and_lam(e_before: ElectrodeParams, e_after: ElectrodeParams, cell: CellParams) -> tuple[float, float, float]:
    q_before = electrode_capacity(e_before, cell)
    q_after = electrode_capacity(e_after, cell)
    return q_before, q_after, 1.0 - q_after / q_before
