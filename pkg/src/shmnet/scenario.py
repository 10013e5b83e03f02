"""World description: plate, material, nodes, damage.

Scenarios are immutable after construction and shared by every other
module. They are loaded from a TOML file with the following layout
(see ``shmnet/scenarios/*.toml`` for complete examples)::

    [plate]
    width = 0.3            # meters
    height = 0.3
    thickness = 0.002
    reflection_order = 4   # image-source bounces, >= 0
    rng_seed = 0

    [material]
    shear_velocity = 3000.0            # m/s
    s0_phase_velocity = 5400.0         # m/s, frequency independent
    a0_dispersion_coefficient = 3.4    # (m/s)/sqrt(Hz): v_p(f) = c*sqrt(f)
    anisotropy = [0.2]                 # g(th) = 1 + a1*cos(2 th) + a2*cos(4 th) + ...
    attenuation_per_meter = 0.0        # nepers/m

    [[nodes]]
    id = "hub"
    position = [0.17, 0.12]            # meters, strictly inside the plate
    role = "hub"                       # exactly one hub per scenario
    capacitance = 100e-12              # transducer C_P, farads
    coupling = 1.0                     # drive volts -> source amplitude

    [[damages]]
    center = [0.15, 0.12]
    radius = 0.02
    velocity_perturbation = -0.10      # fractional local velocity change
    transmission_loss = 0.3            # 0 (transparent) .. 1 (blocking)

All material constants shipped with the example scenarios are synthetic
placeholders chosen to give plausible guided-wave behavior on a CFRP
sheet; they are not measured values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib


class ScenarioError(ValueError):
    """Raised for unparsable or invalid scenario files."""


@dataclass(frozen=True)
class Violation:
    """One broken invariant: which type, which field, which rule."""

    type_name: str
    field: str
    rule: str

    def __str__(self) -> str:
        return f"{self.type_name}.{self.field}: {self.rule}"


@dataclass(frozen=True)
class MaterialModel:
    """Parametric two-mode dispersion model.

    S0 is treated as nondispersive (constant phase velocity); A0 uses
    the flexural-plate law v_p(f) = c * sqrt(f). Anisotropy enters as a
    multiplicative angular gain g(theta) = 1 + sum_k a_k cos(2 k theta)
    applied to both phase and group velocity.
    """

    shear_velocity: float
    s0_phase_velocity: float
    a0_dispersion_coefficient: float
    anisotropy: tuple[float, ...] = ()
    attenuation_per_meter: float = 0.0

    def angular_gain(self, theta):
        """g(theta); accepts scalars or arrays."""
        theta = np.asarray(theta, dtype=float)
        g = np.ones_like(theta)
        for k, a_k in enumerate(self.anisotropy, start=1):
            g = g + a_k * np.cos(2 * k * theta)
        return g if g.ndim else float(g)

    def min_angular_gain(self) -> float:
        th = np.linspace(0.0, 2 * np.pi, 720, endpoint=False)
        return float(np.min(self.angular_gain(th)))


@dataclass(frozen=True)
class TransducerSpec:
    capacitance: float = 100e-12
    electromech_coupling: float = 1.0


@dataclass(frozen=True)
class NodeSpec:
    id: str
    position: tuple[float, float]
    role: str = "sensor"  # "hub" or "sensor"
    transducer: TransducerSpec = field(default_factory=TransducerSpec)


@dataclass(frozen=True)
class DamageSpec:
    center: tuple[float, float]
    radius: float
    velocity_perturbation: float = 0.0
    transmission_loss: float = 0.0


@dataclass(frozen=True)
class PlateScenario:
    width: float
    height: float
    thickness: float
    material: MaterialModel
    nodes: tuple[NodeSpec, ...]
    damages: tuple[DamageSpec, ...] = ()
    reflection_order: int = 0
    rng_seed: int = 0

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(f"unknown node id {node_id!r}")

    @property
    def hub(self) -> NodeSpec:
        hubs = [n for n in self.nodes if n.role == "hub"]
        if len(hubs) != 1:
            raise ScenarioError(f"scenario has {len(hubs)} hub nodes, need exactly 1")
        return hubs[0]

    @property
    def sensors(self) -> tuple[NodeSpec, ...]:
        return tuple(n for n in self.nodes if n.role != "hub")

    def without_damage(self) -> "PlateScenario":
        return PlateScenario(
            self.width, self.height, self.thickness, self.material,
            self.nodes, (), self.reflection_order, self.rng_seed,
        )

    def with_damages(self, damages) -> "PlateScenario":
        return PlateScenario(
            self.width, self.height, self.thickness, self.material,
            self.nodes, tuple(damages), self.reflection_order, self.rng_seed,
        )


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------

def validate(scenario: PlateScenario) -> list[Violation]:
    """Check every invariant; an empty list means the scenario is valid."""
    v: list[Violation] = []

    def bad(type_name, fieldname, rule):
        v.append(Violation(type_name, fieldname, rule))

    if scenario.width <= 0:
        bad("PlateScenario", "width", "width > 0")
    if scenario.height <= 0:
        bad("PlateScenario", "height", "height > 0")
    if scenario.thickness <= 0:
        bad("PlateScenario", "thickness", "thickness > 0")
    if scenario.reflection_order < 0:
        bad("PlateScenario", "reflection_order", "reflection_order >= 0")

    m = scenario.material
    if m.shear_velocity <= 0:
        bad("MaterialModel", "shear_velocity", "v_s > 0")
    if m.s0_phase_velocity <= 0:
        bad("MaterialModel", "s0_phase_velocity", "velocities positive")
    if m.a0_dispersion_coefficient <= 0:
        bad("MaterialModel", "a0_dispersion_coefficient", "velocities positive")
    if m.attenuation_per_meter < 0:
        bad("MaterialModel", "attenuation_per_meter", "attenuation >= 0")
    if m.min_angular_gain() <= 0:
        bad("MaterialModel", "anisotropy", "g(theta) > 0 for all theta")

    seen: set[str] = set()
    for n in scenario.nodes:
        if n.id in seen:
            bad("NodeSpec", "id", "node identifiers unique")
        seen.add(n.id)
        x, y = n.position
        if not (0 < x < scenario.width and 0 < y < scenario.height):
            bad("NodeSpec", "position",
                f"position outside plate (node {n.id!r})")
        if n.role not in ("hub", "sensor"):
            bad("NodeSpec", "role", f"role must be hub or sensor (node {n.id!r})")
        if n.transducer.capacitance <= 0:
            bad("TransducerSpec", "capacitance", "C_P > 0")

    n_hubs = sum(1 for n in scenario.nodes if n.role == "hub")
    if n_hubs > 1:
        bad("NodeSpec", "role", "role hub appears exactly once")

    for d in scenario.damages:
        if d.radius <= 0:
            bad("DamageSpec", "radius", "radius > 0")
        if not (0.0 <= d.transmission_loss <= 1.0):
            bad("DamageSpec", "transmission_loss", "transmission_loss in [0, 1]")
        if d.velocity_perturbation <= -1.0:
            bad("DamageSpec", "velocity_perturbation",
                "velocity perturbation must keep velocity positive")

    return v


# --------------------------------------------------------------------------
# Parsing / serialization
# --------------------------------------------------------------------------

def _pair(value, where: str) -> tuple[float, float]:
    if (not isinstance(value, (list, tuple))) or len(value) != 2:
        raise ScenarioError(f"{where}: expected [x, y] pair, got {value!r}")
    return (float(value[0]), float(value[1]))


def scenario_from_dict(doc: dict) -> PlateScenario:
    try:
        plate = doc["plate"]
        mat = doc["material"]
        nodes_raw = doc["nodes"]
    except KeyError as exc:
        raise ScenarioError(f"missing required section {exc.args[0]!r}") from exc

    material = MaterialModel(
        shear_velocity=float(mat["shear_velocity"]),
        s0_phase_velocity=float(mat["s0_phase_velocity"]),
        a0_dispersion_coefficient=float(mat["a0_dispersion_coefficient"]),
        anisotropy=tuple(float(a) for a in mat.get("anisotropy", [])),
        attenuation_per_meter=float(mat.get("attenuation_per_meter", 0.0)),
    )
    nodes = []
    for i, n in enumerate(nodes_raw):
        try:
            nodes.append(NodeSpec(
                id=str(n["id"]),
                position=_pair(n["position"], f"nodes[{i}].position"),
                role=str(n.get("role", "sensor")),
                transducer=TransducerSpec(
                    capacitance=float(n.get("capacitance", 100e-12)),
                    electromech_coupling=float(n.get("coupling", 1.0)),
                ),
            ))
        except KeyError as exc:
            raise ScenarioError(
                f"nodes[{i}]: missing field {exc.args[0]!r}") from exc
    damages = []
    for i, d in enumerate(doc.get("damages", [])):
        try:
            damages.append(DamageSpec(
                center=_pair(d["center"], f"damages[{i}].center"),
                radius=float(d["radius"]),
                velocity_perturbation=float(d.get("velocity_perturbation", 0.0)),
                transmission_loss=float(d.get("transmission_loss", 0.0)),
            ))
        except KeyError as exc:
            raise ScenarioError(
                f"damages[{i}]: missing field {exc.args[0]!r}") from exc

    scenario = PlateScenario(
        width=float(plate["width"]),
        height=float(plate["height"]),
        thickness=float(plate["thickness"]),
        material=material,
        nodes=tuple(nodes),
        damages=tuple(damages),
        reflection_order=int(plate.get("reflection_order", 0)),
        rng_seed=int(plate.get("rng_seed", 0)),
    )
    violations = validate(scenario)
    if violations:
        raise ScenarioError(
            "invalid scenario: " + "; ".join(str(x) for x in violations))
    return scenario


def loads_scenario(text: str) -> PlateScenario:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"scenario parse error: {exc}") from exc
    return scenario_from_dict(doc)


def load_scenario(path) -> PlateScenario:
    with open(path, "r", encoding="utf-8") as fh:
        return loads_scenario(fh.read())


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)}")


def serialize_scenario(s: PlateScenario) -> str:
    """Emit the scenario back as TOML; load(serialize(x)) == x."""
    lines = ["[plate]"]
    for k, v in [("width", s.width), ("height", s.height),
                 ("thickness", s.thickness),
                 ("reflection_order", s.reflection_order),
                 ("rng_seed", s.rng_seed)]:
        lines.append(f"{k} = {_toml_value(v)}")
    m = s.material
    lines += ["", "[material]"]
    for k, v in [("shear_velocity", m.shear_velocity),
                 ("s0_phase_velocity", m.s0_phase_velocity),
                 ("a0_dispersion_coefficient", m.a0_dispersion_coefficient),
                 ("anisotropy", list(m.anisotropy)),
                 ("attenuation_per_meter", m.attenuation_per_meter)]:
        lines.append(f"{k} = {_toml_value(v)}")
    for n in s.nodes:
        lines += ["", "[[nodes]]",
                  f"id = {_toml_value(n.id)}",
                  f"position = {_toml_value(list(n.position))}",
                  f"role = {_toml_value(n.role)}",
                  f"capacitance = {_toml_value(n.transducer.capacitance)}",
                  f"coupling = {_toml_value(n.transducer.electromech_coupling)}"]
    for d in s.damages:
        lines += ["", "[[damages]]",
                  f"center = {_toml_value(list(d.center))}",
                  f"radius = {_toml_value(d.radius)}",
                  f"velocity_perturbation = {_toml_value(d.velocity_perturbation)}",
                  f"transmission_loss = {_toml_value(d.transmission_loss)}"]
    return "\n".join(lines) + "\n"


def save_scenario(s: PlateScenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_scenario(s))


def builtin_scenario_path(name: str):
    """Path to one of the scenario files shipped with the package."""
    p = resources.files("shmnet.scenarios").joinpath(f"{name}.toml")
    if not p.is_file():
        raise FileNotFoundError(f"no builtin scenario named {name!r}")
    return p


def load_builtin(name: str) -> PlateScenario:
    return loads_scenario(builtin_scenario_path(name).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# Spatial grid
# --------------------------------------------------------------------------

def spatial_grid(scenario: PlateScenario, resolution: float) -> np.ndarray:
    """Regular pixel-center grid covering the plate, shape (n, 2).

    Pixels are ``resolution``-sized cells anchored at the origin; the
    grid has ceil(width/res) * ceil(height/res) pixels in row-major
    order (y varies slowest). Deterministic for equal inputs.
    """
    if not (0 < resolution < min(scenario.width, scenario.height)):
        raise ValueError(
            f"resolution must be in (0, {min(scenario.width, scenario.height)}), "
            f"got {resolution}")
    nx = math.ceil(round(scenario.width / resolution, 9))
    ny = math.ceil(round(scenario.height / resolution, 9))
    xs = (np.arange(nx) + 0.5) * resolution
    ys = (np.arange(ny) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, ys)  # row-major: y slowest
    return np.column_stack([gx.ravel(), gy.ravel()])


def grid_shape(scenario: PlateScenario, resolution: float) -> tuple[int, int]:
    """(ny, nx) for the grid produced by :func:`spatial_grid`."""
    nx = math.ceil(round(scenario.width / resolution, 9))
    ny = math.ceil(round(scenario.height / resolution, 9))
    return ny, nx
