"""Problem configuration files.

Configs are TOML documents (``.cfg``). Every table is validated against the
models below; unknown keys are rejected and errors carry the dotted key
path, or the line and column for syntax errors. See ``docs/config.md`` in
the repository for the full grammar.
"""
from __future__ import annotations

import hashlib
import json
import re
import sys
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

Vec2 = tuple[float, float]


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=False)


class GridConfig(_Model):
    origin: Vec2 = (0.0, 0.0)
    h: float = Field(gt=0)
    cells: tuple[int, int]

    @model_validator(mode="after")
    def _cells(self):
        if min(self.cells) < 1:
            raise ValueError("cells must be positive")
        return self


class RegionConfig(_Model):
    shape: Literal["rectangle", "polygon"] = "rectangle"
    bounds: Optional[tuple[float, float, float, float]] = None
    vertices: Optional[list[Vec2]] = None

    @model_validator(mode="after")
    def _geometry(self):
        if self.shape == "rectangle":
            if self.bounds is None:
                raise ValueError("rectangle needs bounds = [x0, y0, x1, y1]")
            x0, y0, x1, y1 = self.bounds
            if not (x1 > x0 and y1 > y0):
                raise ValueError("bounds must satisfy x1 > x0 and y1 > y0")
        elif self.vertices is None or len(self.vertices) < 3:
            raise ValueError("polygon needs at least three vertices")
        return self


class DomainConfig(RegionConfig):
    pts_per_cell: int = Field(4, ge=1)
    thickness: float = Field(1.0, gt=0)


class PassiveConfig(RegionConfig):
    value: Optional[float] = Field(None, ge=0, le=1)
    material: Optional[int] = Field(None, ge=0)

    @model_validator(mode="after")
    def _one(self):
        if (self.value is None) == (self.material is None):
            raise ValueError("give exactly one of value (pseudodensity) or material (index)")
        return self


class DirichletConfig(_Model):
    box: tuple[float, float, float, float]
    axes: list[Literal["x", "y"]] = ["x", "y"]
    value: Vec2 = (0.0, 0.0)


class LoadConfig(_Model):
    point: Vec2
    vector: Vec2
    port: Literal["in", "out"] = "in"


class MaterialsConfig(_Model):
    lam: Optional[list[float]] = None
    mu: Optional[list[float]] = None
    E: Optional[float] = Field(None, gt=0)
    nu: Optional[float] = Field(None, gt=-1, lt=0.5)
    # densities only matter through body forces; 1 keeps the catalog valid
    rho: list[float] = [1.0]
    names: list[str] = []
    colors: list[str] = []
    floor: float = Field(1e-6, ge=0)

    @model_validator(mode="after")
    def _moduli(self):
        lame = self.lam is not None or self.mu is not None
        if lame == (self.E is not None):
            raise ValueError("give either lam and mu lists or E and nu")
        if lame and (self.lam is None or self.mu is None or len(self.lam) != len(self.mu)):
            raise ValueError("lam and mu must be lists of equal length")
        if self.E is not None and self.nu is None:
            raise ValueError("E needs nu")
        n = len(self.lam) if lame else 1
        if len(self.rho) != n:
            raise ValueError(f"rho must list {n} densities")
        return self

    def lame(self):
        if self.E is not None:
            lam = self.E * self.nu / ((1 + self.nu) * (1 - 2 * self.nu))
            return [lam], [self.E / (2 * (1 + self.nu))]
        return list(self.lam), list(self.mu)


class SolverConfig(_Model):
    n_steps: int = Field(10, ge=1)
    tol: float = Field(1e-7, gt=0)
    max_iter: int = Field(50, ge=1)
    armijo_c: float = Field(1e-4, gt=0, lt=1)
    min_step: float = Field(2.0 ** -10, gt=0, le=1)
    merit: Literal["energy", "residual"] = "energy"
    min_node_weight: float = Field(1e-3, ge=0)
    node_weight: Literal["stiffness", "volume", "reference"] = "stiffness"
    backend: Optional[Literal["cython", "numpy"]] = None
    stride: Optional[int] = Field(None, ge=1)


class DesignConfig(_Model):
    kind: Literal["density", "neural"] = "density"
    init: Optional[float] = Field(None, ge=0, le=1)
    # pseudodensities drawn uniformly from this range (seeded) instead
    init_range: Optional[tuple[float, float]] = None
    seed: int = 0
    n_fourier: int = Field(100, ge=1)
    hidden: list[int] = [40, 40]
    sigma_f: float = Field(10.0, gt=0)
    output_scale: float = Field(1e-2, ge=0)
    load: Optional[str] = None


class ObjectiveConfig(_Model):
    kind: Literal["compliance", "mechanism"] = "compliance"


class ConstraintConfig(_Model):
    kind: Literal["volume", "mass"] = "volume"
    fraction: Optional[float] = Field(None, gt=0, le=1)
    limit: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _one(self):
        if (self.fraction is None) == (self.limit is None):
            raise ValueError("give exactly one of fraction or limit")
        if self.kind == "mass" and self.fraction is not None:
            raise ValueError("a mass constraint needs an absolute limit in kg")
        return self


class ContinuationConfig(_Model):
    q0: float = Field(1.0, ge=1)
    dq: float = Field(0.05, ge=0)
    q_max: float = Field(5.0, ge=1)


class OptimizerConfig(_Model):
    max_iter: int = Field(300, ge=0)
    tol: float = Field(1e-4, gt=0)
    move: float = Field(1e-2, gt=0, le=1)
    lr: float = Field(1e-2, gt=0)
    tau0: float = Field(3.0, gt=0)
    tau_growth: float = Field(1.02, ge=1)
    retry_failed_solve: bool = True
    snapshot_every: int = Field(10, ge=0)
    continuation: ContinuationConfig = ContinuationConfig()


class ProbeConfig(_Model):
    point: Vec2
    length: float = Field(1.0, gt=0)
    # "beam": compare with the large-deflection cantilever reference
    reference: Literal["none", "beam"] = "none"
    max_deviation: Optional[float] = Field(None, gt=0)


class OutputConfig(_Model):
    dir: Optional[str] = None
    render_width: int = Field(800, ge=16, le=8192)
    dump: Literal["all", "final", "none"] = "final"


class GradCheckConfig(_Model):
    q: float = Field(3.0, ge=1)
    h_fd: float = Field(1e-6, gt=0)
    n_components: Optional[int] = Field(None, ge=1)
    tol: float = Field(1e-5, gt=0)
    seed: int = 0
    strides: list[int] = []


class ProblemConfig(_Model):
    name: str
    mode: Literal["forward", "optimize"] = "optimize"
    grid: GridConfig
    domain: DomainConfig
    materials: MaterialsConfig
    passive: list[PassiveConfig] = []
    dirichlet: list[DirichletConfig] = []
    loads: list[LoadConfig] = []
    gravity: Vec2 = (0.0, 0.0)
    solver: SolverConfig = SolverConfig()
    design: DesignConfig = DesignConfig()
    objective: ObjectiveConfig = ObjectiveConfig()
    constraint: Optional[ConstraintConfig] = None
    optimizer: OptimizerConfig = OptimizerConfig()
    probe: Optional[ProbeConfig] = None
    output: OutputConfig = OutputConfig()
    gradcheck: GradCheckConfig = GradCheckConfig()

    @model_validator(mode="after")
    def _consistency(self):
        if not self.dirichlet:
            raise ValueError("at least one dirichlet block is required")
        if not any(l.port == "in" for l in self.loads):
            raise ValueError("at least one input load is required")
        if self.mode == "optimize":
            if self.constraint is None:
                raise ValueError("optimization needs a constraint block")
            if self.constraint.kind == "volume" and self.design.kind != "density":
                raise ValueError("a volume constraint needs a density design")
            if self.objective.kind == "mechanism" and not any(l.port == "out" for l in self.loads):
                raise ValueError("a mechanism objective needs an output load (port = 'out')")
        nmat = len(self.materials.lame()[0])
        if self.design.kind == "density" and nmat != 1:
            raise ValueError("a density design needs exactly one material")
        for p in self.passive:
            if p.material is not None and p.material >= nmat:
                raise ValueError(f"passive material index {p.material} out of range")
        return self

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


# --------------------------------------------------------------------------
# parsing

_AT = re.compile(r"\(at line (\d+), column (\d+)\)")


def _path(loc):
    parts = []
    for item in loc:
        if isinstance(item, int):
            parts[-1] = f"{parts[-1]}[{item}]" if parts else f"[{item}]"
        elif not (isinstance(item, str) and item.startswith("function-")):
            parts.append(str(item))
    return ".".join(parts) or "<root>"


def _validation_errors(exc: ValidationError):
    out = []
    for err in exc.errors():
        msg = err["msg"]
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        elif err["type"] == "missing":
            msg = "required key missing"
        msg = msg.removeprefix("Value error, ")
        out.append((_path(err["loc"]), msg))
    return out


def parse_toml(text: str, source: str = "<config>") -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = _AT.search(str(exc))
        line, col = (int(m.group(1)), int(m.group(2))) if m else (None, None)
        raise ConfigError("<syntax>", f"{source}: {exc}", line=line, column=col) from None


def validate(data: dict) -> ProblemConfig:
    try:
        return ProblemConfig.model_validate(data)
    except ValidationError as exc:
        errs = _validation_errors(exc)
        path, msg = errs[0]
        raise ConfigError(path, msg, errors=errs) from None


def parse_config(text: str, source: str = "<config>", overrides=None) -> ProblemConfig:
    """Parse and validate a config, applying ``key.path=value`` overrides first."""
    data = parse_toml(text, source)
    for item in overrides or ():
        apply_override(data, item)
    return validate(data)


def _override_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_override(data: dict, item: str):
    """Set ``a.b.c=value`` in ``data``; list items are addressed as ``loads.0.vector``."""
    if "=" not in item:
        raise ConfigError("<override>", f"expected key=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for i, part in enumerate(parts[:-1]):
        nxt = parts[i + 1]
        if isinstance(node, list):
            node = _list_item(node, part, key)
            continue
        if part not in node:
            node[part] = [] if nxt.isdigit() else {}
        node = node[part]
    last = parts[-1]
    value = _override_value(raw.strip())
    if isinstance(node, list):
        idx = int(last) if last.isdigit() else None
        if idx is None or idx >= len(node):
            raise ConfigError(key, "list index out of range")
        node[idx] = value
    else:
        node[last] = value


def _list_item(node, part, key):
    if not part.isdigit() or int(part) >= len(node):
        raise ConfigError(key, f"no list item {part!r}")
    return node[int(part)]


def load_config(path, overrides=None) -> ProblemConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path), overrides)


def shipped_configs():
    return sorted(p.name[:-4] for p in resources.files("mpmto.configs").iterdir()
                  if p.name.endswith(".cfg"))


def shipped_config_text(name: str) -> str:
    name = name.replace("-", "_")
    try:
        return resources.files("mpmto.configs").joinpath(f"{name}.cfg").read_text("utf-8")
    except FileNotFoundError:
        raise ConfigError("<name>", f"no shipped config {name!r}; have {shipped_configs()}") from None
