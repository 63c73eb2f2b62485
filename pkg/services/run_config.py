"""Experiment config files and initial-field construction.

A config is INI text read with configparser (``=`` only, no interpolation)::

    [manifold]
    kind = flat_torus_t2
    resolution = 32, 32

    [initial]
    kind = killing_rotation + fourier_mode
    terms = sin 1 cos 0 0 1.0

Unknown sections and keys are rejected with the line they appear on.
"""

from __future__ import annotations

import configparser
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from config import OUT_DIR
from services.fields import band_limited_random
from services.flow import FlowConfig
from services.manifold import KIND_DIMENSIONS, ManifoldData, ManifoldSpec, ManifoldSpecError
from services.snapshot import read_snapshot

logger = logging.getLogger(__name__)


INITIAL_KINDS = ("killing_rotation", "gradient_of", "fourier_mode", "random_bandlimited", "file")
TORUS_KINDS = ("flat_torus_t2", "perturbed_torus")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if key:
            where.append(f"key '{key}'")
        if line:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.key = key
        self.line = line


@dataclass(frozen=True)
class FourierTerm:
    fx: str
    kx: int
    fy: str
    ky: int
    component: int
    amplitude: float


@dataclass(frozen=True)
class InitialSpec:
    kinds: tuple[str, ...]
    amplitude: float = 1.0
    axis: str = "z"
    direction: str = "x"
    function: str = "cos_theta"
    terms: tuple[FourierTerm, ...] = ()
    seed: int = 0
    modes: int = 3
    path: Path | None = None


@dataclass(frozen=True)
class OutputSpec:
    directory: Path
    plotdata: bool = True
    kernel_snapshots: bool = False


@dataclass(frozen=True)
class SpectrumSpec:
    count: int | None = None


@dataclass(frozen=True)
class VerifySpec:
    levels: tuple[tuple[int, ...], ...] = ()
    samples: int = 20
    min_order: float = 1.9
    t_end: float = 1.0


@dataclass(frozen=True)
class EinsteinSpec:
    phi: str = "zero"
    c: float = 0.0
    t_end: float = 2.0
    sample_stride: int = 10


@dataclass(frozen=True)
class RunConfig:
    manifold: ManifoldSpec
    flow: FlowConfig
    initial: InitialSpec
    output: OutputSpec
    spectrum: SpectrumSpec = SpectrumSpec()
    verify: VerifySpec = VerifySpec()
    einstein: EinsteinSpec = EinsteinSpec()
    source: Path | None = None
    echo: dict[str, dict[str, str]] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# value converters
# ---------------------------------------------------------------------------

def _to_float(raw: str, key: str, line: int) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"Expected a number, got {raw!r}", key, line) from None
    if not math.isfinite(value):
        raise ConfigError(f"Expected a finite number, got {raw!r}", key, line)
    return value


def _to_int(raw: str, key: str, line: int) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"Expected an integer, got {raw!r}", key, line) from None


def _to_bool(raw: str, key: str, line: int) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"Expected true/false, got {raw!r}", key, line)


def _to_resolution(raw: str, key: str, line: int) -> tuple[int, ...]:
    parts = [p for p in re.split(r"[,\sx]+", raw.strip()) if p]
    if not parts:
        raise ConfigError("Empty resolution", key, line)
    return tuple(_to_int(p, key, line) for p in parts)


def _to_levels(raw: str, key: str, line: int) -> tuple[tuple[int, ...], ...]:
    return tuple(_to_resolution(chunk, key, line) for chunk in raw.split(";") if chunk.strip())


def _to_terms(raw: str, key: str, line: int) -> tuple[FourierTerm, ...]:
    terms = []
    for chunk in raw.split(";"):
        parts = chunk.split()
        if not parts:
            continue
        if len(parts) != 6 or parts[0] not in ("sin", "cos") or parts[2] not in ("sin", "cos"):
            raise ConfigError(
                f"Fourier term must read '<sin|cos> <kx> <sin|cos> <ky> <component> <amplitude>', got {chunk.strip()!r}",
                key,
                line,
            )
        component = _to_int(parts[4], key, line)
        if component not in (0, 1):
            raise ConfigError(f"Fourier component must be 0 or 1, got {component}", key, line)
        terms.append(
            FourierTerm(
                fx=parts[0],
                kx=_to_int(parts[1], key, line),
                fy=parts[2],
                ky=_to_int(parts[3], key, line),
                component=component,
                amplitude=_to_float(parts[5], key, line),
            )
        )
    if not terms:
        raise ConfigError("At least one Fourier term is required", key, line)
    return tuple(terms)


def _optional_float(raw: str, key: str, line: int) -> float | None:
    if raw.strip().lower() in ("", "auto", "none"):
        return None
    return _to_float(raw, key, line)


def _optional_int(raw: str, key: str, line: int) -> int | None:
    if raw.strip().lower() in ("", "all", "none"):
        return None
    return _to_int(raw, key, line)


def _to_str(raw: str, key: str, line: int) -> str:
    return raw.strip()


SCHEMA: dict[str, dict[str, Callable[[str, str, int], object]]] = {
    "manifold": {
        "kind": _to_str,
        "resolution": _to_resolution,
        "perturbation_amplitude": _to_float,
    },
    "flow": {
        "variant": _to_str,
        "integrator": _to_str,
        "dt_safety": _to_float,
        "t_end": _optional_float,
        "k_max": _to_int,
        "kernel_tol": _optional_float,
    },
    "initial": {
        "kind": _to_str,
        "amplitude": _to_float,
        "axis": _to_str,
        "direction": _to_str,
        "function": _to_str,
        "terms": _to_terms,
        "seed": _to_int,
        "modes": _to_int,
        "path": _to_str,
    },
    "output": {
        "directory": _to_str,
        "monitor_stride": _to_int,
        "checkpoint_stride": _to_int,
        "plotdata": _to_bool,
        "kernel_snapshots": _to_bool,
    },
    "spectrum": {
        "count": _optional_int,
    },
    "verify": {
        "levels": _to_levels,
        "samples": _to_int,
        "min_order": _to_float,
        "t_end": _to_float,
    },
    "einstein": {
        "phi": _to_str,
        "c": _to_float,
        "t_end": _to_float,
        "sample_stride": _to_int,
    },
}
REQUIRED = {"manifold": ("kind", "resolution"), "initial": ("kind",)}


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Line of every key, for error messages; configparser does not keep them."""
    index: dict[tuple[str, str], int] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
        elif "=" in line and not line.startswith(("#", ";")):
            index.setdefault((section, line.split("=", 1)[0].strip().lower()), lineno)
    return index


def _read_sections(text: str) -> dict[str, dict[str, tuple[str, int]]]:
    parser = configparser.ConfigParser(
        delimiters=("=",),
        comment_prefixes=("#", ";"),
        inline_comment_prefixes=("#",),
        strict=True,
        empty_lines_in_values=False,
        interpolation=None,
        default_section="kvflow:defaults",
    )
    try:
        parser.read_string(text)
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"Duplicate section [{exc.section}]", exc.section.lower(), exc.lineno) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError("Duplicate key", f"{exc.section.lower()}.{exc.option}", exc.lineno) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("Key outside of any section", None, exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"Cannot parse {line}", None, lineno) from None

    lines = _key_lines(text)
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    for name in parser.sections():
        sec = name.lower()
        if sec not in SCHEMA:
            raise ConfigError(f"Unknown section [{sec}]", sec, _section_line(text, name))
        if sec in sections:
            raise ConfigError(f"Duplicate section [{sec}]", sec, _section_line(text, name))
        sections[sec] = {}
        for key, value in parser.items(name, raw=True):
            lineno = lines.get((sec, key), 0)
            if key not in SCHEMA[sec]:
                raise ConfigError(f"Unknown key in [{sec}]", f"{sec}.{key}", lineno)
            sections[sec][key] = (value.strip(), lineno)
    return sections


def _section_line(text: str, name: str) -> int | None:
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if raw.strip().replace(" ", "") == f"[{name}]":
            return lineno
    return None


def parse_config_text(text: str, source: Path | None = None, seed: int | None = None) -> RunConfig:
    sections = _read_sections(text)
    for sec, keys in REQUIRED.items():
        for key in keys:
            if key not in sections.get(sec, {}):
                raise ConfigError("Missing required key", f"{sec}.{key}")

    values: dict[str, dict[str, object]] = {}
    lines: dict[str, int] = {}
    for sec, entries in sections.items():
        values[sec] = {}
        for key, (raw, lineno) in entries.items():
            values[sec][key] = SCHEMA[sec][key](raw, f"{sec}.{key}", lineno)
            lines[f"{sec}.{key}"] = lineno

    man = values["manifold"]
    manifold = ManifoldSpec(
        kind=str(man["kind"]),
        resolution=tuple(man["resolution"]),
        perturbation_amplitude=float(man.get("perturbation_amplitude", 0.0)),
    )
    try:
        manifold.validate()
    except ManifoldSpecError as exc:
        raise ConfigError(str(exc), "manifold", lines.get("manifold.kind")) from exc

    fl = values.get("flow", {})
    out = values.get("output", {})
    flow = FlowConfig(
        **{k: v for k, v in fl.items()},
        **{k: out[k] for k in ("monitor_stride", "checkpoint_stride") if k in out},
    )
    try:
        flow.validate()
    except ValueError as exc:
        raise ConfigError(str(exc), "flow") from exc

    initial = _initial_spec(values["initial"], lines, manifold, source, seed)

    base = source.parent if source is not None else Path.cwd()
    default_dir = OUT_DIR / (source.stem if source is not None else "run")
    directory = Path(str(out["directory"])) if "directory" in out else default_dir
    if not directory.is_absolute() and "directory" in out:
        directory = base / directory
    output = OutputSpec(
        directory=directory,
        plotdata=bool(out.get("plotdata", True)),
        kernel_snapshots=bool(out.get("kernel_snapshots", False)),
    )

    ver = values.get("verify", {})
    verify = VerifySpec(**ver)
    for level in verify.levels:
        try:
            ManifoldSpec(manifold.kind, level, manifold.perturbation_amplitude).validate()
        except ManifoldSpecError as exc:
            raise ConfigError(str(exc), "verify.levels", lines.get("verify.levels")) from exc
    if verify.samples < 1:
        raise ConfigError("samples must be >= 1", "verify.samples", lines.get("verify.samples"))

    ein = values.get("einstein", {})
    einstein = EinsteinSpec(**ein)
    if einstein.phi not in SCALAR_FUNCTIONS:
        raise ConfigError(f"Unknown scalar function {einstein.phi!r}", "einstein.phi", lines.get("einstein.phi"))
    if einstein.t_end <= 0.0 or einstein.sample_stride < 1:
        raise ConfigError("t_end must be positive and sample_stride >= 1", "einstein")

    spectrum = SpectrumSpec(**values.get("spectrum", {}))
    if spectrum.count is not None and spectrum.count < 1:
        raise ConfigError("count must be >= 1", "spectrum.count", lines.get("spectrum.count"))

    echo = {sec: {key: raw for key, (raw, _ln) in entries.items()} for sec, entries in sections.items()}
    echo.setdefault("initial", {})["seed"] = str(initial.seed)
    return RunConfig(
        manifold=manifold,
        flow=flow,
        initial=initial,
        output=output,
        spectrum=spectrum,
        verify=verify,
        einstein=einstein,
        source=source,
        echo=echo,
    )


def _initial_spec(
    ini: dict[str, object],
    lines: dict[str, int],
    manifold: ManifoldSpec,
    source: Path | None,
    seed: int | None,
) -> InitialSpec:
    kind_line = lines.get("initial.kind")
    kinds = tuple(k.strip() for k in str(ini["kind"]).split("+") if k.strip())
    if not kinds:
        raise ConfigError("Empty initial kind", "initial.kind", kind_line)
    for kind in kinds:
        if kind not in INITIAL_KINDS:
            raise ConfigError(f"Unknown initial kind {kind!r}, expected {INITIAL_KINDS}", "initial.kind", kind_line)

    if "killing_rotation" in kinds and manifold.kind == "perturbed_torus":
        raise ConfigError("perturbed_torus has no built-in Killing rotation", "initial.kind", kind_line)
    if "fourier_mode" in kinds:
        if manifold.kind not in TORUS_KINDS:
            raise ConfigError(f"fourier_mode needs a torus, not {manifold.kind}", "initial.kind", kind_line)
        if "terms" not in ini:
            raise ConfigError("fourier_mode needs 'terms'", "initial.terms", kind_line)
    function = str(ini.get("function", "cos_theta"))
    if "gradient_of" in kinds:
        entry = SCALAR_FUNCTIONS.get(function)
        if entry is None or manifold.kind not in entry.kinds:
            raise ConfigError(
                f"Scalar function {function!r} is not defined on {manifold.kind}",
                "initial.function",
                lines.get("initial.function", kind_line),
            )
    path = None
    if "file" in kinds:
        if "path" not in ini:
            raise ConfigError("file initial field needs 'path'", "initial.path", kind_line)
        path = Path(str(ini["path"]))
        if not path.is_absolute() and source is not None:
            path = source.parent / path
        if not path.is_file():
            raise ConfigError(f"Initial field file not found: {path}", "initial.path", lines.get("initial.path"))

    axis = str(ini.get("axis", "z"))
    if axis not in ("x", "y", "z"):
        raise ConfigError(f"axis must be x, y or z, got {axis!r}", "initial.axis", lines.get("initial.axis"))
    direction = str(ini.get("direction", "x"))
    if direction not in ("x", "y"):
        raise ConfigError(f"direction must be x or y, got {direction!r}", "initial.direction", lines.get("initial.direction"))
    modes = int(ini.get("modes", 3))
    if modes < 1:
        raise ConfigError("modes must be >= 1", "initial.modes", lines.get("initial.modes"))

    return InitialSpec(
        kinds=kinds,
        amplitude=float(ini.get("amplitude", 1.0)),
        axis=axis,
        direction=direction,
        function=function,
        terms=tuple(ini.get("terms", ())),
        seed=int(seed) if seed is not None else int(ini.get("seed", 0)),
        modes=modes,
        path=path,
    )


def parse_config(path: Path, seed: int | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Config not found: {path}")
    config = parse_config_text(path.read_text(encoding="utf-8"), source=path, seed=seed)
    logger.info(
        "ConfigDiag: %s kind=%s resolution=%s variant=%s initial=%s seed=%d",
        path,
        config.manifold.kind,
        config.manifold.resolution,
        config.flow.variant,
        "+".join(config.initial.kinds),
        config.initial.seed,
    )
    return config


# ---------------------------------------------------------------------------
# named scalar functions and initial fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarFunction:
    kinds: tuple[str, ...]
    value: Callable[[np.ndarray], np.ndarray]
    # chart partial derivatives, shape (m, N)
    partials: Callable[[np.ndarray], np.ndarray]


ALL_KINDS = tuple(KIND_DIMENSIONS)

SCALAR_FUNCTIONS: dict[str, ScalarFunction] = {
    "zero": ScalarFunction(ALL_KINDS, lambda c: np.zeros(c.shape[1]), lambda c: np.zeros_like(c)),
    "one": ScalarFunction(ALL_KINDS, lambda c: np.ones(c.shape[1]), lambda c: np.zeros_like(c)),
    "cos_theta": ScalarFunction(
        ("unit_sphere_s2",),
        lambda c: np.cos(c[0]),
        lambda c: np.stack([-np.sin(c[0]), np.zeros_like(c[1])]),
    ),
    "sin_theta_cos_phi": ScalarFunction(
        ("unit_sphere_s2",),
        lambda c: np.sin(c[0]) * np.cos(c[1]),
        lambda c: np.stack([np.cos(c[0]) * np.cos(c[1]), -np.sin(c[0]) * np.sin(c[1])]),
    ),
    "cos_chi": ScalarFunction(
        ("unit_sphere_s3",),
        lambda c: np.cos(c[0]),
        lambda c: np.stack([-np.sin(c[0]), np.zeros_like(c[1]), np.zeros_like(c[2])]),
    ),
    "sin_x": ScalarFunction(TORUS_KINDS, lambda c: np.sin(c[0]), lambda c: np.stack([np.cos(c[0]), np.zeros_like(c[1])])),
    "cos_x": ScalarFunction(TORUS_KINDS, lambda c: np.cos(c[0]), lambda c: np.stack([-np.sin(c[0]), np.zeros_like(c[1])])),
    "neg_cos_x": ScalarFunction(TORUS_KINDS, lambda c: -np.cos(c[0]), lambda c: np.stack([np.sin(c[0]), np.zeros_like(c[1])])),
    "sin_y": ScalarFunction(TORUS_KINDS, lambda c: np.sin(c[1]), lambda c: np.stack([np.zeros_like(c[0]), np.cos(c[1])])),
    "cos_y": ScalarFunction(TORUS_KINDS, lambda c: np.cos(c[1]), lambda c: np.stack([np.zeros_like(c[0]), -np.sin(c[1])])),
}


def scalar_function(name: str, manifold: ManifoldData) -> np.ndarray:
    entry = SCALAR_FUNCTIONS.get(name)
    if entry is None or manifold.kind not in entry.kinds:
        raise ConfigError(f"Scalar function {name!r} is not defined on {manifold.kind}", "function")
    return entry.value(manifold.grid.coords)


def exact_gradient(name: str, manifold: ManifoldData) -> np.ndarray:
    """grad f = g^-1 df from the closed-form chart partials."""
    entry = SCALAR_FUNCTIONS.get(name)
    if entry is None or manifold.kind not in entry.kinds:
        raise ConfigError(f"Scalar function {name!r} is not defined on {manifold.kind}", "function")
    return np.einsum("ijn,jn->in", manifold.metric.g_inv, entry.partials(manifold.grid.coords))


def killing_rotation(manifold: ManifoldData, axis: str = "z", direction: str = "x") -> np.ndarray:
    x = manifold.zeros_vector()
    c = manifold.grid.coords
    if manifold.kind == "flat_torus_t2":
        x[0 if direction == "x" else 1] = 1.0
        return x
    if manifold.kind == "unit_sphere_s2":
        th, ph = c
        if axis == "z":
            x[1] = 1.0
        elif axis == "x":
            x[0] = -np.sin(ph)
            x[1] = -np.cos(ph) * np.cos(th) / np.sin(th)
        else:
            x[0] = np.cos(ph)
            x[1] = -np.sin(ph) * np.cos(th) / np.sin(th)
        return x
    if manifold.kind == "unit_sphere_s3":
        # rotation of the (x1, x2) plane of R^4
        x[2] = 1.0
        return x
    raise ConfigError(f"No built-in Killing rotation on {manifold.kind}", "initial.kind")


def fourier_field(terms: tuple[FourierTerm, ...], manifold: ManifoldData) -> np.ndarray:
    if manifold.kind not in TORUS_KINDS:
        raise ConfigError(f"fourier_mode needs a torus, not {manifold.kind}", "initial.kind")
    xc, yc = manifold.grid.coords
    trig = {"sin": np.sin, "cos": np.cos}
    x = manifold.zeros_vector()
    for t in terms:
        x[t.component] += t.amplitude * trig[t.fx](t.kx * xc) * trig[t.fy](t.ky * yc)
    return x


def build_initial(spec: InitialSpec, manifold: ManifoldData) -> np.ndarray:
    x = manifold.zeros_vector()
    for kind in spec.kinds:
        if kind == "killing_rotation":
            x += spec.amplitude * killing_rotation(manifold, spec.axis, spec.direction)
        elif kind == "gradient_of":
            x += spec.amplitude * exact_gradient(spec.function, manifold)
        elif kind == "fourier_mode":
            x += fourier_field(spec.terms, manifold)
        elif kind == "random_bandlimited":
            x += spec.amplitude * band_limited_random(manifold, spec.seed, spec.modes)
        elif kind == "file":
            _kind, _res, field_x = read_snapshot(spec.path, manifold)
            x += field_x
        else:
            raise ConfigError(f"Unknown initial kind {kind!r}", "initial.kind")
    logger.info("ConfigDiag: initial field %s on %s built", "+".join(spec.kinds), manifold.kind)
    return x
