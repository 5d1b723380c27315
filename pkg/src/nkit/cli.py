# Copyright (c) 2026 The nkit developers
#
# Permission is hereby granted, free of charge, to any person obtaining a copy
# of this software and associated documentation files (the "Software"), to deal
# in the Software without restriction, including without limitation the rights
# to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
# copies of the Software, and to permit persons to whom the Software is
# furnished to do so, subject to the following conditions:
#
# The above copyright notice and this permission notice shall be included in
# all copies or substantial portions of the Software.
#
# THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
# IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
# FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
# AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
# LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
# OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
# SOFTWARE.

"""Command line interface: ``nkit run <config>``, ``nkit presets`` and
``nkit dump-matrix <config>``.

A run configuration is a TOML (or JSON) file naming an experiment preset and
overriding any of its tables. Exit codes: 0 when every gated verdict passes,
1 when one does not, 2 for configuration errors and 3 when a solver does not
converge. A run stopped by any other invalid input, such as a source too
close to the boundary or a series outside its hypothesis, records a FAIL
verdict and exits with 1.
"""

import argparse
import contextlib
import copy
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import (Any, Callable, Dict, Iterator, List, NamedTuple,
                    Optional, Sequence, Tuple)

import numpy as np

from . import __version__
from .elliptic_op import assemble, manufactured_convergence, solve
from .errors import ConfigError, NonConvergenceError
from .estimates import (FAIL, PASS, Verdict, annulus,
                        empirical_hoelder_exponent, hoelder_seminorm,
                        level_set_scaling, verify_difference_decay,
                        verify_gradient_decay, verify_pointwise_decay)
from .export import write_csv, write_field, write_json, write_matrix
from .grid_core import (CoefficientField, Constant, Domain, HoelderBump,
                        SmoothWave, generate_coefficient, make_domain)
from .neumann_fn import (Mollifier, adjoint_column, check_reciprocity,
                         constant_coeff_column, mollified_source,
                         neumann_column, neumann_columns, oracle_deviation,
                         representation_probe, representation_solution)
from .photoacoustic import (AnomalyConfig, OpticalMedium, absorbed_energy,
                            anomaly_kernel, asymptotic_convergence_study,
                            flux_balance, forward_operator,
                            identity_check_mainasym, invert_mu_a,
                            remainder_bound_fit, solve_background,
                            solve_with_anomaly, synthetic_absorbed_energy,
                            two_term_series)
from .potentials import (ReferenceShape, gauss_flux, newtonian_potential,
                         single_layer_normal, surface_closure)

try:
    import tomllib
except ImportError:  # pragma: no cover
    import tomli as tomllib  # type: ignore

logger = logging.getLogger(__name__)

THREADS_VARIABLE = "NKIT_THREADS"
EXIT_OK = 0
EXIT_VERDICT = 1
EXIT_CONFIG = 2
EXIT_NONCONVERGENCE = 3
FLUX_BALANCE_LIMIT = 1e-6


def _option(default, *types):
    """A config field with its accepted JSON/TOML types."""
    metadata = {"types": types}
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda: copy.deepcopy(default),
                     metadata=metadata)
    return field(default=default, metadata=metadata)


@dataclass(frozen=True)
class DomainSection:
    extent: Any = _option(1.0, float, list)
    n: int = _option(33, int)


@dataclass(frozen=True)
class CoefficientSection:
    kind: str = _option("constant", str)
    gamma0: float = _option(1.0, float)
    a: float = _option(0.5, float)
    z: Optional[list] = _option(None, list)
    lam: float = _option(0.5, float)


@dataclass(frozen=True)
class OperatorSection:
    k: float = _option(1.0, float)
    mean: str = _option("harmonic", str)


@dataclass(frozen=True)
class SolverSection:
    method: str = _option("cocg", str)
    tol: float = _option(1e-8, float)
    max_iterations: int = _option(0, int)


@dataclass(frozen=True)
class NeumannSection:
    eps_cells: float = _option(3.0, float)
    source: Optional[list] = _option(None, list)
    probe: Optional[list] = _option(None, list)
    reading: str = _option("mollified", str)


@dataclass(frozen=True)
class StudySection:
    r_min: float = _option(0.0, float)
    r_max: float = _option(0.0, float)
    n_shells: int = _option(6, int)
    compensate: bool = _option(True, bool)
    order: int = _option(1, int)
    n_thresholds: int = _option(8, int)
    k_values: list = _option([0.5, 1.0, 4.0], list)
    ns: list = _option([17, 33, 65], list)
    manufactured_k: float = _option(1.0, float)
    eps_list: list = _option([0.12, 0.09, 0.06], list)
    resolution: int = _option(16, int)
    reciprocity_tol: float = _option(1e-6, float)
    oracle_tol: float = _option(0.1, float)
    representation_k: float = _option(1.0, float)
    representation_tol: float = _option(1e-3, float)
    identity_tol: float = _option(5e-2, float)
    series_tol: float = _option(0.1, float)
    inversion_tol: float = _option(0.1, float)


@dataclass(frozen=True)
class MediumSection:
    mu_s: float = _option(10.0, float)
    omega_over_c: float = _option(1.0, float)
    illumination: dict = _option({"z-": 1.0}, dict)


@dataclass(frozen=True)
class AnomalySection:
    z: Optional[list] = _option(None, list)
    eps: float = _option(0.08, float)
    shape: str = _option("ball", str)
    size: list = _option([0.5], list)
    mu_a: float = _option(0.2, float)
    model: str = _option("simplified", str)
    volume_fraction: bool = _option(False, bool)
    frozen_mu_s: bool = _option(False, bool)


SECTIONS = {"domain": DomainSection, "coefficient": CoefficientSection,
            "operator": OperatorSection, "solver": SolverSection,
            "neumann": NeumannSection, "study": StudySection,
            "medium": MediumSection, "anomaly": AnomalySection}
TOP_LEVEL = {"experiment": (str,), "seed": (int,), "threads": (int,),
             "output": (str,)}


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    domain: DomainSection
    coefficient: CoefficientSection
    operator: OperatorSection
    solver: SolverSection
    neumann: NeumannSection
    study: StudySection
    medium: MediumSection
    anomaly: AnomalySection
    seed: int = 0
    threads: int = 1
    output: str = "nkit-output"

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """sha256 of the canonical JSON of everything that shapes results;
        ``threads`` and ``output`` are left out."""
        content = self.to_dict()
        del content["threads"], content["output"]
        canonical = json.dumps(content, sort_keys=True,
                               separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _check_type(where: str, value: Any, types: Tuple[type, ...],
                nullable: bool = False):
    names = " or ".join(t.__name__ for t in types)
    if value is None:
        if nullable:
            return
        raise ConfigError("{} should be {}, got null".format(where, names))
    if isinstance(value, bool) and bool not in types:
        raise ConfigError("{} should be {}, got a boolean".format(where,
                                                                  names))
    accepted = types + ((int,) if float in types else ())
    if not isinstance(value, accepted):
        raise ConfigError("{} should be {}, got {!r}".format(where, names,
                                                             value))


def _build_section(name: str, cls, *tables: Dict[str, Any]):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values: Dict[str, Any] = {}
    for table in tables:
        if not isinstance(table, dict):
            raise ConfigError("[{}] should be a table".format(name))
        for key, value in table.items():
            if key not in fields:
                raise ConfigError("Unknown key {!r} in [{}]".format(key, name))
            types = fields[key].metadata["types"]
            _check_type("{}.{}".format(name, key), value, types,
                        nullable=fields[key].default is None)
            if (float in types and isinstance(value, int) and
                    not isinstance(value, bool)):
                value = float(value)
            values[key] = value
    return cls(**values)


def _threads(configured: Optional[int]) -> int:
    """$NKIT_THREADS, else the configured count, else the CPU count."""
    variable = os.environ.get(THREADS_VARIABLE)
    if variable is not None:
        try:
            configured = int(variable)
        except ValueError:
            raise ConfigError("{} should be an integer, got {!r}".format(
                THREADS_VARIABLE, variable))
    elif configured is None:
        configured = os.cpu_count() or 1
    if configured < 1:
        raise ConfigError("threads should be at least 1, got {}".format(
            configured))
    return configured


def resolve_config(raw: Dict[str, Any]) -> RunConfig:
    """Layer the file tables over the preset defaults and validate."""
    if not isinstance(raw, dict):
        raise ConfigError("A configuration should be a table")
    for key, value in raw.items():
        if key in TOP_LEVEL:
            _check_type(key, value, TOP_LEVEL[key],
                        nullable=key == "threads")
        elif key not in SECTIONS:
            raise ConfigError("Unknown key {!r}".format(key))
    experiment = raw.get("experiment")
    if experiment is None:
        raise ConfigError("The configuration does not name an experiment")
    if experiment not in PRESETS:
        raise ConfigError("Unknown experiment {!r}; see 'nkit presets'"
                          "".format(experiment))
    defaults = PRESETS[experiment].tables
    sections = {name: _build_section(name, cls, defaults.get(name, {}),
                                     raw.get(name, {}))
                for name, cls in SECTIONS.items()}
    return RunConfig(experiment=experiment, seed=raw.get("seed", 0),
                     threads=_threads(raw.get("threads")),
                     output=raw.get("output", "nkit-output"), **sections)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        if path.suffix == ".json":
            raw = json.loads(path.read_text(encoding="utf-8"))
        else:
            with path.open("rb") as handle:
                raw = tomllib.load(handle)
    except OSError as error:
        raise ConfigError("Cannot read {}: {}".format(path, error))
    except (ValueError, tomllib.TOMLDecodeError) as error:
        raise ConfigError("Cannot parse {}: {}".format(path, error))
    return resolve_config(raw)


# Builders from configuration sections to library objects.

def _domain(config: RunConfig) -> Domain:
    return make_domain(config.domain.extent, config.domain.n)


def _coefficient(config: RunConfig, domain: Domain,
                 kind: Optional[str] = None) -> CoefficientField:
    section = config.coefficient
    kind = kind or section.kind
    if kind == "constant":
        spec = Constant(section.gamma0, section.lam)
    elif kind == "hoelder_bump":
        z = domain.center if section.z is None else tuple(section.z)
        spec = HoelderBump(section.gamma0, section.a, z, section.lam)
    elif kind == "smooth_wave":
        spec = SmoothWave(section.gamma0, section.a, section.lam)
    else:
        raise ConfigError("Unknown coefficient kind {!r}".format(kind))
    return generate_coefficient(domain, spec)


def _eps_mol(config: RunConfig, domain: Domain) -> float:
    return config.neumann.eps_cells * max(domain.h)


def _point(value: Optional[list], fallback) -> Tuple[float, ...]:
    return tuple(fallback) if value is None else tuple(value)


def _solver_kwargs(config: RunConfig) -> Dict[str, Any]:
    return {"threads": config.threads, "method": config.solver.method}


def _medium(config: RunConfig, domain: Domain) -> OpticalMedium:
    section = config.medium
    return OpticalMedium(domain, section.mu_s, section.omega_over_c,
                         section.illumination)


def _anomaly(config: RunConfig, domain: Domain) -> AnomalyConfig:
    section = config.anomaly
    shape = ReferenceShape(section.shape, tuple(section.size),
                           config.study.resolution)
    return AnomalyConfig(_point(section.z, domain.center), section.eps,
                         shape, section.mu_a)


def _range(config: RunConfig) -> Tuple[Optional[float], Optional[float]]:
    study = config.study
    return (study.r_min or None, study.r_max or None)


class Table(NamedTuple):
    header: List[str]
    rows: List[Sequence[Any]]


@dataclass
class ExperimentResult:
    verdicts: List[Verdict] = field(default_factory=list)
    tables: Dict[str, Table] = field(default_factory=dict)
    documents: Dict[str, Any] = field(default_factory=dict)
    fields: Dict[str, Tuple[Any, Dict[str, Any]]] = field(
        default_factory=dict)


RADIAL_HEADER = ["r [length]", "shell_statistic [field units]",
                 "nodes [count]"]


def _radial_table(verdict: Verdict) -> Table:
    rows = [] if verdict.samples is None else verdict.samples.rows()
    return Table(RADIAL_HEADER, rows)


def _threshold_verdict(name: str, value: float, limit: float,
                       **details) -> Verdict:
    status = PASS if value < limit else FAIL
    logger.info("%s: %.3e against %.1e -> %s", name, value, limit, status)
    details.update({"value": value, "limit": limit})
    return Verdict(name, status, details=details)


# Experiments. Each one computes everything before anything is written.

def _decay_study(config: RunConfig, stage) -> ExperimentResult:
    domain = _domain(config)
    gamma = _coefficient(config, domain)
    with stage("column"):
        column = neumann_column(
            gamma, config.operator.k, _point(config.neumann.source,
                                             domain.center),
            _eps_mol(config, domain), config.solver.tol,
            mean=config.operator.mean, **_solver_kwargs(config))
    with stage("fit"):
        verdict = verify_pointwise_decay(
            column, *_range(config), config.study.n_shells,
            compensate=config.study.compensate)
    return ExperimentResult([verdict], {"decay": _radial_table(verdict)})


def _column_pair(config: RunConfig, domain: Domain, gamma, stage):
    y = _point(config.neumann.source, domain.center)
    kwargs = dict(mean=config.operator.mean, **_solver_kwargs(config))
    with stage("columns"):
        col_n = neumann_column(gamma, config.operator.k, y,
                               _eps_mol(config, domain), config.solver.tol,
                               **kwargs)
        col_n0 = constant_coeff_column(gamma, config.operator.k, y,
                                       _eps_mol(config, domain),
                                       config.solver.tol, **kwargs)
    return col_n, col_n0


def _difference_study(config: RunConfig, stage) -> ExperimentResult:
    domain = _domain(config)
    gamma = _coefficient(config, domain)
    col_n, col_n0 = _column_pair(config, domain, gamma, stage)
    with stage("fit"):
        verdict = verify_difference_decay(col_n, col_n0, gamma.lam,
                                          *_range(config),
                                          config.study.n_shells)
        region = annulus(domain, col_n.y, 0.0,
                         domain.distance_to_boundary(col_n.y) / 2)
        measured = hoelder_seminorm(gamma, region, gamma.lam,
                                    seed=config.seed)
        shell = region & annulus(domain, col_n.y, 2 * col_n.eps_mol,
                                 np.inf)
        try:
            observed = empirical_hoelder_exponent(
                col_n.field - col_n0.field, shell, seed=config.seed).slope
        except ValueError:
            # N - N0 vanishes for a constant coefficient
            observed = None
    return ExperimentResult(
        [verdict], {"difference_decay": _radial_table(verdict)},
        {"hoelder": {"declared": gamma.seminorm, "measured": measured,
                     "lam": gamma.lam,
                     "observed_difference_exponent": observed}})


def _gradient_study(config: RunConfig, stage) -> ExperimentResult:
    domain = _domain(config)
    gamma = _coefficient(config, domain)
    col_n, col_n0 = _column_pair(config, domain, gamma, stage)
    with stage("fit"):
        verdict = verify_gradient_decay(col_n, col_n0, gamma.lam,
                                        config.operator.k,
                                        config.study.order, *_range(config),
                                        config.study.n_shells)
    return ExperimentResult([verdict],
                            {"gradient_decay": _radial_table(verdict)})


def _levelset_study(config: RunConfig, stage) -> ExperimentResult:
    domain = _domain(config)
    gamma = _coefficient(config, domain)
    with stage("column"):
        column = neumann_column(
            gamma, config.operator.k, _point(config.neumann.source,
                                             domain.center),
            _eps_mol(config, domain), config.solver.tol,
            mean=config.operator.mean, **_solver_kwargs(config))
    result = ExperimentResult()
    with stage("fit"):
        for order, name in ((0, "levelset_value"),
                            (1, "levelset_gradient")):
            verdict = level_set_scaling(
                column, order=order, n_thresholds=config.study.n_thresholds,
                compensate=config.study.compensate,
                r_min=config.study.r_min or None,
                r_max=config.study.r_max or None)
            result.verdicts.append(verdict)
            result.tables[name] = Table(
                ["threshold [field units]", "measure [length^3]"],
                [] if verdict.curve is None else verdict.curve.rows())
    return result


def _reciprocity_points(config: RunConfig, domain: Domain):
    offset = np.array([0.15 * domain.min_extent, 0.0, 0.0])
    center = np.array(domain.center)
    y = _point(config.neumann.source, center - offset)
    x = _point(config.neumann.probe, center + offset)
    return y, x


def _reciprocity_check(config: RunConfig, stage) -> ExperimentResult:
    domain = _domain(config)
    y, x = _reciprocity_points(config, domain)
    eps_mol = _eps_mol(config, domain)
    rows, errors = [], []
    with stage("columns"):
        for kind in ("constant", "hoelder_bump", "smooth_wave"):
            gamma = _coefficient(config, domain, kind)
            for k in config.study.k_values:
                kwargs = dict(mean=config.operator.mean,
                              **_solver_kwargs(config))
                col_n = neumann_column(gamma, k, y, eps_mol,
                                       config.solver.tol, **kwargs)
                col_star = adjoint_column(gamma, k, x, eps_mol,
                                          config.solver.tol, **kwargs)
                error = check_reciprocity(col_n, col_star,
                                          config.neumann.reading)
                node_error = check_reciprocity(col_n, col_star, "node")
                rows.append((kind, float(k), error, node_error))
                errors.append(error)
    verdict = _threshold_verdict("reciprocity", max(errors),
                                 config.study.reciprocity_tol,
                                 reading=config.neumann.reading)
    return ExperimentResult([verdict], {"reciprocity": Table(
        ["coefficient", "k [1/length^2]", "relative_error [1]",
         "node_relative_error [1]"], rows)})


SUPERPOSITION_OFFSETS = ((0.1875, 0.0, 0.0), (0.0, -0.1875, 0.0),
                         (0.0, 0.0, 0.25), (-0.1875, -0.1875, 0.0),
                         (0.25, 0.25, 0.25))


def _superposition(config: RunConfig, gamma: CoefficientField,
                   eps_mol: float) -> Tuple[List[Tuple[float, ...]], float]:
    """One primal column per node of a mollified source, summed, against a
    direct solve at five points."""
    domain = gamma.domain
    k = config.study.representation_k
    op = assemble(gamma, k, mean=config.operator.mean)
    f = mollified_source(domain, domain.center, eps_mol)
    direct, _ = solve(op, f, config.solver.tol, method=config.solver.method)
    sources = [domain.coord(index) for index in np.argwhere(f.values != 0)]
    columns = neumann_columns(gamma, k, sources, eps_mol, config.solver.tol,
                              operator=op, **_solver_kwargs(config))
    summed = representation_solution(gamma, k, f, columns)
    rows, errors = [], []
    for offset in SUPERPOSITION_OFFSETS:
        point = tuple(np.array(domain.center) +
                      np.array(offset) * domain.min_extent)
        s, d = summed.at(point), direct.at(point)
        rows.append(point + (s.real, s.imag, d.real, d.imag))
        errors.append(abs(s - d) / abs(d))
    logger.debug("Superposition of %d columns", len(columns))
    return rows, max(errors)


def _representation_check(config: RunConfig, stage) -> ExperimentResult:
    result = ExperimentResult()
    study = config.study
    with stage("manufactured"):
        runs, orders = manufactured_convergence(
            study.ns, study.manufactured_k, config.solver.tol,
            method=config.solver.method)
    status = PASS if all(1.8 <= order <= 2.2 for order in orders) else FAIL
    result.verdicts.append(Verdict("manufactured_order", status,
                                   details={"orders": orders}))
    result.tables["manufactured"] = Table(
        ["n [nodes]", "h [length]", "linf_error [1]", "iterations [count]"],
        [(run.n, run.h, run.error, run.report.iterations) for run in runs])

    domain = _domain(config)
    gamma = generate_coefficient(domain, Constant(config.coefficient.gamma0,
                                                  config.coefficient.lam))
    eps_mol = _eps_mol(config, domain)
    k = config.operator.k
    with stage("oracle"):
        column = neumann_column(gamma, k, domain.center, eps_mol,
                                config.solver.tol,
                                **_solver_kwargs(config))
        r_min = study.r_min or 0.125 * domain.min_extent
        r_max = study.r_max or 0.25 * domain.min_extent
        deviation = oracle_deviation(column, r_min, r_max)
    result.verdicts.append(_threshold_verdict(
        "free_space_oracle", deviation, study.oracle_tol,
        r_range=[r_min, r_max]))

    y, x = _reciprocity_points(config, domain)
    with stage("representation"):
        op = assemble(gamma, k, mean=config.operator.mean)
        f = mollified_source(domain, y, eps_mol)
        u, _ = solve(op, f, config.solver.tol, method=config.solver.method)
        probes = [x, tuple(2 * np.array(domain.center) - np.array(x))]
        op_star = assemble(gamma, k, adjoint=True,
                           mean=config.operator.mean)
        columns = [adjoint_column(gamma, k, point, eps_mol,
                                  config.solver.tol, operator=op_star,
                                  **_solver_kwargs(config))
                   for point in probes]
        probe = representation_probe(gamma, k, f, columns)
        direct = np.array([
            np.sum(Mollifier(point, eps_mol).density(domain) * u.values) *
            domain.cell_volume for point in probes])
        error = float(np.max(np.abs(probe - direct) / np.abs(direct)))
    result.verdicts.append(_threshold_verdict(
        "representation_probe", error, study.reciprocity_tol))
    result.tables["representation"] = Table(
        ["x [length]", "y [length]", "z [length]", "probe_re [field]",
         "probe_im [field]", "direct_re [field]", "direct_im [field]"],
        [tuple(point) + (p.real, p.imag, d.real, d.imag)
         for point, p, d in zip(probes, probe, direct)])

    with stage("superposition"):
        rows, error = _superposition(config, gamma, eps_mol)
    result.verdicts.append(_threshold_verdict(
        "representation_solution", error, study.representation_tol,
        k=study.representation_k))
    result.tables["superposition"] = Table(
        ["x [length]", "y [length]", "z [length]", "sum_re [field]",
         "sum_im [field]", "direct_re [field]", "direct_im [field]"], rows)
    return result


def _potential_shapes(resolution: int) -> List[ReferenceShape]:
    return [ReferenceShape.ball(1.0, resolution),
            ReferenceShape.ellipsoid((1.0, 0.75, 0.5), resolution),
            ReferenceShape.cube(0.5, resolution)]


def _potentials_check(config: RunConfig, stage) -> ExperimentResult:
    rows = []
    gated = []
    with stage("quadrature"):
        for shape in _potential_shapes(config.study.resolution):
            volume = newtonian_potential(shape, method="volume")
            surface = newtonian_potential(shape, method="surface")
            dipole = float(np.linalg.norm(single_layer_normal(shape)))
            flux = gauss_flux(shape)
            rows.extend([
                (shape.kind, "newtonian_volume", volume),
                (shape.kind, "newtonian_surface", surface),
                (shape.kind, "single_layer_norm", dipole),
                (shape.kind, "gauss_flux", flux)])
            gated.append(("gauss_flux_" + shape.kind, abs(flux - 1), 1e-6))
            gated.append(("closed_surface_" + shape.kind,
                          surface_closure(shape), 1e-6))
            if shape.kind == "ball":
                exact = newtonian_potential(shape)
                gated.append(("newtonian_ball", abs(volume - exact), 1e-3))
                gated.append(("single_layer_ball", dipole, 1e-6))
    failed = [name for name, error, limit in gated if not error < limit]
    verdict = Verdict("potentials", FAIL if failed else PASS,
                      details={"checks": {name: error for name, error, _
                                          in gated}, "failed": failed})
    return ExperimentResult([verdict], {"potentials": Table(
        ["shape", "quantity", "value [length^2 or 1]"], rows)})


def _pat_setup(config: RunConfig):
    domain = _domain(config)
    return domain, _medium(config, domain), _anomaly(config, domain)


def _pat_forward(config: RunConfig, stage) -> ExperimentResult:
    domain, medium, anomaly = _pat_setup(config)
    section = config.anomaly
    with stage("forward"):
        background = solve_background(medium, config.solver.tol,
                                      method=config.solver.method)
        fluence = solve_with_anomaly(medium, anomaly, config.solver.tol,
                                     model=section.model,
                                     volume_fraction=section.volume_fraction,
                                     method=config.solver.method)
        absorbed = absorbed_energy(fluence, anomaly, section.volume_fraction)
    balance = max(flux_balance(background, medium),
                  flux_balance(fluence, medium, section.volume_fraction))
    phi0_z, phi_z = background.at(anomaly.z), fluence.at(anomaly.z)
    result = ExperimentResult([_threshold_verdict(
        "flux_balance", balance, FLUX_BALANCE_LIMIT)])
    result.tables["fluence_at_z"] = Table(
        ["quantity", "re [fluence]", "im [fluence]", "abs [fluence]"],
        [("phi0", phi0_z.real, phi0_z.imag, abs(phi0_z)),
         ("phi", phi_z.real, phi_z.imag, abs(phi_z))])
    result.documents["diagnostics"] = {
        "absorption_reduces_fluence": abs(phi_z) < abs(phi0_z),
        "background_iterations": background.report.iterations,
        "anomaly_iterations": fluence.report.iterations}
    result.fields["phi0"] = (background.field, {"quantity": "phi0"})
    result.fields["phi"] = (fluence.field, {"quantity": "phi",
                                            "model": section.model})
    result.fields["absorbed"] = (absorbed.field, {"quantity": "A",
                                                  "mu_a": anomaly.mu_a})
    return result


def _pat_mainasym(config: RunConfig, stage) -> ExperimentResult:
    domain, medium, anomaly = _pat_setup(config)
    section = config.anomaly
    with stage("identity"):
        check = identity_check_mainasym(
            medium, anomaly, tol=config.solver.tol, model=section.model,
            volume_fraction=section.volume_fraction,
            eps_mol=_eps_mol(config, domain), **_solver_kwargs(config))
    if anomaly.mu_a == 0:
        verdict = _threshold_verdict("mainasym_absolute",
                                     check.absolute_error, 1e-8)
    else:
        verdict = _threshold_verdict(
            "mainasym", check.relative_error, config.study.identity_tol,
            mollified_error=check.mollified_error)
    rows = [tuple(point) + (lhs.real, lhs.imag, rhs.real, rhs.imag,
                            moll.real, moll.imag)
            for point, lhs, rhs, moll in zip(check.points, check.lhs,
                                             check.rhs, check.lhs_mollified)]
    return ExperimentResult([verdict], {"mainasym": Table(
        ["x [length]", "y [length]", "z [length]", "lhs_re [fluence]",
         "lhs_im [fluence]", "rhs_re [fluence]", "rhs_im [fluence]",
         "lhs_mollified_re [fluence]", "lhs_mollified_im [fluence]"],
        rows)})


def _pat_convergence(config: RunConfig, stage) -> ExperimentResult:
    domain, medium, anomaly = _pat_setup(config)
    section = config.anomaly
    with stage("study"):
        study = asymptotic_convergence_study(
            medium, anomaly, config.study.eps_list, config.solver.tol,
            model=section.model, volume_fraction=section.volume_fraction,
            **_solver_kwargs(config))
    return ExperimentResult([study.verdict], {"asymptotic_convergence": Table(
        ["eps [1]", "delta_dir_re [fluence]", "delta_dir_im [fluence]",
         "delta_asy_re [fluence]", "delta_asy_im [fluence]",
         "abs_err [fluence]", "rel_err [1]", "error_scale [1]"],
        study.table())})


def _pat_series(config: RunConfig, stage) -> ExperimentResult:
    domain, medium, anomaly = _pat_setup(config)
    section = config.anomaly
    kwargs = _solver_kwargs(config)
    with stage("kernel"):
        kernel = anomaly_kernel(medium, anomaly, _eps_mol(config, domain),
                                config.solver.tol, **kwargs)
    with stage("series"):
        background = solve_background(medium, config.solver.tol,
                                      method=config.solver.method)
        series = two_term_series(medium, anomaly, kernel,
                                 tol=config.solver.tol, model=section.model,
                                 frozen_mu_s=section.frozen_mu_s,
                                 background=background, **kwargs)
        halved = two_term_series(medium, anomaly.with_mu_a(anomaly.mu_a / 2),
                                 kernel, tol=config.solver.tol,
                                 model=section.model,
                                 frozen_mu_s=section.frozen_mu_s,
                                 background=background, **kwargs)
        fit = remainder_bound_fit(kernel, config.coefficient.lam)
    passed = (series.deviation < config.study.series_tol and
              halved.deviation < series.deviation)
    verdict = Verdict("two_term_series", PASS if passed else FAIL, details={
        "deviation": series.deviation,
        "deviation_half_mu_a": halved.deviation,
        "leading_deviation": series.leading_deviation,
        "contraction": series.contraction,
        "remainder_ratio": series.remainder_ratio,
        "limit": config.study.series_tol})
    points = kernel.nodes.coordinates
    rows = [tuple(point) + (s.real, s.imag, d.real, d.imag, f.real, f.imag)
            for point, s, d, f in zip(points, series.series.values,
                                      series.direct.values,
                                      series.leading.values)]
    return ExperimentResult(
        [verdict], {"series": Table(
            ["x [length]", "y [length]", "z [length]", "series_re [fluence]",
             "series_im [fluence]", "direct_re [fluence]",
             "direct_im [fluence]", "leading_re [fluence]",
             "leading_im [fluence]"], rows)},
        {"remainder_fit": fit._asdict()})


def _pat_invert_demo(config: RunConfig, stage) -> ExperimentResult:
    domain, medium, anomaly = _pat_setup(config)
    section = config.anomaly
    with stage("forward"):
        background = solve_background(medium, config.solver.tol,
                                      method=config.solver.method)
        fluence = solve_with_anomaly(medium, anomaly, config.solver.tol,
                                     model=section.model,
                                     method=config.solver.method)
        absorbed = absorbed_energy(fluence, anomaly)
    with stage("inversion"):
        recovered = invert_mu_a(absorbed, background, anomaly, medium)
        synthetic = invert_mu_a(
            synthetic_absorbed_energy(medium, anomaly, background),
            background, anomaly, medium)
    error = abs(recovered.estimate - anomaly.mu_a) / anomaly.mu_a
    synthetic_error = abs(synthetic.estimate - anomaly.mu_a) / anomaly.mu_a
    verdicts = [
        _threshold_verdict("inversion", error, config.study.inversion_tol,
                           zeroth_iterate=recovered.history[0]),
        _threshold_verdict("inversion_self_consistency", synthetic_error,
                           1e-6)]
    estimate = {"mu_a_true": anomaly.mu_a, "estimate": recovered.estimate,
                "relative_error": error, "converged": recovered.converged,
                "contracted": recovered.contracted,
                "iterations": recovered.iterations,
                "history": recovered.history,
                "synthetic_estimate": synthetic.estimate}
    return ExperimentResult(verdicts, documents={"estimate": estimate})


class Preset(NamedTuple):
    description: str
    tables: Dict[str, Dict[str, Any]]
    runner: Callable[[RunConfig, Any], ExperimentResult]


PRESETS: Dict[str, Preset] = {
    "decay-study": Preset(
        "Pointwise decay |N(x, y)| ~ |x - y|^-1",
        {"domain": {"n": 65}, "operator": {"k": 100.0}}, _decay_study),
    "difference-study": Preset(
        "Decay of N - N0 for a Hölder coefficient",
        {"domain": {"n": 65}, "coefficient": {"kind": "hoelder_bump"}},
        _difference_study),
    "gradient-study": Preset(
        "Decay of grad(N - N0) for a smooth coefficient",
        {"domain": {"n": 65}, "coefficient": {"kind": "smooth_wave",
                                              "a": 0.3}},
        _gradient_study),
    "levelset-study": Preset(
        "Level set measures of |N| and |grad N|",
        {"domain": {"n": 65}, "operator": {"k": 100.0}}, _levelset_study),
    "reciprocity-check": Preset(
        "N(x, y) = conj(N*(y, x)) over coefficients and shifts",
        {"solver": {"tol": 1e-10}}, _reciprocity_check),
    "representation-check": Preset(
        "Manufactured solution order, free space oracle and the "
        "representation formula",
        {"operator": {"k": 100.0}, "solver": {"tol": 1e-10},
         "neumann": {"eps_cells": 2.0}}, _representation_check),
    "potentials-check": Preset(
        "Newtonian and single layer potentials of reference shapes",
        {"study": {"resolution": 32}}, _potentials_check),
    "pat-forward": Preset(
        "Fluence with and without the anomaly, absorbed energy",
        {"domain": {"n": 65}, "solver": {"tol": 1e-10}}, _pat_forward),
    "pat-mainasym": Preset(
        "Representation identity for Phi - Phi0",
        {"domain": {"n": 65}, "solver": {"tol": 1e-10}}, _pat_mainasym),
    "pat-convergence": Preset(
        "Asymptotic formula against direct perturbations",
        {"domain": {"n": 97}, "solver": {"tol": 1e-10}}, _pat_convergence),
    "pat-series": Preset(
        "Two term series of the anomaly equation",
        {"domain": {"n": 65}, "solver": {"tol": 1e-10}}, _pat_series),
    "pat-invert-demo": Preset(
        "mu_a recovery from absorbed energy",
        {"domain": {"n": 81}, "solver": {"tol": 1e-10},
         "anomaly": {"eps": 0.06}}, _pat_invert_demo),
}


def list_presets() -> List[str]:
    return list(PRESETS)


class _Stages:
    def __init__(self):
        self.times: Dict[str, float] = {}

    @contextlib.contextmanager
    def __call__(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.times[name] = self.times.get(name, 0.0) + elapsed
            logger.info("Stage %s took %.2f s", name, elapsed)


def _write_outputs(config: RunConfig, result: ExperimentResult,
                   stages: _Stages) -> List[str]:
    output = Path(config.output)
    output.mkdir(parents=True, exist_ok=True)
    written = []
    for name, table in result.tables.items():
        written.append(write_csv(output / (name + ".csv"), table.header,
                                 table.rows).name)
    for name, document in result.documents.items():
        written.append(write_json(output / (name + ".json"), document).name)
    for name, (values, metadata) in result.fields.items():
        binary, sidecar = write_field(output / (name + ".bin"), values,
                                      **metadata)
        written.extend([binary.name, sidecar.name])
    verdicts = [verdict.to_dict() for verdict in result.verdicts]
    written.append(write_json(output / "verdicts.json", verdicts).name)
    manifest = {"config_hash": config.config_hash(),
                "version": __version__,
                "experiment": config.experiment,
                "threads": config.threads,
                "stages": stages.times,
                "verdicts": {verdict.name: verdict.status
                             for verdict in result.verdicts},
                "outputs": sorted(written),
                "config": config.to_dict()}
    write_json(output / "manifest.json", manifest)
    return written


def run(config_path) -> int:
    """Run the experiment of a configuration file; returns the exit code."""
    try:
        config = load_config(config_path)
    except ConfigError as error:
        logger.error("%s", error)
        return EXIT_CONFIG
    logger.info("Running %s (config %s, %d threads)", config.experiment,
                config.config_hash()[:12], config.threads)
    stages = _Stages()
    try:
        result = PRESETS[config.experiment].runner(config, stages)
    except NonConvergenceError as error:
        logger.error("%s", error)
        return EXIT_NONCONVERGENCE
    except ConfigError as error:
        logger.error("%s", error)
        return EXIT_CONFIG
    except ValueError as error:
        # A run that cannot reach its verdicts fails them.
        logger.error("%s failed: %s", config.experiment, error)
        result = ExperimentResult([Verdict(config.experiment, FAIL, details={
            "error": str(error), "error_type": type(error).__name__})])
    try:
        _write_outputs(config, result, stages)
    except OSError as error:
        logger.error("Cannot write outputs: %s", error)
        return EXIT_CONFIG
    failed = [verdict.name for verdict in result.verdicts
              if not verdict.passed]
    if failed:
        logger.warning("Verdicts not passed: %s", ", ".join(failed))
        return EXIT_VERDICT
    return EXIT_OK


def dump_matrix(config_path, output: Optional[str] = None) -> int:
    try:
        config = load_config(config_path)
        domain = _domain(config)
        if config.experiment.startswith("pat-"):
            operator = forward_operator(_medium(config, domain))
        else:
            operator = assemble(_coefficient(config, domain),
                                config.operator.k, mean=config.operator.mean)
    except ValueError as error:
        logger.error("%s", error)
        return EXIT_CONFIG
    if output is None:
        Path(config.output).mkdir(parents=True, exist_ok=True)
        output = str(Path(config.output) / "matrix.txt")
    write_matrix(output, operator)
    return EXIT_OK


def _argument_parser():
    parser = argparse.ArgumentParser(prog="nkit")
    parser.description = (
        "Neumann functions of div(gamma grad) - ik on a box and the small "
        "anomaly photoacoustic pipeline built on them.")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_const",
                           dest="log_level", const=logging.DEBUG,
                           help="log debug messages")
    verbosity.add_argument("-q", "--quiet", action="store_const",
                           dest="log_level", const=logging.WARNING,
                           help="only log warnings and errors")
    parser.set_defaults(log_level=logging.INFO)
    commands = parser.add_subparsers(dest="command", required=True)
    run_parser = commands.add_parser(
        "run", help="run the experiment of a configuration file")
    run_parser.add_argument("config", help="TOML or JSON configuration")
    commands.add_parser("presets", help="list the experiment presets")
    dump_parser = commands.add_parser(
        "dump-matrix", help="write the assembled operator as coordinate text")
    dump_parser.add_argument("config", help="TOML or JSON configuration")
    dump_parser.add_argument("-o", "--output",
                             help="matrix file (default: <output>/matrix.txt)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _argument_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "presets":
        for name in list_presets():
            print(name)
        return EXIT_OK
    if args.command == "dump-matrix":
        return dump_matrix(args.config, args.output)
    return run(args.config)


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
