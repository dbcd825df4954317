"""Scenario files: YAML documents validated with line-anchored errors.

Closed-form fields (exponents, forces, initial data, cutoffs) are written as
arithmetic expressions over ``x, y, z, t`` and evaluated on the grid by a
small whitelisting evaluator.
"""

from __future__ import annotations

import ast
import hashlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .errors import BoundsError, ConfigurationError, DataError, DimensionError, VexflowError

# ------------------------------------------------------------- expressions


def _bump(r2):
    out = np.zeros_like(r2)
    inside = r2 < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
    return out


def _radial_bump(*args):
    """bump(x, y, cx, cy, radius): smooth bump equal to 1 at the center, 0 outside the ball."""
    *coords, radius = args
    d = len(coords) // 2
    r2 = sum((np.asarray(coords[k], float) - coords[d + k]) ** 2 for k in range(d)) / radius ** 2
    return _bump(np.asarray(r2, dtype=float))


FUNCTIONS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "log": np.log, "sqrt": np.sqrt,
    "tanh": np.tanh, "abs": np.abs, "minimum": np.minimum, "maximum": np.maximum, "where": np.where,
    "heaviside": lambda a: np.heaviside(a, 1.0), "bump": _radial_bump,
}
CONSTANTS = {"pi": np.pi, "e": np.e}
_ALLOWED = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant, ast.Compare,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.Mod, ast.USub, ast.UAdd,
    ast.Lt, ast.LtE, ast.Gt, ast.GtE,
)


@dataclass(frozen=True)
class Expression:
    source: str
    code: object
    names: frozenset

    def __call__(self, **variables):
        env = dict(CONSTANTS)
        env.update(FUNCTIONS)
        env.update(variables)
        with np.errstate(all="ignore"):
            return eval(self.code, {"__builtins__": {}}, env)  # noqa: S307 - AST whitelisted


def parse_expression(text, variables=("x", "y", "z", "t"), line=None):
    """Compile an arithmetic expression, rejecting anything but whitelisted syntax."""
    src = str(text)
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise ConfigurationError(f"cannot parse expression {src!r}: {exc.msg}", line) from None
    names = set()
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED):
            raise ConfigurationError(f"expression {src!r} uses unsupported syntax ({type(node).__name__})", line)
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in FUNCTIONS):
            raise ConfigurationError(f"expression {src!r} calls an unknown function", line)
        if isinstance(node, ast.Name):
            names.add(node.id)
    unknown = names - set(variables) - set(FUNCTIONS) - set(CONSTANTS)
    if unknown:
        raise ConfigurationError(f"expression {src!r} uses unknown names: {', '.join(sorted(unknown))}", line)
    return Expression(src, compile(tree, "<expression>", "eval"), frozenset(names))


# ------------------------------------------------------------------ loading


class _Source:
    """Parsed YAML with the line of every node, keyed by its path."""

    def __init__(self, text, name):
        self.text = text
        self.name = name
        self.lines = {}
        loader = yaml.SafeLoader(text)
        try:
            node = loader.get_single_node()
            self.data = {} if node is None else self._build(loader, node, ())
        except yaml.MarkedYAMLError as exc:
            mark = exc.problem_mark or exc.context_mark
            raise ConfigurationError(f"invalid YAML: {exc.problem}", mark.line + 1 if mark else None) from None
        finally:
            loader.dispose()
        if not isinstance(self.data, dict):
            raise ConfigurationError("scenario must be a mapping", 1)

    def _build(self, loader, node, path):
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            out = {}
            for knode, vnode in node.value:
                key = loader.construct_object(knode, deep=True)
                if key in out:
                    raise ConfigurationError(f"duplicate key {key!r}", knode.start_mark.line + 1)
                self.lines[path + (key, "__key__")] = knode.start_mark.line + 1
                out[key] = self._build(loader, vnode, path + (key,))
            return out
        if isinstance(node, yaml.SequenceNode):
            return [self._build(loader, v, path + (i,)) for i, v in enumerate(node.value)]
        return loader.construct_object(node, deep=True)

    def line(self, path):
        path = tuple(path)
        while path and path not in self.lines:
            path = path[:-1]
        return self.lines.get(path)


class _Section:
    """Typed access to a mapping of the document with line-anchored errors."""

    def __init__(self, source, path, allowed):
        self.source = source
        self.path = tuple(path)
        node = source.data
        for key in self.path:
            node = node.get(key) if isinstance(node, dict) else None
        if node is None:
            node = {}
        if not isinstance(node, dict):
            self.fail("must be a mapping")
        self.data = node
        for key in node:
            if key not in allowed:
                raise ConfigurationError(
                    f"unknown key {key!r} in {self.label}; expected one of {', '.join(sorted(allowed))}",
                    source.lines.get(self.path + (key, "__key__")),
                )

    @property
    def label(self):
        return ".".join(str(p) for p in self.path) or "scenario"

    def line(self, key=None):
        return self.source.line(self.path + ((key,) if key is not None else ()))

    def fail(self, message, key=None):
        where = f"{self.label}.{key}" if key is not None else self.label
        raise ConfigurationError(f"{where}: {message}", self.line(key))

    def has(self, key):
        return key in self.data and self.data[key] is not None

    def get(self, key, default=None):
        return self.data.get(key, default) if self.data.get(key) is not None else default

    def number(self, key, default=None, *, positive=False, nonnegative=False, required=False):
        if not self.has(key):
            if required:
                self.fail("is required", key)
            return default
        v = self.data[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(f"must be a number, got {v!r}", key)
        v = float(v)
        if not np.isfinite(v):
            self.fail("must be finite", key)
        if positive and v <= 0:
            self.fail(f"must be positive, got {v}", key)
        if nonnegative and v < 0:
            self.fail(f"must be nonnegative, got {v}", key)
        return v

    def integer(self, key, default=None, *, minimum=None):
        if not self.has(key):
            return default
        v = self.data[key]
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(f"must be an integer, got {v!r}", key)
        if minimum is not None and v < minimum:
            self.fail(f"must be at least {minimum}", key)
        return v

    def boolean(self, key, default=False):
        if not self.has(key):
            return default
        v = self.data[key]
        if not isinstance(v, bool):
            self.fail(f"must be true or false, got {v!r}", key)
        return v

    def numbers(self, key, *, required=False):
        if not self.has(key):
            if required:
                self.fail("is required", key)
            return None
        v = self.data[key]
        if not isinstance(v, list) or not v:
            self.fail("must be a nonempty list of numbers", key)
        out = []
        for i, x in enumerate(v):
            if isinstance(x, bool) or not isinstance(x, (int, float)):
                raise ConfigurationError(f"{self.label}.{key}[{i}]: must be a number, got {x!r}",
                                         self.source.line(self.path + (key, i)))
            out.append(float(x))
        return out

    def expression(self, key, variables=("x", "y", "z", "t"), default=None):
        if not self.has(key):
            return default
        v = self.data[key]
        if isinstance(v, bool) or not isinstance(v, (str, int, float)):
            self.fail(f"must be an expression, got {v!r}", key)
        return parse_expression(v, variables, self.line(key))

    def section(self, key, allowed):
        return _Section(self.source, self.path + (key,), allowed)

    def toggle(self, key):
        """A diagnostics entry that may be ``true``/``false`` or a mapping of options."""
        v = self.data.get(key)
        if v is None or v is False:
            return False
        if v is True or isinstance(v, dict):
            return True
        self.fail("must be true, false or a mapping of options", key)


BUNDLED = ("newtonian-decay", "powerlaw-switch")

TOP_KEYS = {"name", "seed", "output", "domain", "exponent", "stress", "solver", "initial", "force", "diagnostics"}


def bundled_path(name):
    return resources.files("vexflow") / "scenarios" / f"{name}.yaml"


def read_scenario_text(path_or_name):
    """Text and display name of a scenario file or of a bundled scenario given by name."""
    p = Path(path_or_name)
    if p.is_file():
        return p.read_text(), str(p), p.parent
    if str(path_or_name) in BUNDLED:
        res = bundled_path(str(path_or_name))
        return res.read_text(), str(path_or_name), None
    raise ConfigurationError(f"cannot read scenario {path_or_name!r} (not a file or bundled name)")


# ----------------------------------------------------------------- scenario


@dataclass(eq=False)
class Scenario:
    """A validated experiment description with everything built but not run."""

    name: str
    text: str
    seed: int
    output: str
    domain: object
    exponent: object
    model: object
    dt: float
    theta: float
    theta_list: list
    u0: object
    force: object
    diagnostics: dict
    source: str = ""
    bounds_error: str = None

    @property
    def config_hash(self):
        return hashlib.sha256(self.text.encode()).hexdigest()

    def solver_config(self, **overrides):
        from .solver import SolverConfig

        kwargs = dict(domain=self.domain, model=self.model, theta=self.theta, dt=self.dt, force=self.force,
                      u0=self.u0)
        kwargs.update(overrides)
        return SolverConfig(**kwargs)


def load_scenario(path_or_name, *, seed=None, output=None, for_solver=True):
    """Parse and validate a scenario; ``for_solver=False`` skips solver-only requirements."""
    text, name, base_dir = read_scenario_text(path_or_name)
    return parse_scenario(text, name, base_dir=base_dir, seed=seed, output=output, for_solver=for_solver)


def parse_scenario(text, name="<scenario>", *, base_dir=None, seed=None, output=None, for_solver=True):
    from .exponent import make_exponent_field, read_exponent_csv
    from .grid import build_domain
    from .stress import power_law, table_law

    src = _Source(text, name)
    top = _Section(src, (), TOP_KEYS)
    scen_name = str(top.get("name", Path(name).stem))
    seed = int(seed if seed is not None else top.integer("seed", 0, minimum=0))
    out_dir = output or top.get("output") or f"out/{scen_name}"

    dom_s = top.section("domain", {"extents", "resolution", "T", "slabs"})
    extents = dom_s.numbers("extents", required=True)
    if any(e <= 0 for e in extents):
        dom_s.fail("extents must be positive", "extents")
    if len(extents) not in (2, 3):
        dom_s.fail(f"extents must have 2 or 3 entries, got {len(extents)}", "extents")
    res = dom_s.data.get("resolution")
    if isinstance(res, list):
        if not all(isinstance(v, int) and not isinstance(v, bool) and v >= 4 for v in res):
            dom_s.fail("must be an integer or a list of integers, each at least 4", "resolution")
        res = tuple(res)
    else:
        res = dom_s.integer("resolution", None, minimum=4)
        if res is None:
            dom_s.fail("is required", "resolution")
    T = dom_s.number("T", 1.0, positive=True)
    slabs = dom_s.numbers("slabs")
    try:
        domain = build_domain(tuple(extents), res, T=T, slabs=slabs)
    except VexflowError as exc:
        raise ConfigurationError(f"domain: {exc}", dom_s.line()) from None
    d = domain.d
    coords = ("x", "y", "z")[:d]

    # exponent; in verification mode a bound violation is reported, not raised
    exp_s = top.section("exponent", {"slabs", "csv", "s_max"})
    bounds_error = None
    s_max = exp_s.number("s_max", None, positive=True)
    if exp_s.has("csv"):
        p = Path(exp_s.get("csv"))
        if not p.is_absolute() and base_dir is not None:
            p = Path(base_dir) / p
        try:
            exponent = read_exponent_csv(p.read_text(), domain, s_max)
        except OSError as exc:
            exp_s.fail(f"cannot read {p}: {exc.strerror}", "csv")
        except BoundsError as exc:
            if for_solver:
                raise ConfigurationError(f"exponent: {exc}", exp_s.line("csv")) from None
            exponent, bounds_error = None, str(exc)
        except (DataError, DimensionError, ValueError) as exc:
            raise ConfigurationError(f"exponent: {exc}", exp_s.line("csv")) from None
    else:
        if not exp_s.has("slabs"):
            exp_s.fail("needs 'slabs' (one expression per time slab) or 'csv'")
        raw = exp_s.get("slabs")
        if not isinstance(raw, list):
            exp_s.fail("must be a list with one expression per time slab", "slabs")
        if len(raw) != domain.n_slabs:
            exp_s.fail(f"has {len(raw)} entries but the domain has {domain.n_slabs} time slabs", "slabs")
        mesh = dict(zip(coords, domain.mesh()))
        edges = domain.slab_edges
        grids = []
        for k, item in enumerate(raw):
            line = src.line(("exponent", "slabs", k))
            ex = parse_expression(item, coords + ("t",), line)
            val = ex(**mesh, t=0.5 * (edges[k] + edges[k + 1]))
            grids.append(np.broadcast_to(np.asarray(val, dtype=float), domain.shape))
        try:
            exponent = make_exponent_field(domain, grids, s_max)
        except BoundsError as exc:
            if for_solver:
                raise ConfigurationError(f"exponent: {exc}", exp_s.line("slabs")) from None
            exponent, bounds_error = None, str(exc)
        except (DataError, DimensionError) as exc:
            raise ConfigurationError(f"exponent: {exc}", exp_s.line("slabs")) from None
    # the structural checks still run on the raw values when the bounds fail
    if exponent is not None:
        law_exponent = exponent
    elif not exp_s.has("csv"):
        law_exponent = float(min(g.min() for g in grids))
    else:
        law_exponent = None

    # stress
    st_s = top.section("stress", {"nu0", "nu1", "h", "c", "table"})
    h_off = st_s.number("h", 1.0, nonnegative=True)
    c = st_s.number("c", None, positive=True)
    if law_exponent is None:
        model = None
    elif st_s.has("table"):
        tab = st_s.section("table", {"r", "phi"})
        r_nodes, phi_nodes = tab.numbers("r", required=True), tab.numbers("phi", required=True)
        try:
            model = table_law(r_nodes, phi_nodes, law_exponent, h_off, c)
        except VexflowError as exc:
            raise ConfigurationError(f"stress.table: {exc}", tab.line()) from None
    else:
        nu0 = st_s.number("nu0", 0.0, nonnegative=True)
        nu1 = st_s.number("nu1", 0.0, nonnegative=True)
        try:
            model = power_law(nu0, nu1, law_exponent, h_off, c)
        except VexflowError as exc:
            raise ConfigurationError(f"stress: {exc}", st_s.line()) from None

    # solver
    sol_s = top.section("solver", {"dt", "theta", "theta_list"})
    dt = sol_s.number("dt", None, positive=True, required=for_solver)
    theta = sol_s.number("theta", 1e-3, positive=True)
    theta_list = sol_s.numbers("theta_list")
    if theta_list is not None:
        if any(t <= 0 for t in theta_list):
            sol_s.fail("entries must be positive", "theta_list")
        if any(b >= a for a, b in zip(theta_list, theta_list[1:])):
            sol_s.fail("must be strictly decreasing", "theta_list")
    if for_solver and dt is not None:
        n = T / dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            sol_s.fail(f"dt={dt} does not divide T={T}", "dt")

    # diagnostics
    diag_keys = {"energy", "local_energy", "pressure", "sweep", "minty", "ladder", "checkpoints"}
    dg = top.section("diagnostics", diag_keys)
    diagnostics = {}
    if dg.toggle("energy"):
        sec = dg.section("energy", {"max_relative_residual"}) if isinstance(dg.data["energy"], dict) else None
        diagnostics["energy"] = {"max_relative_residual": sec.number("max_relative_residual", 0.05, positive=True) if sec else 0.05}
    if dg.toggle("pressure"):
        sec = dg.section("pressure", {"max_scaled_laplacian"}) if isinstance(dg.data["pressure"], dict) else None
        diagnostics["pressure"] = {"max_scaled_laplacian": sec.number("max_scaled_laplacian", 1e-6, positive=True) if sec else 1e-6}
    if dg.toggle("local_energy"):
        sec = dg.section("local_energy", {"psi", "max_fraction"}) if isinstance(dg.data["local_energy"], dict) else None
        if sec is None or not sec.has("psi"):
            dg.fail("needs a cutoff expression 'psi'", "local_energy")
        diagnostics["local_energy"] = {"psi": sec.expression("psi", coords),
                                       "max_fraction": sec.number("max_fraction", 0.01, positive=True)}
    if dg.toggle("sweep"):
        sec = dg.section("sweep", {"factor"}) if isinstance(dg.data["sweep"], dict) else None
        if theta_list is None:
            raise ConfigurationError("diagnostics.sweep is enabled but solver.theta_list is missing", dg.line("sweep"))
        diagnostics["sweep"] = {"factor": sec.number("factor", 3.0, positive=True) if sec else 3.0}
    if dg.toggle("minty"):
        if "sweep" not in diagnostics:
            dg.fail("needs the sweep diagnostic", "minty")
        sec = dg.section("minty", {"n_eta", "psi", "eta_scale", "tol"}) if isinstance(dg.data["minty"], dict) else None
        diagnostics["minty"] = {
            "n_eta": sec.integer("n_eta", 32, minimum=1) if sec else 32,
            "psi": sec.expression("psi", coords) if sec else None,
            "eta_scale": sec.number("eta_scale", 1.0, positive=True) if sec else 1.0,
            "tol": sec.number("tol", 1e-8, positive=True) if sec else 1e-8,
        }
    if dg.toggle("ladder"):
        sec = dg.section("ladder", {"eps", "psi"}) if isinstance(dg.data["ladder"], dict) else None
        if sec is None or not sec.has("eps") or not sec.has("psi"):
            dg.fail("needs 'eps' (decreasing list) and 'psi'", "ladder")
        eps = sec.numbers("eps")
        if any(b >= a for a, b in zip(eps, eps[1:])) or eps[-1] <= 0:
            sec.fail("must be positive and strictly decreasing", "eps")
        diagnostics["ladder"] = {"eps": eps, "psi": sec.expression("psi", coords)}
    if dg.toggle("checkpoints"):
        diagnostics["checkpoints"] = {}

    # initial data and forcing (2-D solver data)
    u0 = force = None
    ini_s = top.section("initial", {"stream", "u", "v"})
    frc_s = top.section("force", {"x", "y"})
    if for_solver and d != 2:
        raise ConfigurationError("the time stepper is 2-D only; use 'verify' for 3-D data", dom_s.line("extents"))
    if d == 2:
        from .mac import mac_grid
        from .solver import face_force, stream_velocity

        nx, ny = domain.shape
        grid = mac_grid(nx, ny, float(domain.h))
        if ini_s.has("stream"):
            if ini_s.has("u") or ini_s.has("v"):
                ini_s.fail("give either 'stream' or 'u'/'v', not both")
            ex = ini_s.expression("stream", ("x", "y"))
            u0 = stream_velocity(grid, lambda X, Y: ex(x=X, y=Y), domain.origin)
        elif ini_s.has("u") or ini_s.has("v"):
            eu = ini_s.expression("u", ("x", "y"), parse_expression("0"))
            ev = ini_s.expression("v", ("x", "y"), parse_expression("0"))
            u0 = lambda xu, yu, xv, yv: (eu(x=xu, y=yu), ev(x=xv, y=yv))  # noqa: E731
        if frc_s.has("x") or frc_s.has("y"):
            fx = frc_s.expression("x", ("x", "y", "t"), parse_expression("0"))
            fy = frc_s.expression("y", ("x", "y", "t"), parse_expression("0"))
            force = face_force(lambda t, X, Y: fx(x=X, y=Y, t=t), lambda t, X, Y: fy(x=X, y=Y, t=t), grid,
                               domain.origin)

    return Scenario(
        name=scen_name, text=text, seed=seed, output=str(out_dir), domain=domain, exponent=exponent, model=model,
        dt=dt, theta=theta, theta_list=theta_list, u0=u0, force=force, diagnostics=diagnostics, source=name,
        bounds_error=bounds_error,
    )
