"""Problem data: ensemble (continuum) parameter sets, sampled large-scale
parameter sets, polynomial fitting of ensemble data, and JSON config I/O.

Conventions
-----------
The ensemble coupling kernel ``sigma`` is stored over the variables
(x, eta, y). In the kernel equations it is integrated against the eta slot:
``integral_0^1 sigma(xi, eta, y) k(x, xi, eta) deta``. Sampling maps
``sigma_{i,j}(x) = sigma(x, eta=i/n, y=j/n)``, which makes the sampled sums
``(1/n) sum_j sigma_{j,i} k^j`` the Riemann discretisation of that integral.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Mapping

import numpy as np

from .series import (
    Constant,
    Cos,
    Exp,
    Polynomial,
    SeparableSum,
    SeparableTerm,
    Sin,
    Var,
)

__all__ = [
    "ContinuumParams",
    "LargeScaleParams",
    "FitResult",
    "PositivityReport",
    "Problem",
    "ConfigError",
    "sample_continuum",
    "lift_separable",
    "fit_q",
    "check_positivity",
    "load_problem",
    "parse_problem_dict",
    "builtin_problem_names",
]

GRID_POINTS = 101  # fixed audit grid for positivity checks


class ConfigError(ValueError):
    """Raised on malformed problem configuration files."""


@dataclass(frozen=True)
class ContinuumParams:
    """Parameters of the ensemble kernel equations.

    lam(x, y) and mu(x) are the transport speeds; sigma(x, eta, y) the
    in-family coupling; theta(x, y) and W(x, y) the cross couplings between
    the family and the single counter-convecting component; q(y) the
    reflection profile at x = 0.
    """

    lam: SeparableSum
    mu: SeparableSum
    sigma: SeparableSum
    theta: SeparableSum
    W: SeparableSum
    q: SeparableSum

    def __post_init__(self):
        allowed = {
            "lam": {Var.X, Var.Y},
            "mu": {Var.X},
            "sigma": {Var.X, Var.ETA, Var.Y},
            "theta": {Var.X, Var.Y},
            "W": {Var.X, Var.Y},
            "q": {Var.Y},
        }
        for name, vs in allowed.items():
            got = set(getattr(self, name).vars())
            if not got <= vs:
                raise ValueError(f"parameter {name} uses variables {got}, allowed {vs}")


@dataclass
class LargeScaleParams:
    """Sampled (per component) parameters of the n+1 kernel equations."""

    n: int
    lam: list[SeparableSum]                 # lam[i](x), i = 0..n-1
    mu: SeparableSum
    sigma: list[list[SeparableSum]]         # sigma[i][j](x)
    theta: list[SeparableSum]
    W: list[SeparableSum]
    q: np.ndarray
    template: ContinuumParams | None = None
    sample_offset: float = 0.0              # component i sits at y=(i+1+offset)/n

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        for name in ("lam", "theta", "W"):
            if len(getattr(self, name)) != self.n:
                raise ValueError(f"{name} must have {self.n} entries")
        if len(self.sigma) != self.n or any(len(r) != self.n for r in self.sigma):
            raise ValueError("sigma must be an n-by-n table")
        self.q = np.asarray(self.q, dtype=float)
        if self.q.shape != (self.n,):
            raise ValueError("q must have n entries")

    def y_points(self) -> np.ndarray:
        return (np.arange(1, self.n + 1) + self.sample_offset) / self.n

    def check_speeds(self) -> None:
        xs = np.linspace(0.0, 1.0, GRID_POINTS)
        mu_min = self.mu.eval1(Var.X, xs).min()
        lam_min = min(l.eval1(Var.X, xs).min() for l in self.lam)
        if mu_min <= 0 or lam_min <= 0:
            raise ValueError(
                f"transport speeds must be positive on [0,1]: "
                f"min lam={lam_min:.3g}, min mu={mu_min:.3g}"
            )


@dataclass(frozen=True)
class FitResult:
    """Least-squares polynomial fit of ensemble data."""

    degree: int
    coeffs: np.ndarray   # ascending powers, length degree+1
    rms_error: float

    def as_sum(self) -> SeparableSum:
        return SeparableSum.poly(Var.Y, self.coeffs)

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        for c in self.coeffs[::-1]:
            out = out * y + c
        return out


@dataclass(frozen=True)
class PositivityReport:
    min_lambda: float
    min_mu: float
    passed: bool


def sample_continuum(c: ContinuumParams, n: int, offset: float = 0.0) -> LargeScaleParams:
    """Sample the ensemble parameters into an n+1 parameter set.

    Component i (1-based) is placed at y = (i + offset)/n; the default
    offset 0 puts the family at i/n, offset -1 at (i-1)/n.
    """
    if n < 1:
        raise ValueError("n must be positive")
    ys = (np.arange(1, n + 1) + offset) / n
    lam = [c.lam.substitute(Var.Y, float(y)) for y in ys]
    theta = [c.theta.substitute(Var.Y, float(y)) for y in ys]
    W = [c.W.substitute(Var.Y, float(y)) for y in ys]
    sigma = [
        [c.sigma.substitute(Var.ETA, float(yi)).substitute(Var.Y, float(yj))
         for yj in ys]
        for yi in ys
    ]
    q = c.q.eval1(Var.Y, ys)
    return LargeScaleParams(
        n=n, lam=lam, mu=c.mu, sigma=sigma, theta=theta, W=W, q=np.asarray(q),
        template=c, sample_offset=offset,
    )


def lift_separable(ls: LargeScaleParams) -> ContinuumParams:
    """Recover the ensemble parameters a sampled set was generated from.

    Requires the large-scale set to carry its generating template (the
    separable expressions in i/n and j/n). The round trip through
    :func:`sample_continuum` is verified exactly at all sample points.
    """
    if ls.template is None:
        raise ValueError(
            "large-scale parameters are not in template form; build an "
            "ensemble approximation explicitly (e.g. with fit_q) instead"
        )
    cont = ls.template
    back = sample_continuum(cont, ls.n, ls.sample_offset)
    xs = np.linspace(0.0, 1.0, 11)
    for i in range(ls.n):
        for a, b in ((back.lam[i], ls.lam[i]), (back.theta[i], ls.theta[i]),
                     (back.W[i], ls.W[i])):
            if not np.allclose(a.eval1(Var.X, xs), b.eval1(Var.X, xs),
                               rtol=0.0, atol=0.0):
                raise ValueError("template does not reproduce the sampled data")
    return cont


def fit_q(data: np.ndarray, degree: int, points: np.ndarray | None = None,
          n: int | None = None, offset: float = 0.0) -> FitResult:
    """Least-squares polynomial fit to ensemble reflection data.

    ``points`` gives the abscissae explicitly; otherwise the k-th datum is
    placed at y = (k + 1 + offset)/n with n = len(data).
    """
    data = np.asarray(data, dtype=float)
    if points is None:
        nn = n if n is not None else len(data)
        points = (np.arange(1, len(data) + 1) + offset) / nn
    points = np.asarray(points, dtype=float)
    if degree >= len(points):
        raise ValueError("fit degree must be below the number of data points")
    if len(np.unique(points)) != len(points):
        raise ValueError("duplicate abscissae make the fit rank deficient")
    V = np.vander(points, degree + 1, increasing=True)
    coeffs, _, rank, _ = np.linalg.lstsq(V, data, rcond=None)
    if rank < degree + 1:
        raise ValueError("rank-deficient design matrix in polynomial fit")
    resid = V @ coeffs - data
    return FitResult(degree=degree, coeffs=coeffs,
                     rms_error=float(np.sqrt(np.mean(resid ** 2))))


def check_positivity(p: ContinuumParams) -> PositivityReport:
    """Audit lam > 0 and mu > 0 on a fixed grid; report-only."""
    xs = np.linspace(0.0, 1.0, GRID_POINTS)
    ys = np.linspace(0.0, 1.0, GRID_POINTS)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    lam_min = float(p.lam({Var.X: X, Var.Y: Y}).min())
    mu_min = float(p.mu({Var.X: xs}).min())
    return PositivityReport(min_lambda=lam_min, min_mu=mu_min,
                            passed=lam_min > 0.0 and mu_min > 0.0)


# ---------------------------------------------------------------------------
# JSON problem configurations
# ---------------------------------------------------------------------------

_VAR_NAMES = {"x": Var.X, "xi": Var.XI, "y": Var.Y, "eta": Var.ETA}

_EXACT_Q = {
    "cos2pi": lambda: SeparableSum([SeparableTerm(1.0, [Cos(Var.Y, 2.0 * np.pi, 0.0)])]),
}


@dataclass
class Problem:
    """A loaded problem configuration: the ensemble parameters plus, when the
    reflection profile was given as data, the raw samples and their fit."""

    name: str
    continuum: ContinuumParams
    n: int | None = None
    q_data: np.ndarray | None = None
    q_offset: float = 0.0
    fit: FitResult | None = None
    source: dict = field(default_factory=dict)

    def large_scale(self, n: int | None = None, offset: float = 0.0) -> LargeScaleParams:
        """Sample the n+1 parameter set; raw q data is used verbatim when the
        requested size matches the data."""
        if n is None:
            n = self.n
        if n is None:
            raise ValueError("problem does not fix n; pass it explicitly")
        ls = sample_continuum(self.continuum, n, offset)
        if self.q_data is not None and len(self.q_data) == n and offset == self.q_offset:
            ls.q = np.asarray(self.q_data, dtype=float)
        return ls

    def with_fit_degree(self, degree: int) -> "Problem":
        """Refit the reflection data at another degree."""
        if self.q_data is None:
            raise ValueError("problem has an analytic q; nothing to refit")
        fit = fit_q(self.q_data, degree, n=len(self.q_data), offset=self.q_offset)
        cont = replace(self.continuum, q=fit.as_sum())
        return replace(self, continuum=cont, fit=fit)


def _parse_factor(d: Mapping, where: str):
    if not isinstance(d, Mapping):
        raise ConfigError(f"{where}: factor must be an object")
    kind = d.get("kind")
    var = d.get("var")
    if var not in _VAR_NAMES:
        raise ConfigError(f"{where}: unknown or missing 'var' {var!r}")
    v = _VAR_NAMES[var]
    try:
        if kind == "poly":
            return Polynomial(v, [float(c) for c in d["coeffs"]])
        if kind == "exp":
            return Exp(v, float(d["rate"]))
        if kind == "cos":
            return Cos(v, float(d["angular"]), float(d.get("phase", 0.0)))
        if kind == "sin":
            return Sin(v, float(d["angular"]), float(d.get("phase", 0.0)))
        if kind == "const":
            return Constant(v, float(d["value"]))
    except KeyError as e:
        raise ConfigError(f"{where}: missing field {e} for kind {kind!r}") from None
    raise ConfigError(f"{where}: unknown factor kind {kind!r}")


def _parse_param(d, where: str, allowed: set[Var]) -> SeparableSum:
    if isinstance(d, (int, float)):
        return SeparableSum.constant(float(d))
    if not isinstance(d, Mapping) or "terms" not in d:
        raise ConfigError(f"{where}: expected a number or an object with 'terms'")
    terms = []
    for i, t in enumerate(d["terms"]):
        if not isinstance(t, Mapping):
            raise ConfigError(f"{where}.terms[{i}]: must be an object")
        scale = float(t.get("scale", 1.0))
        factors = [
            _parse_factor(f, f"{where}.terms[{i}].factors[{j}]")
            for j, f in enumerate(t.get("factors", []))
        ]
        for f in factors:
            if f.var not in allowed:
                raise ConfigError(
                    f"{where}.terms[{i}]: variable '{f.var.value}' not allowed here"
                )
        terms.append(SeparableTerm(scale, factors))
    return SeparableSum(terms)


def parse_problem_dict(cfg: Mapping, name: str = "<config>") -> Problem:
    """Build a Problem from a decoded JSON object, validating field by field."""
    if not isinstance(cfg, Mapping):
        raise ConfigError(f"{name}: top level must be an object")
    required = ["lambda", "mu", "sigma", "theta", "w", "q"]
    for key in required:
        if key not in cfg:
            raise ConfigError(f"{name}: missing required field '{key}'")
    lam = _parse_param(cfg["lambda"], f"{name}.lambda", {Var.X, Var.Y})
    mu = _parse_param(cfg["mu"], f"{name}.mu", {Var.X})
    sigma = _parse_param(cfg["sigma"], f"{name}.sigma", {Var.X, Var.ETA, Var.Y})
    theta = _parse_param(cfg["theta"], f"{name}.theta", {Var.X, Var.Y})
    W = _parse_param(cfg["w"], f"{name}.w", {Var.X, Var.Y})

    qcfg = cfg["q"]
    q_data = None
    q_offset = 0.0
    fit = None
    if isinstance(qcfg, Mapping) and "data" in qcfg:
        q_data = np.asarray([float(v) for v in qcfg["data"]], dtype=float)
        degree = int(qcfg.get("fit_degree", 2))
        q_offset = -1.0 if qcfg.get("points") == "(i-1)/n" else 0.0
        fit = fit_q(q_data, degree, n=len(q_data), offset=q_offset)
        q = fit.as_sum()
    elif isinstance(qcfg, Mapping) and "exact" in qcfg:
        key = qcfg["exact"]
        if key not in _EXACT_Q:
            raise ConfigError(f"{name}.q: unknown exact profile {key!r}")
        q = _EXACT_Q[key]()
    else:
        q = _parse_param(qcfg, f"{name}.q", {Var.Y})

    cont = ContinuumParams(lam=lam, mu=mu, sigma=sigma, theta=theta, W=W, q=q)
    n = int(cfg["n"]) if "n" in cfg else None
    return Problem(
        name=str(cfg.get("name", name)), continuum=cont, n=n,
        q_data=q_data, q_offset=q_offset, fit=fit, source=dict(cfg),
    )


def builtin_problem_names() -> list[str]:
    root = resources.files("continuum_kernels").joinpath("configs")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_problem(path_or_name: str) -> Problem:
    """Load a problem from a JSON file path or a built-in config name."""
    text = None
    label = str(path_or_name)
    try:
        with open(path_or_name, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError:
        res = resources.files("continuum_kernels").joinpath(
            f"configs/{path_or_name}.json")
        try:
            text = res.read_text(encoding="utf-8")
            label = f"builtin:{path_or_name}"
        except (FileNotFoundError, OSError):
            raise ConfigError(
                f"no such config file or built-in problem: {path_or_name!r} "
                f"(built-ins: {', '.join(builtin_problem_names())})"
            ) from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{label}: invalid JSON at line {e.lineno}, column "
                          f"{e.colno}: {e.msg}") from None
    return parse_problem_dict(cfg, label)
