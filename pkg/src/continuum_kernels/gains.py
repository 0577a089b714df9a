"""Gain extraction and kernel diagnostics.

The feedback law integrates the kernels at x = 1 against the state, so the
trace k(1, xi, y), kbar(1, xi) is the quantity of interest. This module
evaluates it on grids, samples it to per-component gain tables for n+1
systems, measures kernel-equation residuals for any candidate solution, and
compares solutions.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import scipy.integrate

from .params import ContinuumParams, LargeScaleParams
from .power_series import PsKernelSolution, residual_series
from .series import Var

if TYPE_CHECKING:  # pragma: no cover
    from .closed_form import ClosedFormKernel
    from .fd_kernels import LsKernelSolution

__all__ = [
    "GainTable",
    "gains",
    "sample_gains",
    "diff_solutions",
    "continuum_residual",
    "largescale_residual",
    "write_gain_csv",
    "read_gain_csv",
]

DEFAULT_GRID = 101


@dataclass
class GainTable:
    """Kernels evaluated at x = 1.

    ``k`` has one row per y value (for sampled tables, per component, with
    grid_y holding the sample points i/n); columns follow grid_xi.
    """

    grid_xi: np.ndarray
    grid_y: np.ndarray
    k: np.ndarray          # shape (len(grid_y), len(grid_xi))
    kbar: np.ndarray       # shape (len(grid_xi),)
    sampled: bool = False

    def __post_init__(self):
        self.grid_xi = np.asarray(self.grid_xi, dtype=float)
        self.grid_y = np.asarray(self.grid_y, dtype=float)
        self.k = np.asarray(self.k, dtype=float)
        self.kbar = np.asarray(self.kbar, dtype=float)
        if self.k.shape != (len(self.grid_y), len(self.grid_xi)):
            raise ValueError("gain matrix shape does not match grids")
        if self.kbar.shape != (len(self.grid_xi),):
            raise ValueError("kbar gain shape does not match grid_xi")
        if not (np.all(np.isfinite(self.k)) and np.all(np.isfinite(self.kbar))):
            raise ValueError("gain tables must be finite")


def _is_closed_form(sol) -> bool:
    return hasattr(sol, "kbar") and callable(getattr(sol, "kbar"))


def _eval_kernels_at(sol, x: float, grid_xi: np.ndarray, grid_y: np.ndarray):
    """Evaluate k(x,.,.) (len_y, len_xi) and kbar(x,.) for either solution type."""
    if isinstance(sol, PsKernelSolution):
        k = sol.k.substitute_value(Var.X, x).eval_grid(
            {Var.XI: grid_xi, Var.Y: grid_y}).T
        kbar = sol.kbar.substitute_value(Var.X, x).eval_grid({Var.XI: grid_xi})
        return k, kbar
    if _is_closed_form(sol):
        XI, Y = np.meshgrid(grid_xi, grid_y, indexing="xy")
        k = sol.k(np.full_like(XI, x), XI, Y)
        kbar = sol.kbar(np.full_like(grid_xi, x), grid_xi)
        return k, kbar
    raise TypeError(f"unsupported kernel solution type {type(sol)!r}")


def gains(sol, grid_xi: np.ndarray | None = None,
          grid_y: np.ndarray | None = None) -> GainTable:
    """Control gains k(1, xi, y) and kbar(1, xi) on a grid.

    Grid-function solutions (from the n+1 reference solver) are returned on
    their own grid with grid_y at the component sample points.
    """
    from .fd_kernels import LsKernelSolution

    if isinstance(sol, LsKernelSolution):
        xs = sol.grid.nodes()
        return GainTable(
            grid_xi=xs, grid_y=sol.y_points,
            k=sol.k[:-1, -1, :].copy(), kbar=sol.k[-1, -1, :].copy(),
            sampled=True,
        )
    if grid_xi is None:
        grid_xi = np.linspace(0.0, 1.0, DEFAULT_GRID)
    if grid_y is None:
        grid_y = np.linspace(0.0, 1.0, DEFAULT_GRID)
    grid_xi = np.asarray(grid_xi, dtype=float)
    grid_y = np.asarray(grid_y, dtype=float)
    k, kbar = _eval_kernels_at(sol, 1.0, grid_xi, grid_y)
    return GainTable(grid_xi=grid_xi, grid_y=grid_y, k=k, kbar=kbar)


def sample_gains(sol, n: int, grid_xi: np.ndarray | None = None,
                 offset: float = 0.0) -> GainTable:
    """Per-component gains for an n+1 system: row i is k(1, xi, y_i) with
    y_i = (i+offset)/n for i = 1..n; the counter-convecting gain is kbar."""
    if n < 1:
        raise ValueError("n must be positive")
    ys = (np.arange(1, n + 1) + offset) / n
    t = gains(sol, grid_xi=grid_xi, grid_y=ys)
    t.sampled = True
    return t


def diff_solutions(a: GainTable, b: GainTable) -> float:
    """Sup-norm difference of two gain tables over their shared grid."""
    if a.grid_xi.shape != b.grid_xi.shape or not np.allclose(
            a.grid_xi, b.grid_xi, rtol=0, atol=1e-12):
        raise ValueError("gain tables live on different xi grids")
    if a.grid_y.shape != b.grid_y.shape or not np.allclose(
            a.grid_y, b.grid_y, rtol=0, atol=1e-12):
        raise ValueError("gain tables live on different y grids")
    return float(max(np.abs(a.k - b.k).max(), np.abs(a.kbar - b.kbar).max()))


# ---------------------------------------------------------------------------
# Residuals in the ensemble kernel equations
# ---------------------------------------------------------------------------


def _prism_mask(xs: np.ndarray) -> np.ndarray:
    X, XI = np.meshgrid(xs, xs, indexing="ij")
    return XI <= X + 1e-12


def continuum_residual(sol, p: ContinuumParams, grid_m: int = 21,
                       config=None) -> dict[str, float]:
    """Sup-norm residual of each kernel equation for a candidate solution.

    Series solutions are checked against the same truncated-parameter
    equations the solver matched (exact monomial integration); closed-form
    solutions against the analytic parameters with quadrature (1e-10) for
    the integral couplings.
    """
    xs = np.linspace(0.0, 1.0, grid_m)
    if isinstance(sol, PsKernelSolution):
        cfg = config if config is not None else sol.config
        res = residual_series(p, cfg, sol.k, sol.kbar)
        mask2 = _prism_mask(xs)
        out = {}
        e1 = res["pde_k"].eval_grid({Var.X: xs, Var.XI: xs, Var.Y: xs})
        out["pde_k"] = float(np.abs(e1[mask2, :]).max())
        e2 = res["pde_kbar"].eval_grid({Var.X: xs, Var.XI: xs})
        out["pde_kbar"] = float(np.abs(e2[mask2]).max())
        e3 = res["bc_diag"].eval_grid({Var.X: xs, Var.Y: xs})
        out["bc_diag"] = float(np.abs(e3).max())
        e4 = res["bc_left"].eval_grid({Var.X: xs})
        out["bc_left"] = float(np.abs(e4).max())
        return out
    return _closed_form_residual(sol, p, xs)


def _closed_form_residual(sol: "ClosedFormKernel", p: ContinuumParams,
                          xs: np.ndarray) -> dict[str, float]:
    """Pointwise residuals for a separable solution; the y/eta integrals
    reduce to scalars (by separability of the kernel) computed once by
    adaptive quadrature."""
    sp = sol.problem
    mu_c = sol.mu
    quad = scipy.integrate.quad

    def ky(t):
        # y-profile of k without the (x, xi) envelope
        return -float(sp.theta_y.eval1(Var.Y, t)) / float(sp.lam_plus_mu(t))

    lam0 = p.lam.substitute(Var.X, 0.0)
    J_sig, _ = quad(lambda t: float(sp.sigma_y.eval1(Var.Y, t)) * (-ky(t)),
                    0.0, 1.0, epsabs=1e-10, epsrel=1e-10, limit=200)
    J_w, _ = quad(lambda t: float(sp.W_y.eval1(Var.Y, t)) * (-ky(t)),
                  0.0, 1.0, epsabs=1e-10, epsrel=1e-10, limit=200)
    J_q, _ = quad(lambda t: float(p.q.eval1(Var.Y, t))
                  * float(lam0.eval1(Var.Y, t)) * (-ky(t)),
                  0.0, 1.0, epsabs=1e-10, epsrel=1e-10, limit=200)

    X3, XI3, Y3 = np.meshgrid(xs, xs, xs, indexing="ij")
    tri = XI3 <= X3 + 1e-12
    lam_xi_y = p.lam({Var.X: XI3, Var.Y: Y3})
    dlam_xi_y = p.lam.diff(Var.X)({Var.X: XI3, Var.Y: Y3})
    mu_x = p.mu({Var.X: X3})
    theta_xi_y = p.theta({Var.X: XI3, Var.Y: Y3})
    env = np.exp(sol.c_x / mu_c * (X3 - XI3))
    # int sigma(xi,eta,y) k(x,xi,eta) deta = sigma_x(xi) sigma_e(y) J_sig * (-env theta_x(xi))
    int_sigma_k = sp.sigma_x.eval1(Var.X, XI3) * sp.sigma_e.eval1(Var.Y, Y3) \
        * (-env * sp.theta_x.eval1(Var.X, XI3)) * J_sig
    e1 = mu_x * sol.dk_dx(X3, XI3, Y3) - lam_xi_y * sol.dk_dxi(X3, XI3, Y3) \
        - theta_xi_y * sol.kbar(X3, XI3) - dlam_xi_y * sol.k(X3, XI3, Y3) \
        - int_sigma_k
    r1 = float(np.abs(e1[tri]).max())

    X2, XI2 = np.meshgrid(xs, xs, indexing="ij")
    tri2 = XI2 <= X2 + 1e-12
    env2 = np.exp(sol.c_x / mu_c * (X2 - XI2))
    int_w_k = sp.W_x.eval1(Var.X, XI2) * (-env2 * sp.theta_x.eval1(Var.X, XI2)) * J_w
    e2 = p.mu({Var.X: X2}) * sol.dkbar_dx(X2, XI2) \
        + p.mu({Var.X: XI2}) * sol.dkbar_dxi(X2, XI2) \
        + p.mu.diff(Var.X)({Var.X: XI2}) * sol.kbar(X2, XI2) - int_w_k
    r2 = float(np.abs(e2[tri2]).max())

    XB, YB = np.meshgrid(xs, xs, indexing="ij")
    e3 = (p.lam({Var.X: XB, Var.Y: YB}) + p.mu({Var.X: XB})) * sol.k(XB, XB, YB) \
        + p.theta({Var.X: XB, Var.Y: YB})
    r3 = float(np.abs(e3).max())

    mu0 = float(p.mu.eval1(Var.X, 0.0))
    tx0 = float(sp.theta_x.eval1(Var.X, 0.0))
    env0 = np.exp(sol.c_x / mu_c * xs)
    e4 = mu0 * sol.kbar(xs, np.zeros_like(xs)) - env0 * (-tx0) * J_q
    r4 = float(np.abs(e4).max())
    return {"pde_k": r1, "pde_kbar": r2, "bc_diag": r3, "bc_left": r4}


# ---------------------------------------------------------------------------
# Residuals in the sampled n+1 kernel equations
# ---------------------------------------------------------------------------


def largescale_residual(sol, ls: LargeScaleParams, grid_m: int = 64,
                        offset: float | None = None) -> dict[str, float]:
    """Plug a candidate kernel family into the n+1 kernel equations.

    ``sol`` is either an ensemble solution (series or closed form), whose
    sampling k_i(x, xi) = k(x, xi, y_i) supplies smooth candidates, or a
    grid solution from the n+1 reference solver (derivatives then fall back
    to centered differences). Reported values are sup norms over the
    triangle; for an ensemble solution they quantify how well the sampled
    continuum kernels approximate the n+1 kernels.
    """
    from .fd_kernels import LsKernelSolution

    n = ls.n
    if isinstance(sol, LsKernelSolution):
        xs = sol.grid.nodes()
        m = sol.grid.m
        K = sol.k
        h = sol.grid.h
        dKdx = np.gradient(K, h, axis=1)
        dKdxi = np.gradient(K, h, axis=2)
        interior = np.zeros((m + 1, m + 1), dtype=bool)
        for a in range(2, m - 1):
            interior[a, 1:a - 1] = True
    else:
        m = grid_m
        xs = np.linspace(0.0, 1.0, m + 1)
        offs = ls.sample_offset if offset is None else offset
        ys = (np.arange(1, n + 1) + offs) / n
        X, XI = np.meshgrid(xs, xs, indexing="ij")
        K = np.empty((n + 1, m + 1, m + 1))
        dKdx = np.empty_like(K)
        dKdxi = np.empty_like(K)
        if isinstance(sol, PsKernelSolution):
            kx = sol.k.diff(Var.X)
            kxi = sol.k.diff(Var.XI)
            for i, y in enumerate(ys):
                ki = sol.k.substitute_value(Var.Y, float(y))
                K[i] = ki.eval_grid({Var.X: xs, Var.XI: xs})
                dKdx[i] = kx.substitute_value(Var.Y, float(y)).eval_grid(
                    {Var.X: xs, Var.XI: xs})
                dKdxi[i] = kxi.substitute_value(Var.Y, float(y)).eval_grid(
                    {Var.X: xs, Var.XI: xs})
            K[n] = sol.kbar.eval_grid({Var.X: xs, Var.XI: xs})
            dKdx[n] = sol.kbar.diff(Var.X).eval_grid({Var.X: xs, Var.XI: xs})
            dKdxi[n] = sol.kbar.diff(Var.XI).eval_grid({Var.X: xs, Var.XI: xs})
        else:
            for i, y in enumerate(ys):
                Yg = np.full_like(X, y)
                K[i] = sol.k(X, XI, Yg)
                dKdx[i] = sol.dk_dx(X, XI, Yg)
                dKdxi[i] = sol.dk_dxi(X, XI, Yg)
            K[n] = sol.kbar(X, XI)
            dKdx[n] = sol.dkbar_dx(X, XI)
            dKdxi[n] = sol.dkbar_dxi(X, XI)
        interior = np.zeros((m + 1, m + 1), dtype=bool)
        for a in range(m + 1):
            interior[a, :a + 1] = True

    lam = np.array([l.eval1(Var.X, xs) for l in ls.lam])          # (n, m+1)
    dlam = np.array([l.diff(Var.X).eval1(Var.X, xs) for l in ls.lam])
    mu = ls.mu.eval1(Var.X, xs)
    dmu = ls.mu.diff(Var.X).eval1(Var.X, xs)
    SIG = np.array([[ls.sigma[i][j].eval1(Var.X, xs) for j in range(n)]
                    for i in range(n)])                           # [i,j,b]
    TH = np.array([t.eval1(Var.X, xs) for t in ls.theta])
    WW = np.array([w.eval1(Var.X, xs) for w in ls.W])

    coup = np.einsum("jib,jab->iab", SIG, K[:n]) / n
    e_k = mu[:, None] * dKdx[:n] - lam[:, None, :] * dKdxi[:n] \
        - dlam[:, None, :] * K[:n] - coup - TH[:, None, :] * K[n][None]
    e_kb = mu[:, None] * dKdx[n] + mu[None, :] * dKdxi[n] \
        + dmu[None, :] * K[n] - np.einsum("jb,jab->ab", WW, K[:n]) / n
    r_pde_k = float(np.abs(e_k[:, interior]).max())
    r_pde_kb = float(np.abs(e_kb[interior]).max())

    diag = np.arange(len(xs))
    kdiag = K[:n, diag, diag]
    e_diag = kdiag + TH / (lam + mu[None, :])
    r_diag = float(np.abs(e_diag).max())
    lam0 = lam[:, 0]
    e_left = mu[0] * K[n, :, 0] - (ls.q[:, None] * lam0[:, None] * K[:n, :, 0]
                                   ).sum(axis=0) / n
    r_left = float(np.abs(e_left).max())
    return {"pde_k": r_pde_k, "pde_kbar": r_pde_kb,
            "bc_diag": r_diag, "bc_left": r_left}


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------


def write_gain_csv(table: GainTable, path, manifest: str | None = None) -> None:
    """One row per xi: columns xi, kbar, then k at each y (header carries the
    y values). Lines starting with '#' are comments."""
    buf = io.StringIO()
    if manifest:
        buf.write(f"# manifest: {manifest}\n")
    buf.write(f"# sampled: {int(table.sampled)}\n")
    cols = ",".join(f"k@y={v:.12g}" for v in table.grid_y)
    buf.write(f"xi,kbar,{cols}\n")
    for j, xi in enumerate(table.grid_xi):
        vals = ",".join(f"{table.k[i, j]:.17g}" for i in range(len(table.grid_y)))
        buf.write(f"{xi:.17g},{table.kbar[j]:.17g},{vals}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())


def read_gain_csv(path) -> GainTable:
    sampled = False
    header = None
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# sampled:"):
                    sampled = bool(int(line.split(":")[1]))
                continue
            if header is None:
                header = line.split(",")
                continue
            rows.append([float(v) for v in line.split(",")])
    if header is None or not rows:
        raise ValueError(f"no gain table found in {path}")
    grid_y = np.array([float(h.split("=", 1)[1]) for h in header[2:]])
    data = np.asarray(rows)
    return GainTable(grid_xi=data[:, 0], grid_y=grid_y,
                     k=data[:, 2:].T, kbar=data[:, 1], sampled=sampled)
