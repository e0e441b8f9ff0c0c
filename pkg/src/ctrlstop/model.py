"""Problem data for the controller-vs-stopper game and machine checks of its
standing assumptions by dense sampling.

A ProblemSpec holds the SDE coefficients b, sigma, the payoffs f (cost per
unit of control), g (stopping payoff), h (running payoff), the discount rate
and horizon.  validate_assumptions estimates the structural constants
(ellipticity, growth, the obstacle drift term) and flags violations of the
gates that the downstream algorithms rely on:

  * f, g, h >= 0,
  * sigma*sigma^T locally elliptic (theta_B > 0 on each tested ball),
  * |grad g| <= f,
  * t -> f(t, x) non-increasing,
  * Theta = h + dg/dt + L g - r g finite (its negative part defines K2).
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .expressions import (
    Expression,
    ParseError,
    eval_with_derivatives,
    parse_expression,
    time_derivative,
)

__all__ = [
    "ProblemSpec",
    "SamplePlan",
    "AssumptionReport",
    "ConfigError",
    "validate_assumptions",
    "load_problem",
    "parse_config_text",
]

CHECK_TOL = 1e-8


class ConfigError(ValueError):
    """Malformed problem file: unknown key, missing key or bad value."""


@dataclass(frozen=True)
class ProblemSpec:
    """Game data: dX = b dt + sigma dW + n dnu, payoffs f, g, h, rate r, horizon T."""

    d: int
    T: float
    r: float
    b: tuple[Expression, ...]
    sigma: tuple[tuple[Expression, ...], ...]
    f: Expression
    g: Expression
    h: Expression
    fd_step: float = 1e-5

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be >= 1")
        if self.T <= 0:
            raise ValueError("horizon must be positive")
        if self.r < 0:
            raise ValueError("rate must be nonnegative")
        if len(self.b) != self.d:
            raise ValueError(f"drift must have {self.d} components")
        if len(self.sigma) != self.d or not self.sigma:
            raise ValueError(f"sigma must have {self.d} rows")
        ncols = len(self.sigma[0])
        if any(len(row) != ncols for row in self.sigma):
            raise ValueError("sigma rows must have equal length")
        for e in self.b:
            if e.depends_on_t:
                raise ValueError("drift entries may not depend on t")
            if e.max_space_index() > self.d:
                raise ValueError(f"drift uses x{e.max_space_index()} beyond dim {self.d}")
        for row in self.sigma:
            for e in row:
                if e.depends_on_t:
                    raise ValueError("sigma entries may not depend on t")
                if e.max_space_index() > self.d:
                    raise ValueError(f"sigma uses x{e.max_space_index()} beyond dim {self.d}")
        for name in ("f", "g", "h"):
            e = getattr(self, name)
            if e.max_space_index() > self.d:
                raise ValueError(f"{name} uses x{e.max_space_index()} beyond dim {self.d}")

    @property
    def d_noise(self) -> int:
        return len(self.sigma[0])

    def drift(self, x):
        """Drift vector at x; x has shape (d,) or (d, n). Returns same shape."""
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape)
        for i, e in enumerate(self.b):
            out[i] = e(0.0, x)
        return out

    def diffusion(self, x):
        """Diffusion matrix at x; returns shape (d, d') or (d, d', n)."""
        x = np.asarray(x, dtype=float)
        out = np.empty((self.d, self.d_noise) + x.shape[1:])
        for i, row in enumerate(self.sigma):
            for j, e in enumerate(row):
                out[i, j] = e(0.0, x)
        return out

    def a_matrix(self, x):
        """a = sigma sigma^T at a single point x of shape (d,)."""
        s = self.diffusion(np.asarray(x, dtype=float))
        return s @ s.T

    def generator_of(self, e: Expression, t, x):
        """(L e)(t, x) = 0.5 tr(a D^2 e) + <b, grad e> at one point."""
        _, grad, hess = eval_with_derivatives(e, (t, x), order=2, fd_step=self.fd_step)
        a = self.a_matrix(x)
        bvec = self.drift(np.asarray(x, dtype=float))
        return 0.5 * float(np.trace(a @ hess)) + float(bvec @ grad)

    def theta(self, t, x):
        """Theta = h + dg/dt + L g - r g, the drift of the stopping payoff."""
        h_val = float(self.h(t, np.asarray(x, dtype=float)))
        g_val = float(self.g(t, np.asarray(x, dtype=float)))
        return (
            h_val
            + time_derivative(self.g, (t, x), self.fd_step)
            + self.generator_of(self.g, t, x)
            - self.r * g_val
        )


@dataclass(frozen=True)
class SamplePlan:
    radii: tuple[float, ...]
    counts: tuple[int, ...]
    rng_seed: int = 0

    def __post_init__(self):
        if len(self.radii) != len(self.counts):
            raise ValueError("radii and counts must have equal length")
        if any(r <= 0 for r in self.radii) or any(c < 8 for c in self.counts):
            raise ValueError("radii must be positive and counts >= 8")


@dataclass
class AssumptionReport:
    linear_growth_D1: float
    ellipticity_theta: dict[float, float]
    grad_g_le_f_margin: float
    Theta_min: float
    K0: float
    K1: float
    K2: float
    f_time_monotone: bool
    violations: list[tuple[str, tuple, float]] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        lines = [
            f"D1 (linear growth)      = {self.linear_growth_D1:.6g}",
            "theta_B (ellipticity)   = "
            + ", ".join(f"R={r:g}: {v:.6g}" for r, v in sorted(self.ellipticity_theta.items())),
            f"min(f - |grad g|)       = {self.grad_g_le_f_margin:.6g}",
            f"Theta_min               = {self.Theta_min:.6g}",
            f"K0 (time growth of g,h) = {self.K0:.6g}",
            f"K1 (quadratic growth)   = {self.K1:.6g}",
            f"K2 (= max(0,-Theta_min))= {self.K2:.6g}",
            f"f time non-increasing   = {self.f_time_monotone}",
            f"valid                   = {self.valid}",
        ]
        if self.violations:
            lines.append(f"violations ({len(self.violations)}):")
            for name, point, value in self.violations[:20]:
                lines.append(f"  {name} at {point}: {value:.6g}")
            if len(self.violations) > 20:
                lines.append(f"  ... and {len(self.violations) - 20} more")
        return "\n".join(lines)


def _sample_points(spec: ProblemSpec, radius: float, count: int, rng: np.random.Generator):
    """Stratified lattice plus uniform random points in [0,T] x ball(radius)."""
    d = spec.d
    n_grid = max(count // 2, 4)
    per_axis = max(2, int(round(n_grid ** (1.0 / (d + 1)))))
    ts = np.linspace(0.0, spec.T, per_axis)
    axes = [np.linspace(-radius, radius, per_axis) for _ in range(d)]
    mesh = np.meshgrid(ts, *axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=0)  # (d+1, n)
    if d > 1:
        keep = np.sum(pts[1:] ** 2, axis=0) <= radius**2
        pts = pts[:, keep]
    n_rand = count - pts.shape[1]
    out = [pts]
    while n_rand > 0:
        batch = max(n_rand * 2, 16)
        xr = rng.uniform(-radius, radius, size=(d, batch))
        keep = np.sum(xr**2, axis=0) <= radius**2
        xr = xr[:, keep][:, :n_rand]
        tr = rng.uniform(0.0, spec.T, size=xr.shape[1])
        out.append(np.vstack([tr, xr]))
        n_rand -= xr.shape[1]
    return np.concatenate(out, axis=1)  # rows: t, x1..xd


def validate_assumptions(spec: ProblemSpec, plan: SamplePlan) -> AssumptionReport:
    """Estimate the structural constants over the sample plan and flag violations.

    Failures never raise: each violated check appends an entry
    (check name, (t, x...), offending value) to the report.
    """
    rng = np.random.default_rng(plan.rng_seed)
    violations: list[tuple[str, tuple, float]] = []
    d1 = 0.0
    theta_map: dict[float, float] = {}
    margin = math.inf
    theta_min = math.inf
    k0 = 0.0
    k1 = 0.0
    f_monotone = True

    for radius, count in zip(plan.radii, plan.counts):
        pts = _sample_points(spec, radius, count, rng)
        theta_b = math.inf
        for col in range(pts.shape[1]):
            t = float(pts[0, col])
            x = pts[1:, col].copy()
            key = (round(t, 6),) + tuple(np.round(x, 6))
            try:
                fv = float(spec.f(t, x))
                gv = float(spec.g(t, x))
                hv = float(spec.h(t, x))
            except ArithmeticError as exc:
                violations.append((f"evaluation: {exc}", key, math.nan))
                continue
            for name, v in (("f>=0", fv), ("g>=0", gv), ("h>=0", hv)):
                if v < -CHECK_TOL:
                    violations.append((name, key, v))
            if not (math.isfinite(fv) and math.isfinite(gv) and math.isfinite(hv)):
                violations.append(("finite payoffs", key, math.nan))
                continue

            # SDE coefficients: linear growth and local ellipticity
            bvec = spec.drift(x)
            smat = spec.diffusion(x)
            norm = float(np.linalg.norm(bvec)) + float(np.linalg.norm(smat))
            d1 = max(d1, norm / (1.0 + float(np.linalg.norm(x))))
            a = smat @ smat.T
            lam_min = float(np.linalg.eigvalsh(a)[0])
            theta_b = min(theta_b, lam_min)

            # differentiability probes and gradient constraint
            try:
                _, grad_g, hess_g = eval_with_derivatives(
                    spec.g, (t, x), order=2, fd_step=spec.fd_step
                )
                dt_g = time_derivative(spec.g, (t, x), spec.fd_step)
                _, grad_h, _ = eval_with_derivatives(spec.h, (t, x), order=1, fd_step=spec.fd_step)
                f_sq = parse_cache_square(spec)
                _, grad_f2, hess_f2 = eval_with_derivatives(
                    f_sq, (t, x), order=2, fd_step=spec.fd_step
                )
            except ArithmeticError as exc:
                violations.append((f"derivative probe: {exc}", key, math.nan))
                continue
            probes = np.concatenate(
                [grad_g, hess_g.ravel(), [dt_g], grad_h, grad_f2, hess_f2.ravel()]
            )
            if not np.all(np.isfinite(probes)):
                violations.append(("finite derivatives of g, h, f^2", key, math.nan))
                continue

            m = fv - float(np.linalg.norm(grad_g))
            margin = min(margin, m)
            if m < -CHECK_TOL:
                violations.append(("|grad g| <= f", key, m))

            # Theta and growth constants
            theta_val = (
                hv + dt_g + 0.5 * float(np.trace(spec.a_matrix(x) @ hess_g)) + float(bvec @ grad_g)
                - spec.r * gv
            )
            theta_min = min(theta_min, theta_val)
            if not math.isfinite(theta_val):
                violations.append(("finite Theta", key, theta_val))
            k1 = max(k1, (gv + hv) / (1.0 + float(x @ x)))

            # forward time increments of g, h and monotonicity of f
            dt_probe = spec.T / 64.0
            t2 = min(t + dt_probe, spec.T)
            if t2 > t:
                g2 = float(spec.g(t2, x))
                h2 = float(spec.h(t2, x))
                f2v = float(spec.f(t2, x))
                k0 = max(k0, (g2 - gv) / (t2 - t), (h2 - hv) / (t2 - t))
                if f2v > fv + CHECK_TOL:
                    f_monotone = False
                    violations.append(("f non-increasing in t", key, f2v - fv))
        theta_map[radius] = theta_b
        if theta_b <= CHECK_TOL:
            violations.append(("theta_B > 0", (radius,), theta_b))

    k0 = max(k0, 0.0)
    return AssumptionReport(
        linear_growth_D1=d1,
        ellipticity_theta=theta_map,
        grad_g_le_f_margin=margin,
        Theta_min=theta_min,
        K0=k0,
        K1=k1,
        K2=max(0.0, -theta_min),
        f_time_monotone=f_monotone,
        violations=violations,
    )


_F_SQ_CACHE: dict[int, Expression] = {}


def parse_cache_square(spec: ProblemSpec) -> Expression:
    """Expression for f^2 (used by the differentiability probes)."""
    key = id(spec)
    if key not in _F_SQ_CACHE:
        _F_SQ_CACHE[key] = parse_expression(f"({spec.f}) * ({spec.f})")
    return _F_SQ_CACHE[key]


# ---------------------------------------------------------------------------
# Problem files
# ---------------------------------------------------------------------------
#
# Plain key/value format, one `key = value` per line, '#' starts a comment.
# Keys:
#   dim, horizon, rate, fd_step (optional), drift[i], sigma[i][j],
#   f, g, h, sample_plan.radii, sample_plan.counts, sample_plan.rng_seed
# Values of drift/sigma/f/g/h are expression strings.  Unknown keys error.

_KNOWN_SCALARS = {"dim", "horizon", "rate", "fd_step"}
_KNOWN_PLAN = {"sample_plan.radii", "sample_plan.counts", "sample_plan.rng_seed"}
_SIM_KEYS = {
    "simulate.start",
    "simulate.paths",
    "simulate.steps",
    "simulate.seed",
    "simulate.band",
}
_DRIFT_KEY = re.compile(r"^drift\[([1-9][0-9]*)\]$")
_SIGMA_KEY = re.compile(r"^sigma\[([1-9][0-9]*)\]\[([1-9][0-9]*)\]$")


def parse_config_text(text: str, source: str = "<string>"):
    """Parse a problem file; returns (ProblemSpec, SamplePlan, sim_defaults dict)."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        key, value = key.strip(), value.strip()
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value

    for key in raw:
        if key in _KNOWN_SCALARS or key in _KNOWN_PLAN or key in _SIM_KEYS:
            continue
        if key in ("f", "g", "h"):
            continue
        if _DRIFT_KEY.match(key) or _SIGMA_KEY.match(key):
            continue
        raise ConfigError(f"{source}: unknown key {key!r}")

    def need(key):
        if key not in raw:
            raise ConfigError(f"{source}: missing key {key!r}")
        return raw[key]

    try:
        d = int(need("dim"))
        horizon = float(need("horizon"))
        rate = float(need("rate"))
        fd_step = float(raw.get("fd_step", "1e-5"))
    except ValueError as exc:
        raise ConfigError(f"{source}: bad numeric value: {exc}") from exc

    drift_entries: dict[int, str] = {}
    sigma_entries: dict[tuple[int, int], str] = {}
    for key, value in raw.items():
        m = _DRIFT_KEY.match(key)
        if m:
            drift_entries[int(m.group(1))] = value
        m = _SIGMA_KEY.match(key)
        if m:
            sigma_entries[(int(m.group(1)), int(m.group(2)))] = value
    if sorted(drift_entries) != list(range(1, d + 1)):
        raise ConfigError(f"{source}: drift[1..{d}] must all be present")
    if not sigma_entries:
        raise ConfigError(f"{source}: sigma[i][j] entries missing")
    d_noise = max(j for _, j in sigma_entries)
    expected = {(i, j) for i in range(1, d + 1) for j in range(1, d_noise + 1)}
    if set(sigma_entries) != expected:
        raise ConfigError(f"{source}: sigma must be a full {d}x{d_noise} matrix")

    def parse_expr(key, src_text):
        try:
            return parse_expression(src_text)
        except ParseError as exc:
            raise ConfigError(f"{source}: in {key!r}: {exc}") from exc

    b = tuple(parse_expr(f"drift[{i}]", drift_entries[i]) for i in range(1, d + 1))
    sigma = tuple(
        tuple(parse_expr(f"sigma[{i}][{j}]", sigma_entries[(i, j)]) for j in range(1, d_noise + 1))
        for i in range(1, d + 1)
    )
    spec = ProblemSpec(
        d=d,
        T=horizon,
        r=rate,
        b=b,
        sigma=sigma,
        f=parse_expr("f", need("f")),
        g=parse_expr("g", need("g")),
        h=parse_expr("h", need("h")),
        fd_step=fd_step,
    )

    def parse_floats(key, default=None):
        if key not in raw:
            if default is None:
                raise ConfigError(f"{source}: missing key {key!r}")
            return default
        try:
            return tuple(float(v) for v in raw[key].split(",") if v.strip())
        except ValueError as exc:
            raise ConfigError(f"{source}: bad list for {key!r}: {exc}") from exc

    radii = parse_floats("sample_plan.radii", (2.0,))
    counts = tuple(int(c) for c in parse_floats("sample_plan.counts", (256.0,) * len(radii)))
    seed = int(float(raw.get("sample_plan.rng_seed", "0")))
    plan = SamplePlan(radii=radii, counts=counts, rng_seed=seed)

    sim_defaults = {k.split(".", 1)[1]: v for k, v in raw.items() if k in _SIM_KEYS}
    return spec, plan, sim_defaults


def load_problem(path):
    """Read and parse a problem file from disk."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))
