"""Reference finite-volume solver for 2-D transient single-phase gas flow.

Mass conservation and Darcy's law give, per control volume, a balance of
standard-condition volumetric rates:

    sum_faces T_f (p_j - p_i) + q_i = (V_b phi T_sc / (p_sc T_res)) d(p/Z)/dt

with face transmissibility T_f = A k_harm / (mu B_g dx) evaluated at the
face, no-flow outer boundaries, and smoothed-delta well sources.  Time
stepping is backward Euler; each step runs a Picard loop that freezes the
face coefficients at the current iterate and linearizes the accumulation
term there, and solves the resulting SPD system with plain conjugate
gradients.  Summing the discrete equations telescopes the fluxes, so total
stored gas changes exactly by dt * sum(q) up to solver tolerances.

The module also owns scenario sampling and dataset assembly: everything
the neural operator trains on comes from here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

DAY = 86400.0
MILLIDARCY = 9.869233e-16  # m^2

INPUT_CHANNELS = (
    "pressure_initial",
    "porosity",
    "log_permeability",
    "well_rate",
    "time_sin",
    "time_cos",
    "pos_x",
    "pos_y",
)
OUTPUT_CHANNELS = ("pressure",)


class SolverError(RuntimeError):
    pass


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GridGeometry:
    """Areal grid: nx x ny cells of dx x dy meters, thickness h meters."""

    nx: int
    ny: int
    dx: float = 100.0
    dy: float = 100.0
    h: float = 10.0

    def __post_init__(self):
        if not (_is_pow2(self.nx) and _is_pow2(self.ny)):
            raise ValueError("cell counts must be powers of two, got %dx%d" % (self.nx, self.ny))
        if min(self.dx, self.dy, self.h) <= 0:
            raise ValueError("cell sizes must be positive")

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy * self.h

    @property
    def area_x(self) -> float:
        return self.dy * self.h

    @property
    def area_y(self) -> float:
        return self.dx * self.h


@dataclass(frozen=True)
class RockProps:
    """Permeability (m^2, elementwise positive) and porosity fields."""

    perm_x: np.ndarray
    perm_y: np.ndarray
    porosity: np.ndarray

    def __post_init__(self):
        for name in ("perm_x", "perm_y"):
            k = getattr(self, name)
            if np.any(k <= 0):
                raise ValueError("%s must be positive everywhere (uniform ellipticity)" % name)
        phi = self.porosity
        if np.any(phi <= 0) or np.any(phi >= 1):
            raise ValueError("porosity must lie strictly inside (0, 1)")


@dataclass(frozen=True)
class FluidModel:
    """Real-gas model: Z(p) = 1 / (1 + z_coeff * p), constant viscosity.

    p/Z = p (1 + z_coeff p) is strictly increasing, Z and B_g stay positive
    on [p_min, p_max], which is everything the solver relies on.  With
    z_coeff = 0 and b_g_frozen set, the equation degenerates to linear
    diffusion; that configuration exists for analytic verification.
    """

    t_res: float = 330.0
    t_sc: float = 293.15
    p_sc: float = 101325.0
    viscosity: float = 1.3e-5
    z_coeff: float = 1.25e-8
    p_min: float = 2.0e6
    p_max: float = 2.5e7
    b_g_frozen: float | None = None

    def __post_init__(self):
        if self.viscosity <= 0:
            raise ValueError("viscosity must be positive")
        if self.z_coeff < 0:
            raise ValueError("z_coeff must be nonnegative")
        if not (0 < self.p_min < self.p_max):
            raise ValueError("need 0 < p_min < p_max")

    def z(self, p):
        return 1.0 / (1.0 + self.z_coeff * p)

    def p_over_z(self, p):
        return p * (1.0 + self.z_coeff * p)

    def p_over_z_slope(self, p):
        return 1.0 + 2.0 * self.z_coeff * p

    def b_g(self, p):
        if self.b_g_frozen is not None:
            return np.broadcast_to(np.float64(self.b_g_frozen), np.shape(p)).copy() if np.shape(p) else float(self.b_g_frozen)
        return self.p_sc * self.t_res * self.z(p) / (self.t_sc * p)

    @property
    def accumulation_unit(self) -> float:
        # multiplies V_b * phi * (p/Z) into standard volumes
        return self.t_sc / (self.p_sc * self.t_res)

    @classmethod
    def linear(cls, p_ref: float, **kw) -> "FluidModel":
        """Constant-coefficient limit for the analytic diffusion oracle."""
        base = cls(z_coeff=0.0, **kw)
        return replace(base, b_g_frozen=float(base.p_sc * base.t_res / (base.t_sc * p_ref)))


@dataclass(frozen=True)
class Well:
    """Point sink/source smoothed over neighbouring cells.

    ``rates`` holds one standard-condition rate per decade in sm3/day
    (negative = withdrawal); ``eps`` is the Gaussian smoothing width in
    cells, truncated at 3*eps.
    """

    center: tuple
    rates: tuple
    eps: float = 1.0

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("smoothing width must be positive")

    @property
    def support_radius(self) -> int:
        return int(math.ceil(3.0 * self.eps))


@dataclass(frozen=True)
class Scenario:
    p0: np.ndarray
    rock: RockProps
    wells: tuple
    n_steps: int
    dt: float = 10.0 * DAY
    family: str = "withdrawal"

    def __post_init__(self):
        if self.dt <= 0 or self.n_steps < 1:
            raise ValueError("need positive step and horizon")
        if self.family not in ("withdrawal", "injection"):
            raise ValueError("unknown scenario family %r" % (self.family,))


@dataclass
class Trajectory:
    """Pressure snapshots [n_steps + 1, nx, ny], index 0 the initial field."""

    pressures: np.ndarray
    dt: float

    @property
    def n_steps(self) -> int:
        return self.pressures.shape[0] - 1


@dataclass(frozen=True)
class SolverOptions:
    """Reference-solver tolerances.

    ``substeps`` subdivides each data step for time accuracy: a single
    backward-Euler decade step deviates by ~8% of the dynamic range from
    the time-resolved solution on sampled scenarios, 16 substeps by ~0.7%,
    well below what the surrogate is asked to reach.  Snapshots are still
    taken at the data step.
    """

    tol_picard: float = 1.0        # Pa, max-norm between Picard iterates
    max_picard: int = 50
    tol_lin: float = 1e-10         # relative residual for CG
    max_lin: int = 50000
    substeps: int = 16


# --------------------------------------------------------------------------
# wells
# --------------------------------------------------------------------------


def smoothing_kernel(grid: GridGeometry, center, eps: float) -> np.ndarray:
    """Truncated Gaussian cell weights around a well, summing to one.

    Dividing by the cell area turns these weights into the discrete
    delta approximation whose integral over the grid is exactly 1.
    """
    cx, cy = center
    if not (0 <= cx < grid.nx and 0 <= cy < grid.ny):
        raise ValueError("well center %s outside %dx%d grid" % (center, grid.nx, grid.ny))
    radius = int(math.ceil(3.0 * eps))
    x = np.arange(grid.nx)
    y = np.arange(grid.ny)
    dist2 = (x[:, None] - cx) ** 2 + (y[None, :] - cy) ** 2
    w = np.exp(-0.5 * dist2 / (eps * eps))
    w[dist2 > radius * radius] = 0.0
    total = w.sum()
    if total <= 0:
        raise ValueError("empty smoothing support at %s" % (center,))
    return w / total


def well_source_field(wells, grid: GridGeometry, n_steps: int) -> np.ndarray:
    """Per-cell source rates [nx, ny, n_steps] in sm3/s.

    Rates are given per well per decade in sm3/day and converted to SI
    here, once.  Each well contributes its rate times its smoothing
    kernel, so the field summed over cells returns the total field rate.
    """
    q = np.zeros((grid.nx, grid.ny, n_steps), dtype=np.float64)
    for w in wells:
        if len(w.rates) != n_steps:
            raise ValueError(
                "well at %s has %d rate periods for a %d-step horizon"
                % (w.center, len(w.rates), n_steps)
            )
        kern = smoothing_kernel(grid, w.center, w.eps)
        rates_si = np.asarray(w.rates, dtype=np.float64) / DAY
        q += kern[:, :, None] * rates_si[None, None, :]
    return q


def wells_disjoint(wells) -> bool:
    for i in range(len(wells)):
        for j in range(i + 1, len(wells)):
            a, b = wells[i], wells[j]
            dist = math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
            if dist <= a.support_radius + b.support_radius:
                return False
    return True


# --------------------------------------------------------------------------
# implicit step
# --------------------------------------------------------------------------


def _harmonic_face_perm(rock: RockProps):
    kx, ky = rock.perm_x, rock.perm_y
    hx = 2.0 * kx[:-1, :] * kx[1:, :] / (kx[:-1, :] + kx[1:, :])
    hy = 2.0 * ky[:, :-1] * ky[:, 1:] / (ky[:, :-1] + ky[:, 1:])
    return hx, hy


def _face_transmissibilities(p, grid, rock, fluid, face_kx, face_ky):
    # fluid factor at the arithmetic face average of the current iterate
    px = 0.5 * (p[:-1, :] + p[1:, :])
    py = 0.5 * (p[:, :-1] + p[:, 1:])
    tx = grid.area_x * face_kx / (fluid.viscosity * fluid.b_g(px) * grid.dx)
    ty = grid.area_y * face_ky / (fluid.viscosity * fluid.b_g(py) * grid.dy)
    return tx, ty


def _apply_operator(p, diag, tx, ty):
    out = diag * p
    fx = tx * (p[:-1, :] - p[1:, :])
    out[:-1, :] += fx
    out[1:, :] -= fx
    fy = ty * (p[:, :-1] - p[:, 1:])
    out[:, :-1] += fy
    out[:, 1:] -= fy
    return out


def _cg(diag, tx, ty, b, tol, max_iter):
    """Plain conjugate gradients on the SPD step matrix, matrix-free.

    Canonical form: starts from zero, iterates to a relative residual.
    """
    x = np.zeros_like(b)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return x, 0
    r = b.copy()
    d = r.copy()
    rr = float(np.vdot(r, r))
    target = (tol * bnorm) ** 2
    it = 0
    while rr > target:
        if it >= max_iter:
            raise SolverError(
                "conjugate gradients stalled at relative residual %.3e after %d iterations"
                % (math.sqrt(rr) / bnorm, it)
            )
        ad = _apply_operator(d, diag, tx, ty)
        alpha = rr / float(np.vdot(d, ad))
        x += alpha * d
        r -= alpha * ad
        rr_new = float(np.vdot(r, r))
        d = r + (rr_new / rr) * d
        rr = rr_new
        it += 1
    return x, it


def step_implicit(p_n: np.ndarray, q_cells: np.ndarray, dt: float, grid: GridGeometry,
                  rock: RockProps, fluid: FluidModel,
                  opts: SolverOptions = SolverOptions()):
    """One backward-Euler step; returns (p_next, picard_iterations).

    Picard loop: face transmissibilities frozen at the iterate, the p/Z
    accumulation linearized there (chord slope), inner SPD solve by CG.
    """
    acc = grid.cell_volume * rock.porosity * fluid.accumulation_unit
    pz_n = fluid.p_over_z(p_n)
    face_kx, face_ky = _harmonic_face_perm(rock)
    p_k = p_n.copy()
    history = []
    for it in range(opts.max_picard):
        tx, ty = _face_transmissibilities(p_k, grid, rock, fluid, face_kx, face_ky)
        slope = fluid.p_over_z_slope(p_k)
        diag = acc * slope / dt
        rhs = q_cells + (acc / dt) * (slope * p_k - fluid.p_over_z(p_k) + pz_n)
        p_new, _ = _cg(diag, tx, ty, rhs, opts.tol_lin, opts.max_lin)
        delta = float(np.max(np.abs(p_new - p_k)))
        history.append(delta)
        p_k = p_new
        if delta < opts.tol_picard:
            break
    else:
        raise SolverError(
            "Picard loop did not reach %.1f Pa in %d iterations; deltas: %s"
            % (opts.tol_picard, opts.max_picard, ", ".join("%.3e" % d for d in history))
        )
    bad = (p_k < fluid.p_min) | (p_k > fluid.p_max)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise SolverError(
            "pressure %.4e Pa in cell (%d, %d) left bounds [%.3e, %.3e]"
            % (p_k[i, j], i, j, fluid.p_min, fluid.p_max)
        )
    return p_k, it + 1


def total_gas(p: np.ndarray, grid: GridGeometry, rock: RockProps, fluid: FluidModel) -> float:
    """Stored gas in standard volumes: sum of V_b phi (T_sc/(p_sc T_res)) p/Z."""
    return float(np.sum(grid.cell_volume * rock.porosity * fluid.accumulation_unit
                        * fluid.p_over_z(p)))


def simulate(scenario: Scenario, grid: GridGeometry, fluid: FluidModel,
             opts: SolverOptions = SolverOptions()) -> Trajectory:
    """Run every decade of a scenario; deterministic.

    Each data step is integrated with ``opts.substeps`` implicit substeps;
    only the data-step snapshots are kept.
    """
    if not wells_disjoint(scenario.wells):
        raise SolverError("well supports overlap")
    q = well_source_field(scenario.wells, grid, scenario.n_steps)
    out = np.empty((scenario.n_steps + 1, grid.nx, grid.ny), dtype=np.float64)
    out[0] = scenario.p0
    p = scenario.p0
    dt_sub = scenario.dt / opts.substeps
    for n in range(scenario.n_steps):
        for _ in range(opts.substeps):
            p, _ = step_implicit(p, q[:, :, n], dt_sub, grid, scenario.rock, fluid, opts)
        out[n + 1] = p
    return Trajectory(pressures=out, dt=scenario.dt)


# --------------------------------------------------------------------------
# scenario sampling
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    """Synthetic stand-in for proprietary field scenarios (declared, not a
    reconstruction): smoothed log-normal permeability, 4-12 wells, decade
    rate schedules with family-consistent sign."""

    n_steps: int = 16
    dt_days: float = 10.0
    perm_mean_md: float = 80.0
    perm_log_std: float = 1.1
    perm_smooth_cells: float = 3.0
    porosity_base: float = 0.18
    porosity_span: float = 0.06
    p0_lo: float = 1.12e7
    p0_hi: float = 1.28e7
    p0_perturb: float = 4.0e5
    wells_lo: int = 4
    wells_hi: int = 12
    rate_lo: float = 7.5e4
    rate_hi: float = 3.0e5
    well_eps: float = 1.0
    well_margin: int = 2
    well_min_dist: int = 7


def _smooth_standard_field(rng, nx, ny, smooth_cells) -> np.ndarray:
    """White noise smoothed periodically, standardized to zero mean/unit std."""
    g = rng.standard_normal((nx, ny))
    kx = np.fft.fftfreq(nx)[:, None]
    ky = np.fft.fftfreq(ny)[None, :]
    damp = np.exp(-2.0 * (np.pi * smooth_cells) ** 2 * (kx**2 + ky**2))
    sm = np.fft.ifft2(np.fft.fft2(g) * damp).real
    sd = sm.std()
    if sd < 1e-12:
        return np.zeros_like(sm)
    return (sm - sm.mean()) / sd


def _place_wells(rng, grid: GridGeometry, cfg: SamplerConfig, n_wells: int):
    margin = cfg.well_margin + int(math.ceil(3 * cfg.well_eps))
    # the disjoint-support invariant needs centers strictly farther apart
    # than twice the truncation radius, whatever the configured spacing
    min_dist = max(cfg.well_min_dist, 2 * int(math.ceil(3 * cfg.well_eps)) + 1)
    centers = []
    attempts = 0
    while len(centers) < n_wells:
        attempts += 1
        if attempts > 2000:
            break  # accept fewer wells on pathological draws
        cx = int(rng.integers(margin, grid.nx - margin))
        cy = int(rng.integers(margin, grid.ny - margin))
        if all((cx - a) ** 2 + (cy - b) ** 2 >= min_dist**2 for a, b in centers):
            centers.append((cx, cy))
    return centers


def _rate_schedule(rng, cfg: SamplerConfig, sign: float) -> tuple:
    base = rng.uniform(cfg.rate_lo, cfg.rate_hi)
    shape = 0.5 + 0.5 * np.sin(np.pi * (np.arange(cfg.n_steps) + 0.5) / cfg.n_steps)
    jitter = rng.uniform(0.7, 1.3, size=cfg.n_steps)
    return tuple(sign * base * shape * jitter)


def sample_scenario(k: int, family: str, seed: int, grid: GridGeometry,
                    cfg: SamplerConfig = SamplerConfig()) -> Scenario:
    """Scenario k of a family; the stream depends only on (seed, family, k)."""
    if family not in ("withdrawal", "injection"):
        raise ValueError("unknown family %r" % (family,))
    sign = -1.0 if family == "withdrawal" else 1.0
    fam_code = 0 if family == "withdrawal" else 1
    rng = np.random.default_rng((int(seed), fam_code, int(k)))
    logk = cfg.perm_log_std * _smooth_standard_field(rng, grid.nx, grid.ny, cfg.perm_smooth_cells)
    perm = cfg.perm_mean_md * MILLIDARCY * np.exp(logk)
    phi = cfg.porosity_base + cfg.porosity_span * np.tanh(
        _smooth_standard_field(rng, grid.nx, grid.ny, cfg.perm_smooth_cells) / 1.5
    )
    rock = RockProps(perm_x=perm, perm_y=perm.copy(), porosity=phi)
    p_base = rng.uniform(cfg.p0_lo, cfg.p0_hi)
    p0 = p_base + cfg.p0_perturb * _smooth_standard_field(
        rng, grid.nx, grid.ny, cfg.perm_smooth_cells
    ) * rng.uniform(0.0, 1.0)
    n_wells = int(rng.integers(cfg.wells_lo, cfg.wells_hi + 1))
    centers = _place_wells(rng, grid, cfg, n_wells)
    wells = tuple(
        Well(center=c, rates=_rate_schedule(rng, cfg, sign), eps=cfg.well_eps)
        for c in centers
    )
    return Scenario(p0=p0, rock=rock, wells=wells, n_steps=cfg.n_steps,
                    dt=cfg.dt_days * DAY, family=family)


def sample_scenarios(n: int, family: str, seed: int, grid: GridGeometry,
                     cfg: SamplerConfig = SamplerConfig()):
    """Deterministic scenario draws; stream k depends only on (seed, family, k)."""
    if n < 1:
        raise ValueError("need at least one scenario")
    return [sample_scenario(k, family, seed, grid, cfg) for k in range(n)]


# --------------------------------------------------------------------------
# dataset assembly
# --------------------------------------------------------------------------


@dataclass
class Dataset:
    """Normalized channel stacks and targets in float32 plus the constants
    needed to undo the scaling; the operator module consumes this as-is."""

    inputs: np.ndarray    # [n, C_in, nx, ny, nt] float32 in [0, 1]
    targets: np.ndarray   # [n, 1, nx, ny, nt] float32 in [0, 1]
    families: tuple
    constants: dict
    seed: int
    channel_names: tuple = INPUT_CHANNELS

    @property
    def n_scenarios(self) -> int:
        return self.inputs.shape[0]

    @property
    def grid_shape(self) -> tuple:
        return self.inputs.shape[2:]

    def denormalize_pressure(self, u: np.ndarray) -> np.ndarray:
        lo, hi = self.constants["p_lo"], self.constants["p_hi"]
        return u * (hi - lo) + lo


def normalize(x, lo, hi):
    if hi <= lo:
        return np.full_like(np.asarray(x, dtype=np.float64), 0.5)
    return (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)


def time_encoding(n_steps: int):
    tau = (np.arange(1, n_steps + 1) - 0.5) / n_steps
    return np.sin(np.pi * tau), 0.5 * (np.cos(np.pi * tau) + 1.0)


def build_dataset(scenarios, trajectories, grid: GridGeometry, seed: int) -> Dataset:
    """Stack normalized input channels and targets for matched pairs.

    Channel order is pinned by INPUT_CHANNELS; min-max constants are taken
    over the whole dataset and recorded for the round trip.
    """
    if len(scenarios) != len(trajectories):
        raise ValueError("scenario/trajectory count mismatch")
    n = len(scenarios)
    nt = scenarios[0].n_steps
    nx, ny = grid.nx, grid.ny

    p_lo = min(min(t.pressures.min() for t in trajectories),
               min(s.p0.min() for s in scenarios))
    p_hi = max(max(t.pressures.max() for t in trajectories),
               max(s.p0.max() for s in scenarios))
    logk_all = [np.log(s.rock.perm_x / MILLIDARCY) for s in scenarios]
    lk_lo = min(a.min() for a in logk_all)
    lk_hi = max(a.max() for a in logk_all)
    q_fields = [well_source_field(s.wells, grid, nt) * DAY for s in scenarios]
    q_lo = min(a.min() for a in q_fields)
    q_hi = max(a.max() for a in q_fields)
    constants = {"p_lo": float(p_lo), "p_hi": float(p_hi),
                 "logk_lo": float(lk_lo), "logk_hi": float(lk_hi),
                 "q_lo": float(q_lo), "q_hi": float(q_hi)}

    t_sin, t_cos = time_encoding(nt)
    pos_x = np.linspace(0.0, 1.0, nx)[:, None, None]
    pos_y = np.linspace(0.0, 1.0, ny)[None, :, None]

    inputs = np.empty((n, len(INPUT_CHANNELS), nx, ny, nt), dtype=np.float32)
    targets = np.empty((n, 1, nx, ny, nt), dtype=np.float32)
    for i, (s, traj) in enumerate(zip(scenarios, trajectories)):
        if traj.pressures.shape != (nt + 1, nx, ny):
            raise ValueError("trajectory %d has shape %s" % (i, traj.pressures.shape))
        if not np.isfinite(traj.pressures).all():
            raise ValueError("non-finite pressures in trajectory %d" % i)
        inputs[i, 0] = normalize(s.p0, p_lo, p_hi)[:, :, None]
        inputs[i, 1] = s.rock.porosity[:, :, None]
        inputs[i, 2] = normalize(logk_all[i], lk_lo, lk_hi)[:, :, None]
        inputs[i, 3] = normalize(q_fields[i], q_lo, q_hi)
        inputs[i, 4] = t_sin[None, None, :]
        inputs[i, 5] = t_cos[None, None, :]
        inputs[i, 6] = pos_x
        inputs[i, 7] = pos_y
        targets[i, 0] = np.moveaxis(normalize(traj.pressures[1:], p_lo, p_hi), 0, -1)
    return Dataset(inputs=inputs, targets=targets,
                   families=tuple(s.family for s in scenarios),
                   constants=constants, seed=int(seed))
