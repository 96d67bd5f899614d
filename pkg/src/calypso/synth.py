"""Synthetic data generator with known ground-truth dynamics.

Builds a random patch graph (commute flows between communities, transfer
flows into healthcare patches), draws smooth region-level parameters
inside the calibration bounds (seasonal transmission, constant recovery/
reinfection/intervention/symptomatic rates), simulates the ground-truth
trajectory, and derives observed weekly case counts by carrying each
week's new infections for a per-case duration sampled uniformly from the
persistence range.  Each weekly infection cohort is rounded to an
integer count before its durations are split, so observed counts are
nonnegative integers.

Feature channels: observed case counts, a lag-1 scaled copy of incidence
with 10% relative noise (co-circulating-strain proxy), a lag-2 scaled
copy (prescription proxy), and population-normalized incidence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io, seeding
from .core import (
    DEFAULT_PARAM_BOUNDS,
    GENERAL,
    NON_GENERAL,
    DataSet,
    DiseaseParams,
    PatchGraph,
    Trajectory,
    build_travel_matrix,
)
from .errors import InfeasibleSpec
from .sim import SimConfig, simulate

FEATURE_NAMES = ("mrsa", "mssa", "prescriptions", "norm_incidence")


@dataclass(frozen=True)
class SynthSpec:
    n_patches: int = 24
    n_regions: int = 4
    population_range: tuple[float, float] = (2_000.0, 20_000.0)
    facility_population_scale: float = 1.0  # multiplier on healthcare-patch populations
    weeks: int = 120                   # training window
    horizon: int = 4
    seed: int = 1
    mobility_density: float = 0.35     # chance an ordered pair carries flow
    persistence_range: tuple[int, int] = (2, 4)
    outflow_range: tuple[float, float] = (0.08, 0.25)
    beta_base_range: tuple[float, float] = (0.45, 0.6)
    beta_amplitude: float = 0.18
    beta_period: float = 52.0
    # seasonal forcing is synchronized statewide; its peak sits at
    # beta_peak_week (window end when None) plus a small per-region jitter
    beta_peak_week: float | None = None
    beta_phase_jitter: float = 2.0
    gamma_range: tuple[float, float] = (0.3, 0.4)
    delta_range: tuple[float, float] = (0.05, 0.12)
    kappa_range: tuple[float, float] = (0.1, 0.3)
    epsilon_range: tuple[float, float] = (0.4, 0.7)
    seed_fraction_range: tuple[float, float] = (0.002, 0.01)

    def __post_init__(self):
        if self.n_regions < 1 or self.n_patches < 2 * self.n_regions:
            raise InfeasibleSpec("need at least two patches (general + healthcare) per region")
        lo, hi = self.persistence_range
        if not (1 <= lo <= hi):
            raise InfeasibleSpec("persistence range must satisfy 1 <= lo <= hi")
        if self.weeks < 8 or self.horizon < 0:
            raise InfeasibleSpec("weeks must be >= 8 and horizon >= 0")
        for name, rng_ in (("beta", self.beta_base_range), ("gamma", self.gamma_range),
                           ("delta", self.delta_range), ("kappa", self.kappa_range),
                           ("epsilon", self.epsilon_range)):
            blo, bhi = DEFAULT_PARAM_BOUNDS[name]
            if rng_[0] < blo or rng_[1] > bhi:
                raise InfeasibleSpec(f"{name} range {rng_} leaves its bound interval")
        if self.beta_base_range[1] + self.beta_amplitude > DEFAULT_PARAM_BOUNDS["beta"][1]:
            raise InfeasibleSpec("beta base + amplitude exceeds the beta bound")


@dataclass(frozen=True)
class SynthBundle:
    graph: PatchGraph
    data: DataSet
    trajectory: Trajectory          # ground truth over weeks + horizon
    params: DiseaseParams           # generating parameters over weeks + horizon
    commute_flows: dict = field(repr=False, default_factory=dict)
    facility_flows: dict = field(repr=False, default_factory=dict)

    def write(self, out_dir) -> list[Path]:
        written = io.write_inputs(out_dir, self.graph, self.data, self.commute_flows, self.facility_flows)
        written.append(io.write_ground_truth(Path(out_dir) / "ground_truth.csv", self.graph, self.params, self.trajectory))
        return written


def _build_graph(spec: SynthSpec, rng: np.random.Generator):
    per_region = spec.n_patches // spec.n_regions
    remainder = spec.n_patches % spec.n_regions
    populations, region_of, category_of = {}, {}, {}
    for r in range(spec.n_regions):
        rid = f"R{r}"
        count = per_region + (1 if r < remainder else 0)
        n_general = max(1, count - count // 2)
        for j in range(count):
            general = j < n_general
            pid = f"{rid}-{'G' if general else 'N'}{j if general else j - n_general:02d}"
            scale = 1.0 if general else spec.facility_population_scale
            populations[pid] = float(rng.uniform(*spec.population_range)) * scale
            region_of[pid] = rid
            category_of[pid] = GENERAL if general else NON_GENERAL
    ids = sorted(populations)
    general_ids = [p for p in ids if category_of[p] == GENERAL]
    facility_ids = [p for p in ids if category_of[p] == NON_GENERAL]

    commute, facility = {}, {}
    for src in ids:
        out_frac = rng.uniform(*spec.outflow_range)
        commute_targets = [
            d for d in general_ids
            if d != src and rng.random() < spec.mobility_density * (1.0 if region_of[d] == region_of[src] else 0.4)
        ]
        facility_targets = [
            d for d in facility_ids
            if d != src and rng.random() < spec.mobility_density * (1.0 if region_of[d] == region_of[src] else 0.25)
        ]
        targets = commute_targets + facility_targets
        if not targets:
            continue
        weights = rng.uniform(0.2, 1.0, size=len(targets))
        weights = weights / weights.sum() * out_frac * populations[src]
        for d, wgt in zip(commute_targets, weights[: len(commute_targets)]):
            commute[(src, d)] = float(wgt)
        for d, wgt in zip(facility_targets, weights[len(commute_targets):]):
            facility[(src, d)] = float(wgt)

    theta = build_travel_matrix(commute, facility, populations)
    return PatchGraph(populations, region_of, category_of, theta), commute, facility


def _draw_params(spec: SynthSpec, region_ids, rng: np.random.Generator) -> DiseaseParams:
    total = spec.weeks + spec.horizon
    t = np.arange(total)
    n_regions = len(region_ids)
    base = rng.uniform(*spec.beta_base_range, size=n_regions)
    peak = spec.weeks if spec.beta_peak_week is None else spec.beta_peak_week
    anchor = (0.25 * spec.beta_period - peak) % spec.beta_period
    phase = anchor + rng.uniform(-spec.beta_phase_jitter, spec.beta_phase_jitter, size=n_regions)
    beta = base[:, None] + spec.beta_amplitude * np.sin(2 * np.pi * (t[None, :] + phase[:, None]) / spec.beta_period)
    lo, hi = DEFAULT_PARAM_BOUNDS["beta"]
    beta = np.clip(beta, lo, hi)

    def const(rng_pair):
        return np.repeat(rng.uniform(*rng_pair, size=n_regions)[:, None], total, axis=1)

    return DiseaseParams(
        region_ids=tuple(region_ids),
        beta=beta,
        gamma=const(spec.gamma_range),
        delta=const(spec.delta_range),
        kappa=const(spec.kappa_range),
        epsilon=const(spec.epsilon_range),
    )


def _observe(traj: Trajectory, spec: SynthSpec, populations: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Weekly observed counts from integerized infection cohorts."""
    new_inf = traj.new_infections
    n_patches, total = new_inf.shape
    lo, hi = spec.persistence_range
    n_durations = hi - lo + 1
    probs = np.full(n_durations, 1.0 / n_durations)
    observed = np.zeros((n_patches, total))
    for p in range(n_patches):
        for s in range(total):
            cohort = int(np.rint(new_inf[p, s]))
            if cohort <= 0:
                continue
            if n_durations == 1:
                counts = [cohort]
            else:
                counts = rng.multinomial(cohort, probs)
            for d_idx, c in enumerate(counts):
                if c:
                    observed[p, s : s + lo + d_idx] += c
    return np.minimum(observed, np.rint(populations)[:, None])


def _features(observed: np.ndarray, traj: Trajectory, populations: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    incidence = np.rint(traj.new_infections)
    lag1 = np.concatenate([np.zeros((incidence.shape[0], 1)), incidence[:, :-1]], axis=1)
    lag2 = np.concatenate([np.zeros((incidence.shape[0], 2)), incidence[:, :-2]], axis=1)
    mssa = np.clip(1.6 * lag1 * (1.0 + 0.1 * rng.standard_normal(lag1.shape)), 0.0, None)
    rx = np.clip(4.0 * lag2 * (1.0 + 0.1 * rng.standard_normal(lag2.shape)), 0.0, None)
    norm_inc = incidence / populations[:, None]
    return np.stack([observed, mssa, rx, norm_inc], axis=2)


def generate(spec: SynthSpec) -> SynthBundle:
    """Produce (graph, dataset, ground-truth trajectory, parameters)."""
    rng_graph = seeding.spawn_rng(spec.seed, seeding.SYNTH, 0)
    rng_params = seeding.spawn_rng(spec.seed, seeding.SYNTH, 1)
    rng_obs = seeding.spawn_rng(spec.seed, seeding.SYNTH, 2)
    rng_feat = seeding.spawn_rng(spec.seed, seeding.SYNTH, 3)

    graph, commute, facility = _build_graph(spec, rng_graph)
    params = _draw_params(spec, graph.region_ids, rng_params)
    init = rng_params.uniform(*spec.seed_fraction_range, size=graph.n_patches) * graph.populations
    traj = simulate(graph, params, init, SimConfig(steps=spec.weeks + spec.horizon))
    observed = _observe(traj, spec, graph.populations, rng_obs)
    features = _features(observed, traj, graph.populations, rng_feat)
    data = DataSet(
        features=features,
        observed=observed,
        initial_infections=init,
        horizon=spec.horizon,
        window=spec.weeks,
        feature_names=FEATURE_NAMES,
    )
    return SynthBundle(
        graph=graph, data=data, trajectory=traj, params=params,
        commute_flows=commute, facility_flows=facility,
    )
