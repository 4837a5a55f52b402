"""Direct gradient refinement of dense UV fields over calibrated view
pairs.

There is no learned predictor here: the per-pixel UV values are the
optimization variables. Each iteration rebuilds the matchability of every
pair at the current UVs, assembles the weighted correspondence gradients
plus the anchor term, and steps all views simultaneously. Masks and part
labels never move.

The trace records the state BEFORE each step plus the final state, so a
run of n iterations yields n+1 trace rows.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field, replace

import numpy as np
from sklearn.base import BaseEstimator

from .consistency import MatchabilityConfig, build_affinities
from .exceptions import DivergenceError, UndefinedMetricError, ValidationError
from .geometry import CalibratedPair
from .losses import LossReport, LossWeights, distillation_loss, pair_terms
from .metrics import eval_epipolar
from .scene import render, visibility

logger = logging.getLogger(__name__)

OPTIMIZERS = ("plain", "momentum", "adam")


@dataclass(frozen=True)
class RefineConfig:
    iterations: int = 500
    step: float = 1e-3
    optimizer: str = "adam"
    weights: LossWeights = dc_field(default_factory=LossWeights)
    matchability: MatchabilityConfig = dc_field(default_factory=MatchabilityConfig)
    sigma_schedule: tuple = None  # ((iteration, sigma), ...) sorted
    divergence_factor: float = 10.0
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if int(self.iterations) < 0:
            raise ValidationError("iterations must be non-negative")
        if not self.step > 0:
            raise ValidationError("step must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}")
        if self.divergence_factor <= 1.0:
            raise ValidationError("divergence_factor must exceed 1")
        if int(self.threads) < 1:
            raise ValidationError("threads must be at least 1")
        if self.sigma_schedule is not None:
            sched = tuple((int(i), float(s)) for i, s in self.sigma_schedule)
            if any(s <= 0 for _, s in sched):
                raise ValidationError("scheduled sigmas must be positive")
            if list(i for i, _ in sched) != sorted(i for i, _ in sched):
                raise ValidationError("sigma schedule must be sorted by iteration")
            object.__setattr__(self, "sigma_schedule", sched)

    def sigma_at(self, iteration):
        sigma = self.matchability.sigma
        if self.sigma_schedule:
            for start, value in self.sigma_schedule:
                if iteration >= start:
                    sigma = value
        return sigma

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "step": self.step,
            "optimizer": self.optimizer,
            "weights": self.weights.to_dict(),
            "matchability": self.matchability.to_dict(),
            "sigma_schedule": (
                None if self.sigma_schedule is None
                else [[i, s] for i, s in self.sigma_schedule]
            ),
            "divergence_factor": self.divergence_factor,
            "seed": self.seed,
            "threads": self.threads,
        }


@dataclass(eq=False)
class PairObservations:
    """Everything fixed about one view pair during refinement."""

    view_a: int
    view_b: int
    pair: CalibratedPair
    image_a: np.ndarray
    image_b: np.ndarray
    vis_a: np.ndarray
    vis_b: np.ndarray


def observations_from_scene(scene, views=None, pairs=None):
    """Render-and-wire convenience: PairObservations for the listed view
    index pairs (default: all combinations) of a synthetic scene."""
    from itertools import combinations

    if views is None:
        views = [render(scene, k) for k in range(len(scene.cameras))]
    if pairs is None:
        pairs = list(combinations(range(len(views)), 2))
    obs = []
    for i, j in pairs:
        obs.append(PairObservations(
            view_a=i, view_b=j,
            pair=CalibratedPair.from_cameras(scene.cameras[i], scene.cameras[j]),
            image_a=views[i].rgb, image_b=views[j].rgb,
            vis_a=visibility(scene, views[i], views[j]),
            vis_b=visibility(scene, views[j], views[i]),
        ))
    return views, obs


@dataclass(eq=False)
class RefineTrace:
    reports: list
    epi_error: list
    uv_error: list

    def __len__(self):
        return len(self.reports)

    @property
    def totals(self):
        return [r.total for r in self.reports]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "L_L", "L_M", "L_R", "L_T", "total",
                        "epi_error", "uv_error"])
            for k, r in enumerate(self.reports):
                w.writerow([k, repr(r.l_l), repr(r.l_m), repr(r.l_r),
                            repr(r.l_t), repr(r.total),
                            repr(self.epi_error[k]), repr(self.uv_error[k])])


def _mean_uv_error(fields, gt):
    errs = []
    for f, g in zip(fields, gt):
        if g is None:
            continue
        fg = f.foreground
        errs.append(np.linalg.norm(f.uv[fg] - g.uv[fg], axis=1))
    if not errs:
        return float("nan")
    return float(np.concatenate(errs).mean())


def refine_viewset(fields, observations, cfg, frozen=None, gt=None):
    """Jointly refine the UV fields of a view set.

    fields: initial DenseFields (not mutated). observations: the pair
    list; gradients of every pair are summed per view before each step.
    frozen: anchor fields for the distillation term, defaulting to copies
    of the initial fields. gt: optional per-view ground truth, used only
    for the trace's uv_error column, never in the objective.

    Returns (refined fields, RefineTrace). Raises DivergenceError (with
    the partial trace attached) if the total loss exceeds
    divergence_factor times its initial value.
    """
    if not observations:
        raise ValidationError("empty pair list")
    n_views = len(fields)
    for obs in observations:
        if not (0 <= obs.view_a < n_views and 0 <= obs.view_b < n_views):
            raise ValidationError("pair references a view outside the field list")
        if obs.view_a == obs.view_b:
            raise ValidationError("a pair must join two distinct views")
    if frozen is None:
        frozen = [f.copy() for f in fields]
    if gt is None:
        gt = [None] * n_views
    logger.debug(
        "refining %d views over %d pairs for %d iterations (%s, step %g)",
        n_views, len(observations), cfg.iterations, cfg.optimizer, cfg.step,
    )

    current = [f.copy() for f in fields]
    w = cfg.weights

    affs = [
        build_affinities(
            current[o.view_a], current[o.view_b], o.pair,
            o.image_a, o.image_b, o.vis_a, o.vis_b, cfg.matchability,
        )
        for o in observations
    ]

    flats = [f.uv[f.foreground].copy() for f in current]
    vel = [np.zeros_like(u) for u in flats]
    moment2 = [np.zeros_like(u) for u in flats]

    def eval_pair(k, sigma):
        o = observations[k]
        return pair_terms(
            affs[k], flats[o.view_a], flats[o.view_b],
            lambda_m=w.lambda_m, lambda_t=w.lambda_t, sigma=sigma,
        )

    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    reports, epi_trace, uv_trace = [], [], []
    try:
        for it in range(cfg.iterations + 1):
            sigma = cfg.sigma_at(it)
            for v, f in enumerate(current):
                f.uv[f.foreground] = flats[v]
            if pool is not None:
                results = list(pool.map(lambda k: eval_pair(k, sigma),
                                        range(len(observations))))
            else:
                results = [eval_pair(k, sigma) for k in range(len(observations))]

            l_m = sum(r[0] for r in results)
            l_t = sum(r[1] for r in results)
            l_r = 0.0
            anchor_grads = []
            for v in range(n_views):
                lr, gr = distillation_loss(current[v], frozen[v])
                l_r += lr
                anchor_grads.append(gr.flat)
            report = LossReport(l_l=0.0, l_m=l_m, l_r=l_r, l_t=l_t, weights=w)
            reports.append(report)

            # pairs without mutual visibility contribute nothing to the
            # objective, so they are skipped in the trace as well
            epi_vals = []
            for o in observations:
                try:
                    epi_vals.append(eval_epipolar(
                        current[o.view_a], current[o.view_b], o.pair,
                        o.vis_a, o.vis_b))
                except UndefinedMetricError:
                    pass
            epi_trace.append(float(np.mean(epi_vals)) if epi_vals else float("nan"))
            uv_trace.append(_mean_uv_error(current, gt))

            if it == 0:
                initial_total = report.total
            elif initial_total > 0 and report.total > cfg.divergence_factor * initial_total:
                partial = RefineTrace(reports, epi_trace, uv_trace)
                raise DivergenceError(
                    f"total loss {report.total:.6g} exceeded "
                    f"{cfg.divergence_factor:g} x initial {initial_total:.6g} "
                    f"at iteration {it}",
                    trace=partial,
                )
            if it == cfg.iterations:
                break

            grads = [np.zeros_like(u) for u in flats]
            for k, o in enumerate(observations):
                grads[o.view_a] += results[k][2]
                grads[o.view_b] += results[k][3]
            for v in range(n_views):
                grads[v] += w.lambda_r * anchor_grads[v]

            t = it + 1
            for v in range(n_views):
                g = grads[v]
                if cfg.optimizer == "plain":
                    flats[v] = flats[v] - cfg.step * g
                elif cfg.optimizer == "momentum":
                    vel[v] = cfg.momentum * vel[v] + g
                    flats[v] = flats[v] - cfg.step * vel[v]
                else:
                    vel[v] = cfg.adam_beta1 * vel[v] + (1 - cfg.adam_beta1) * g
                    moment2[v] = (
                        cfg.adam_beta2 * moment2[v] + (1 - cfg.adam_beta2) * g * g
                    )
                    mhat = vel[v] / (1 - cfg.adam_beta1**t)
                    vhat = moment2[v] / (1 - cfg.adam_beta2**t)
                    flats[v] = flats[v] - cfg.step * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    finally:
        if pool is not None:
            pool.shutdown()

    for v, f in enumerate(current):
        f.uv[f.foreground] = flats[v]
    return current, RefineTrace(reports, epi_trace, uv_trace)


def refine_pair(field_a, field_b, obs, cfg, frozen_a=None, frozen_b=None,
                gt_a=None, gt_b=None):
    """Two-view wrapper over refine_viewset."""
    if {obs.view_a, obs.view_b} != {0, 1}:
        obs = replace_obs_indices(obs)
    frozen = None
    if frozen_a is not None or frozen_b is not None:
        frozen = [
            frozen_a if frozen_a is not None else field_a.copy(),
            frozen_b if frozen_b is not None else field_b.copy(),
        ]
    gt = None
    if gt_a is not None or gt_b is not None:
        gt = [gt_a, gt_b]
    fields, trace = refine_viewset([field_a, field_b], [obs], cfg, frozen, gt)
    return (fields[0], fields[1]), trace


def replace_obs_indices(obs):
    """Renumber a pair observation to views (0, 1)."""
    return replace(obs, view_a=0, view_b=1)


class FieldRefiner(BaseEstimator):
    """Estimator-style front end over refine_viewset.

    Parameters are the flattened refinement knobs; fit takes the problem
    as a dict with keys "fields" and "observations" (optional "frozen",
    "gt") and exposes fields_, trace_ and n_iter_. Parameters are stored
    untouched so the estimator clones cleanly.
    """

    def __init__(self, iterations=500, step=1e-3, optimizer="adam",
                 lambda_m=1.0, lambda_r=2000.0, lambda_t=10.0, sigma=0.05,
                 omega_grid=32, omega_mode="grid", cross_part_matching=False,
                 single_e=False, unnormalized=False, sigma_schedule=None,
                 divergence_factor=10.0, seed=0, threads=1):
        self.iterations = iterations
        self.step = step
        self.optimizer = optimizer
        self.lambda_m = lambda_m
        self.lambda_r = lambda_r
        self.lambda_t = lambda_t
        self.sigma = sigma
        self.omega_grid = omega_grid
        self.omega_mode = omega_mode
        self.cross_part_matching = cross_part_matching
        self.single_e = single_e
        self.unnormalized = unnormalized
        self.sigma_schedule = sigma_schedule
        self.divergence_factor = divergence_factor
        self.seed = seed
        self.threads = threads

    def _config(self):
        return RefineConfig(
            iterations=self.iterations,
            step=self.step,
            optimizer=self.optimizer,
            weights=LossWeights(self.lambda_m, self.lambda_r, self.lambda_t),
            matchability=MatchabilityConfig(
                sigma=self.sigma,
                omega_grid=self.omega_grid,
                omega_mode=self.omega_mode,
                cross_part_matching=self.cross_part_matching,
                single_e=self.single_e,
                unnormalized=self.unnormalized,
            ),
            sigma_schedule=self.sigma_schedule,
            divergence_factor=self.divergence_factor,
            seed=self.seed,
            threads=self.threads,
        )

    def fit(self, X, y=None):
        if not isinstance(X, dict) or "fields" not in X or "observations" not in X:
            raise ValidationError(
                "fit expects a dict with 'fields' and 'observations'"
            )
        cfg = self._config()
        self.fields_, self.trace_ = refine_viewset(
            X["fields"], X["observations"], cfg,
            frozen=X.get("frozen"), gt=X.get("gt"),
        )
        self.n_iter_ = len(self.trace_) - 1
        return self
