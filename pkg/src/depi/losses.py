"""Loss terms, their analytic UV gradients, and the finite-difference
validator.

Every loss here is a plain function of dense fields returning (value,
gradient); gradients live on the same pixel grid as the fields (zero on
background). The correspondence losses differentiate only through the
matchability matrix: the epipolar, photometric and visibility matrices
are functions of pixels and cameras alone. The kernel-normalization term
is part of that derivative; dropping it is the classic mistake the
finite-difference check exists to catch.
"""

import json
from dataclasses import dataclass

import numpy as np

from .consistency import matchability_matrix
from .exceptions import ValidationError
from .field import PART_MISMATCH_PENALTY, foreground_uv
from .rng import named_stream
from .validation import check_same_mask, check_weights

FD_EPSILON = 1e-5
FD_FLOOR = 1e-10  # relative-error denominator floor; treats ~0 vs ~0 as agreement


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the correspondence, anchor and photometric terms.

    The supervised term always carries weight 1 when ground truth enters
    the objective. Defaults follow the reference operating point for the
    unnormalized loss assembly.
    """

    lambda_m: float = 1.0
    lambda_r: float = 2000.0
    lambda_t: float = 10.0

    def __post_init__(self):
        check_weights(self)

    def to_dict(self):
        return {
            "lambda_m": self.lambda_m,
            "lambda_r": self.lambda_r,
            "lambda_t": self.lambda_t,
        }


@dataclass(eq=False)
class FieldGradient:
    """d(loss)/d(uv) on a field's pixel grid, zero on background."""

    values: np.ndarray
    foreground: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (*self.foreground.shape, 2):
            raise ValidationError("gradient shape does not match its mask")

    @classmethod
    def zeros(cls, field):
        return cls(np.zeros((field.height, field.width, 2)), field.foreground)

    @classmethod
    def from_flat(cls, field, flat):
        g = np.zeros((field.height, field.width, 2))
        g[field.foreground] = flat
        return cls(g, field.foreground)

    @property
    def flat(self):
        return self.values[self.foreground]

    def scaled(self, factor):
        return FieldGradient(self.values * factor, self.foreground)

    def add(self, other):
        return FieldGradient(self.values + other.values, self.foreground)


@dataclass(eq=False)
class LossReport:
    """Scalar loss terms of one evaluation plus optional error maps.

    total is assembled as l_l + lambda_m*l_m + lambda_r*l_r + lambda_t*l_t
    from the stored weights, exactly.
    """

    l_l: float
    l_m: float
    l_r: float
    l_t: float
    weights: LossWeights
    maps: tuple = None

    @property
    def total(self):
        w = self.weights
        return self.l_l + w.lambda_m * self.l_m + w.lambda_r * self.l_r + w.lambda_t * self.l_t

    def to_dict(self, config=None):
        d = {
            "L_L": self.l_l,
            "L_M": self.l_m,
            "L_R": self.l_r,
            "L_T": self.l_t,
            "total": self.total,
            "weights": self.weights.to_dict(),
        }
        if config is not None:
            d["matchability"] = config.to_dict()
        return d

    def to_json(self, path, config=None):
        with open(path, "w") as fh:
            json.dump(self.to_dict(config), fh, indent=2, sort_keys=True)
            fh.write("\n")


def supervised_loss(pred, gt):
    """Summed per-pixel L1 UV error against labels.

    Part disagreements contribute the chart L1 diameter with zero
    gradient; exact component ties also get gradient 0.
    Returns (loss, FieldGradient on pred).
    """
    check_same_mask(pred, gt)
    fg = pred.foreground
    same = pred.part[fg] == gt.part[fg]
    diff = pred.uv[fg] - gt.uv[fg]
    loss = float(
        np.where(same, np.abs(diff).sum(axis=1), PART_MISMATCH_PENALTY).sum()
    )
    flat = np.sign(diff) * same[:, None]
    return loss, FieldGradient.from_flat(pred, flat)


def distillation_loss(pred, frozen):
    """Summed squared UV deviation from a frozen reference field.

    The anchor that pins the chart parameterization in place: without it
    any chart isometry applied consistently to both views leaves the
    correspondence losses unchanged. Part disagreements contribute the
    chart L1 diameter with zero gradient (they cannot arise while parts
    are frozen). Returns (loss, FieldGradient on pred).
    """
    check_same_mask(pred, frozen)
    fg = pred.foreground
    same = pred.part[fg] == frozen.part[fg]
    diff = pred.uv[fg] - frozen.uv[fg]
    loss = float(
        np.where(same, (diff**2).sum(axis=1), PART_MISMATCH_PENALTY).sum()
    )
    flat = 2.0 * diff * same[:, None]
    return loss, FieldGradient.from_flat(pred, flat)


def _assembly_weights(aff):
    wa = aff.V.copy()
    wb = aff.Vprime.copy()
    if not aff.cfg.unnormalized:
        sa = wa.sum()
        sb = wb.sum()
        wa = wa / sa if sa > 0 else np.zeros_like(wa)
        wb = wb / sb if sb > 0 else np.zeros_like(wb)
    return wa, wb


def pair_terms(aff, uv_a, uv_b, lambda_m=1.0, lambda_t=0.0, sigma=None, want_grads=True):
    """Correspondence losses and their UV gradients for one pair.

    Evaluates M at (uv_a, uv_b) against the pair's constants and returns
    (l_m, l_t, g_a, g_b) where the gradients are of
    lambda_m * l_m + lambda_t * l_t, as flat (N, 2) arrays (None when
    want_grads is false). This is the single-M-build hot path shared by
    the public gradient functions and the optimizer.
    """
    cfg = aff.cfg if sigma is None else aff.cfg.with_sigma(sigma)
    na, nb = aff.E.shape
    if na == 0 or nb == 0:
        zero = (np.zeros((na, 2)), np.zeros((nb, 2))) if want_grads else (None, None)
        return 0.0, 0.0, zero[0], zero[1]

    M, mean_a = matchability_matrix(uv_a, uv_b, cfg, aff.part_mask, with_mean=True)
    wa, wb = _assembly_weights(aff)
    rev = aff.E if cfg.single_e else aff.Eprime
    c_epi = wa[:, None] * aff.E + rev * wb[None, :]
    c_pho = (wa[:, None] + wb[None, :]) * aff.T
    l_m = float((c_epi * M).sum())
    l_t = float((c_pho * M).sum())
    if not want_grads:
        return l_m, l_t, None, None

    C = lambda_m * c_epi + lambda_t * c_pho
    W = C * M
    s2 = cfg.sigma**2
    row_w = W.sum(axis=1)
    col_w = W.sum(axis=0)
    # dM_ij/du_i = M_ij (u'_j - mean_i) / sigma^2 in both kernel modes;
    # mean_i is the lattice softmax mean (grid) or M @ uv_b (partners)
    g_a = (W @ uv_b - row_w[:, None] * mean_a) / s2
    if cfg.omega_mode == "grid":
        # the grid denominator does not involve uv_b
        g_b = (W.T @ uv_a - col_w[:, None] * uv_b) / s2
    else:
        m_row = M.T @ row_w
        g_b = (
            W.T @ uv_a
            - M.T @ (row_w[:, None] * uv_a)
            - uv_b * (col_w - m_row)[:, None]
        ) / s2
    return l_m, l_t, g_a, g_b


def grad_multiview(field_a, field_b, aff, sigma=None):
    """Analytic gradient of the symmetric multiview loss at the fields'
    current UV values. Returns (loss, FieldGradient A, FieldGradient B)."""
    l_m, _, g_a, g_b = pair_terms(
        aff, foreground_uv(field_a), foreground_uv(field_b),
        lambda_m=1.0, lambda_t=0.0, sigma=sigma,
    )
    return l_m, FieldGradient.from_flat(field_a, g_a), FieldGradient.from_flat(field_b, g_b)


def grad_photometric(field_a, field_b, aff, sigma=None):
    """Analytic gradient of the photometric loss. Returns
    (loss, FieldGradient A, FieldGradient B)."""
    _, l_t, g_a, g_b = pair_terms(
        aff, foreground_uv(field_a), foreground_uv(field_b),
        lambda_m=0.0, lambda_t=1.0, sigma=sigma,
    )
    return l_t, FieldGradient.from_flat(field_a, g_a), FieldGradient.from_flat(field_b, g_b)


def grad_total(field_a, field_b, aff, weights, frozen_a=None, frozen_b=None,
               gt_a=None, gt_b=None, with_maps=False):
    """Weighted total loss over one pair and its exact gradients.

    Correspondence terms always enter; the anchor terms enter per view
    when frozen references are given; the supervised terms enter when
    ground truth is given. Gradients compose per-term so linearity in the
    weights is exact. Returns (FieldGradient A, FieldGradient B,
    LossReport).
    """
    check_weights(weights)
    l_m, ga_m, gb_m = grad_multiview(field_a, field_b, aff)
    l_t, ga_t, gb_t = grad_photometric(field_a, field_b, aff)
    g_a = ga_m.scaled(weights.lambda_m).add(ga_t.scaled(weights.lambda_t))
    g_b = gb_m.scaled(weights.lambda_m).add(gb_t.scaled(weights.lambda_t))

    l_r = 0.0
    for f, frozen, grad in ((field_a, frozen_a, g_a), (field_b, frozen_b, g_b)):
        if frozen is not None:
            lr, gr = distillation_loss(f, frozen)
            l_r += lr
            grad.values += weights.lambda_r * gr.values

    l_l = 0.0
    for f, gt, grad in ((field_a, gt_a, g_a), (field_b, gt_b, g_b)):
        if gt is not None:
            ll, gl = supervised_loss(f, gt)
            l_l += ll
            grad.values += gl.values

    maps = None
    if with_maps:
        from .consistency import expected_error_map, refresh_matchability

        live = refresh_matchability(aff, field_a, field_b)
        maps = (
            expected_error_map(live, field_a, "geometric"),
            expected_error_map(live.swapped(), field_b, "geometric"),
        )
    report = LossReport(l_l=l_l, l_m=l_m, l_r=l_r, l_t=l_t, weights=weights, maps=maps)
    return g_a, g_b, report


@dataclass(frozen=True)
class FdResult:
    """Outcome of a finite-difference sweep."""

    max_rel_error: float
    worst_pixel: tuple
    worst_component: int
    n_checked: int
    max_abs_grad: float

    def __float__(self):
        return self.max_rel_error


def finite_difference_check(loss_and_grad, field, epsilon=FD_EPSILON, samples=24,
                            seed=0, details=False):
    """Central-difference validation of an analytic gradient.

    loss_and_grad maps a field to (scalar, FieldGradient-or-array for that
    field). Random foreground components are perturbed by +-epsilon and
    the quotient compared against the analytic entry; the relative error
    uses max(|fd|, |analytic|, floor) as denominator so near-zero pairs
    agree. Returns the max relative error (or the full FdResult with
    details=True).
    """
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    ys, xs = np.nonzero(field.foreground)
    if len(xs) == 0:
        raise ValidationError("field has no foreground to check")
    rng = named_stream(seed, "fd-check")
    n = min(int(samples), 2 * len(xs))
    picks = rng.choice(2 * len(xs), size=n, replace=False)

    _, grad = loss_and_grad(field)
    gvals = grad.values if isinstance(grad, FieldGradient) else np.asarray(grad)

    worst = (0.0, (-1, -1), -1)
    for p in picks:
        idx, comp = p // 2, p % 2
        x, y = int(xs[idx]), int(ys[idx])
        bumped = field.copy()
        bumped.uv[y, x, comp] += epsilon
        hi, _ = loss_and_grad(bumped)
        bumped.uv[y, x, comp] -= 2.0 * epsilon
        lo, _ = loss_and_grad(bumped)
        fd = (hi - lo) / (2.0 * epsilon)
        an = gvals[y, x, comp]
        rel = float(abs(fd - an) / max(abs(fd), abs(an), FD_FLOOR))
        if rel > worst[0]:
            worst = (rel, (x, y), comp)
    result = FdResult(
        max_rel_error=worst[0],
        worst_pixel=worst[1],
        worst_component=worst[2],
        n_checked=n,
        max_abs_grad=float(np.abs(gvals[field.foreground]).max()) if len(xs) else 0.0,
    )
    return result if details else result.max_rel_error
