"""Soft correspondence between two dense UV fields and the losses built
on it.

The central object is the affinity set of a calibrated view pair: a
matchability matrix M over (foreground A pixel, foreground B pixel), the
two directional epipolar distance matrices E and Eprime, the photometric
distance matrix T, and the visibility weight vectors V and Vprime. Only M
depends on the UV values; everything else is fixed by pixels, cameras and
images, which is what makes field optimization cheap: the constants are
built once, M is rebuilt per evaluation.

Matchability of a pair of chart points is a Gaussian kernel on their UV
distance, normalized by a sum of the same kernel over a reference set.
Two reference sets are supported:

* "grid" (default): a fixed lattice over the chart. This matches the
  definition the rest of the package documents and keeps the denominator
  independent of the partner field, but the row values are only
  probabilities against the lattice, so a partner closer than every
  lattice point yields entries above 1 and the small-sigma limit does not
  approach hard nearest-neighbor matching.
* "partners": the partner field's own UV values (softmax over candidate
  partners, part-compatible ones only). Rows are proper distributions and
  sigma -> 0 recovers nearest-neighbor assignment.
"""

from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .exceptions import NumericalError, ValidationError
from .field import foreground_parts, foreground_pixels, foreground_uv
from .geometry import epipolar_distance_matrices
from .validation import check_field, check_matchability_config

__all__ = [
    "MatchabilityConfig",
    "AffinitySet",
    "omega_points",
    "matchability",
    "matchability_matrix",
    "build_affinities",
    "refresh_matchability",
    "expected_geometric_error",
    "expected_error_map",
    "multiview_loss",
    "photometric_loss",
    "nearest_neighbor_epipolar_loss",
]


@dataclass(frozen=True)
class MatchabilityConfig:
    """Kernel and loss-assembly settings.

    sigma is the kernel bandwidth in chart units. omega_grid is the
    per-axis resolution of the reference lattice (grid mode). single_e
    reuses the A->B epipolar distances for the reverse loss direction
    instead of the Fᵀ distances; unnormalized drops the division by the
    visible-pixel counts. Both flags exist to reproduce a cruder matrix
    form of the loss; defaults give the symmetric normalized version.
    omega_transform, when set, maps the reference lattice through a UV
    transform (grid mode only; used to demonstrate loss invariance under
    chart isometries).
    """

    sigma: float = 0.05
    omega_grid: int = 32
    cross_part_matching: bool = False
    omega_mode: str = "grid"
    single_e: bool = False
    unnormalized: bool = False
    omega_transform: object = None

    def __post_init__(self):
        check_matchability_config(self)

    def with_sigma(self, sigma):
        return replace(self, sigma=float(sigma))

    def to_dict(self):
        d = {
            "sigma": self.sigma,
            "omega_grid": self.omega_grid,
            "cross_part_matching": self.cross_part_matching,
            "omega_mode": self.omega_mode,
            "single_e": self.single_e,
            "unnormalized": self.unnormalized,
        }
        if self.omega_transform is not None:
            d["omega_transform"] = {
                "A": [float(v) for v in np.asarray(self.omega_transform.A).reshape(-1)],
                "b": [float(v) for v in np.asarray(self.omega_transform.b).reshape(-1)],
            }
        return d


def omega_points(cfg):
    """Reference lattice over the chart, shape (omega_grid**2, 2).

    Row-major over (v, u) with u varying fastest; the order is part of the
    package's determinism contract.
    """
    g = np.linspace(0.0, 1.0, int(cfg.omega_grid))
    uu, vv = np.meshgrid(g, g)
    pts = np.column_stack([uu.ravel(), vv.ravel()])
    if cfg.omega_transform is not None:
        pts = cfg.omega_transform.apply(pts)
    return pts


def _sq_dists(a, b):
    """Pairwise squared Euclidean distances, (Na, Nb), clipped at 0."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d2 = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    return np.maximum(d2, 0.0)


def matchability(u, u_prime, cfg):
    """Kernel likelihood of chart point u matching u_prime.

    exp(-|u - u'|^2 / 2 sigma^2) normalized by the kernel summed over the
    reference lattice. Summing this over all lattice points as u_prime
    gives exactly 1 for any u.
    """
    u = np.asarray(u, dtype=float).reshape(2)
    up = np.asarray(u_prime, dtype=float).reshape(2)
    omega = omega_points(cfg)
    s2 = 2.0 * cfg.sigma**2
    d2_grid = np.sum((omega - u) ** 2, axis=1)
    shift = d2_grid.min()
    denom = np.exp(-(d2_grid - shift) / s2).sum()
    numer = np.exp(-(np.sum((u - up) ** 2) - shift) / s2)
    return float(numer / denom)


def matchability_matrix(uv_a, uv_b, cfg, part_mask=None, with_mean=False):
    """Matchability matrix M between two UV sets, (Na, Nb).

    part_mask (bool, same shape) zeroes incompatible pairs. With
    with_mean=True also returns the per-row kernel mean over the
    normalization support, the quantity the analytic gradient needs:
    in grid mode the softmax mean over the lattice, in partners mode
    M @ uv_b.

    Entries are exact ratios of shifted exponentials; rows of a partners
    matrix with no compatible partner are zero. Grid mode can overflow
    when UV values sit far outside the chart at tiny sigma; that raises
    NumericalError rather than returning infinities.
    """
    uv_a = np.asarray(uv_a, dtype=float).reshape(-1, 2)
    uv_b = np.asarray(uv_b, dtype=float).reshape(-1, 2)
    na, nb = len(uv_a), len(uv_b)
    if na == 0 or nb == 0:
        M = np.zeros((na, nb))
        return (M, np.zeros((na, 2))) if with_mean else M
    s2 = 2.0 * cfg.sigma**2

    if cfg.omega_mode == "grid":
        omega = omega_points(cfg)
        d2g = _sq_dists(uv_a, omega)
        shift = d2g.min(axis=1)
        k = np.exp(-(d2g - shift[:, None]) / s2)
        z = k.sum(axis=1)  # >= 1 by the shift
        d2 = _sq_dists(uv_a, uv_b)
        with np.errstate(over="ignore"):  # checked below, raised as our own error
            M = np.exp(-(d2 - shift[:, None]) / s2) / z[:, None]
        if part_mask is not None:
            M = M * part_mask
        if not np.isfinite(M).all():
            raise NumericalError(
                "matchability overflow: UV values too far outside the chart "
                f"for sigma={cfg.sigma}"
            )
        if with_mean:
            mean = (k @ omega) / z[:, None]
            return M, mean
        return M

    # partners mode: softmax over the compatible partner set
    d2 = _sq_dists(uv_a, uv_b)
    if part_mask is not None:
        d2 = np.where(part_mask, d2, np.inf)
    shift = d2.min(axis=1)
    empty = ~np.isfinite(shift)
    shift = np.where(empty, 0.0, shift)
    with np.errstate(invalid="ignore"):
        k = np.exp(-(d2 - shift[:, None]) / s2)
    k[empty] = 0.0
    z = k.sum(axis=1)
    M = k / np.where(z > 0.0, z, 1.0)[:, None]
    if with_mean:
        return M, M @ uv_b
    return M


@dataclass(eq=False)
class AffinitySet:
    """All pairwise quantities of one calibrated view pair.

    Matrices are indexed (A-foreground row, B-foreground column) in the
    deterministic row-major pixel order. M is the matchability snapshot
    of the fields passed at construction; E and Eprime are the epipolar
    distances measured in image B and image A respectively; T is the
    squared RGB distance; V/Vprime are 0/1 visibility weights.
    """

    M: np.ndarray
    E: np.ndarray
    Eprime: np.ndarray
    T: np.ndarray
    V: np.ndarray
    Vprime: np.ndarray
    pixels_a: np.ndarray
    pixels_b: np.ndarray
    parts_a: np.ndarray
    parts_b: np.ndarray
    uv_a: np.ndarray
    uv_b: np.ndarray
    cfg: MatchabilityConfig = dc_field(default_factory=MatchabilityConfig)
    part_mask: np.ndarray = None
    mean_a: np.ndarray = None

    @property
    def shape(self):
        return self.M.shape

    def swapped(self):
        """The same pair seen from the other side: transposed matrices,
        exchanged roles of E/Eprime and V/Vprime."""
        return AffinitySet(
            M=self.M.T.copy(),
            E=self.Eprime.T.copy(),
            Eprime=self.E.T.copy(),
            T=self.T.T.copy(),
            V=self.Vprime.copy(),
            Vprime=self.V.copy(),
            pixels_a=self.pixels_b,
            pixels_b=self.pixels_a,
            parts_a=self.parts_b,
            parts_b=self.parts_a,
            uv_a=self.uv_b,
            uv_b=self.uv_a,
            cfg=self.cfg,
            part_mask=None if self.part_mask is None else self.part_mask.T.copy(),
            mean_a=None,
        )


def _pixel_colors(image, pixels):
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError("images must be (H, W, 3)")
    vals = img[pixels[:, 1], pixels[:, 0]].astype(float)
    if img.dtype == np.uint8:
        vals /= 255.0
    return vals


def build_affinities(field_a, field_b, pair, img_a, img_b, vis_a, vis_b, cfg=None):
    """Construct the AffinitySet of a view pair.

    vis_a marks A pixels whose surface point is visible in B (full-grid
    boolean), vis_b the reverse. Images may be uint8 (scaled to [0, 1])
    or float RGB. Empty foregrounds produce consistently shaped empty
    matrices; the losses on them are zero.
    """
    if cfg is None:
        cfg = MatchabilityConfig()
    check_field(field_a)
    check_field(field_b)
    for f, img, vis, tag in (
        (field_a, img_a, vis_a, "A"),
        (field_b, img_b, vis_b, "B"),
    ):
        shape = (f.height, f.width)
        if np.asarray(img).shape[:2] != shape:
            raise ValidationError(f"image {tag} does not match its field shape")
        if np.asarray(vis).shape != shape:
            raise ValidationError(f"visibility {tag} does not match its field shape")

    pix_a = foreground_pixels(field_a)
    pix_b = foreground_pixels(field_b)
    parts_a = foreground_parts(field_a)
    parts_b = foreground_parts(field_b)
    uv_a = foreground_uv(field_a)
    uv_b = foreground_uv(field_b)
    V = np.asarray(vis_a, dtype=bool)[field_a.foreground].astype(float)
    Vp = np.asarray(vis_b, dtype=bool)[field_b.foreground].astype(float)

    if len(pix_a) and len(pix_b):
        E, Eprime = epipolar_distance_matrices(pair.F, pix_a, pix_b)
        T = _sq_dists(_pixel_colors(img_a, pix_a), _pixel_colors(img_b, pix_b))
    else:
        E = np.zeros((len(pix_a), len(pix_b)))
        Eprime = np.zeros_like(E)
        T = np.zeros_like(E)

    part_mask = None
    if not cfg.cross_part_matching:
        mask = parts_a[:, None] == parts_b[None, :]
        if not mask.all():
            part_mask = mask

    M, mean_a = matchability_matrix(uv_a, uv_b, cfg, part_mask, with_mean=True)
    return AffinitySet(
        M=M, E=E, Eprime=Eprime, T=T, V=V, Vprime=Vp,
        pixels_a=pix_a, pixels_b=pix_b, parts_a=parts_a, parts_b=parts_b,
        uv_a=uv_a, uv_b=uv_b, cfg=cfg, part_mask=part_mask, mean_a=mean_a,
    )


def refresh_matchability(aff, field_a, field_b, sigma=None):
    """New AffinitySet with M rebuilt from the fields' current UV values.

    Pixel-anchored constants (E, Eprime, T, V) are shared, not copied.
    Masks and parts must be unchanged since construction.
    """
    uv_a = foreground_uv(field_a)
    uv_b = foreground_uv(field_b)
    if uv_a.shape != aff.uv_a.shape or uv_b.shape != aff.uv_b.shape:
        raise ValidationError("field foreground changed since affinity construction")
    cfg = aff.cfg if sigma is None else aff.cfg.with_sigma(sigma)
    M, mean_a = matchability_matrix(uv_a, uv_b, cfg, aff.part_mask, with_mean=True)
    return AffinitySet(
        M=M, E=aff.E, Eprime=aff.Eprime, T=aff.T, V=aff.V, Vprime=aff.Vprime,
        pixels_a=aff.pixels_a, pixels_b=aff.pixels_b,
        parts_a=aff.parts_a, parts_b=aff.parts_b,
        uv_a=uv_a, uv_b=uv_b, cfg=cfg, part_mask=aff.part_mask, mean_a=mean_a,
    )


def _direction_weights(aff):
    """Per-row and per-column loss weights from visibility.

    Normalized by the visible counts unless cfg.unnormalized; a direction
    with no visible pixels gets zero weight everywhere (its term is 0).
    """
    wa = aff.V.copy()
    wb = aff.Vprime.copy()
    if not aff.cfg.unnormalized:
        sa = wa.sum()
        sb = wb.sum()
        wa = wa / sa if sa > 0 else np.zeros_like(wa)
        wb = wb / sb if sb > 0 else np.zeros_like(wb)
    return wa, wb


def expected_geometric_error(aff, i):
    """Matchability-weighted epipolar distance of A-foreground row i."""
    return float(aff.M[i] @ aff.E[i])


def expected_error_map(aff, field_a, kind="geometric"):
    """Per-pixel expected error over A's grid (0 on background).

    kind "geometric" weights the epipolar distances, "photometric" the
    squared RGB distances. Used for heatmap export.
    """
    if kind == "geometric":
        rows = (aff.M * aff.E).sum(axis=1)
    elif kind == "photometric":
        rows = (aff.M * aff.T).sum(axis=1)
    else:
        raise ValidationError(f"unknown map kind {kind!r}")
    out = np.zeros((field_a.height, field_a.width))
    out[field_a.foreground] = rows
    return out


def multiview_loss(aff):
    """Symmetric visibility-weighted expected epipolar error.

    Forward term: visible A rows weight M ⊙ E. Reverse term: visible B
    columns weight M ⊙ Eprime (or M ⊙ E again under single_e). Each term
    is divided by its visible count unless unnormalized.
    """
    if aff.M.size == 0:
        return 0.0
    wa, wb = _direction_weights(aff)
    rev = aff.E if aff.cfg.single_e else aff.Eprime
    fwd = wa @ (aff.M * aff.E).sum(axis=1)
    bwd = (aff.M * rev).sum(axis=0) @ wb
    return float(fwd + bwd)


def photometric_loss(aff):
    """Same aggregation as multiview_loss with T in place of the epipolar
    distances (T is used for both directions; it has no direction)."""
    if aff.M.size == 0:
        return 0.0
    wa, wb = _direction_weights(aff)
    mt = aff.M * aff.T
    return float(wa @ mt.sum(axis=1) + mt.sum(axis=0) @ wb)


def nearest_neighbor_epipolar_loss(aff):
    """The hard-assignment comparator: multiview_loss with each M row
    replaced by an indicator of the row's nearest compatible partner in
    UV space. This is the small-sigma limit of the partners-mode loss.
    """
    if aff.M.size == 0:
        return 0.0
    d2 = _sq_dists(aff.uv_a, aff.uv_b)
    if aff.part_mask is not None:
        d2 = np.where(aff.part_mask, d2, np.inf)
    best = np.argmin(d2, axis=1)
    ok = np.isfinite(d2[np.arange(len(best)), best])
    wa, wb = _direction_weights(aff)
    rev = aff.E if aff.cfg.single_e else aff.Eprime
    rows = np.arange(len(best))[ok]
    cols = best[ok]
    fwd = float(wa[rows] @ aff.E[rows, cols])
    bwd = float(rev[rows, cols] @ wb[cols])
    return fwd + bwd
