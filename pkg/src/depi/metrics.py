"""Evaluation suite: epipolar consistency, geodesic keypoint accuracy
(GPS, RCP/AUC, RCI), dense two-view reconstruction and its accuracy and
coverage scores (MPVPE, VS, MVS).

Evaluation matching is deliberately hard nearest-neighbor in UV space,
not the soft kernel the training losses use: scores should not inherit
the training relaxation.
"""

import csv
import json
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .exceptions import TriangulationError, UndefinedMetricError, ValidationError
from .field import foreground_parts, foreground_pixels, foreground_uv
from .geometry import MIN_LINE_NORM, CalibratedPair, triangulate
from .scene import geodesic, point_visibility, surface_points, visibility
from .validation import check_same_mask

_trapz = getattr(np, "trapezoid", None)
if _trapz is None:  # numpy < 2
    _trapz = np.trapz

GPS_KAPPA = 0.255  # chart geodesic bandwidth (normalized-coordinate convention)
VS_KAPPA = 0.05  # meters
# Chart lattice pitch for vertex similarity. Must stay coarser than the
# rasterized observations: at 64 px renders the cells of a 12-lattice are
# wide enough that every observed cell receives reconstruction tags, while
# the inward half-match-offset bias of mean UV tags near the edges of the
# covisible strip stays inside one cell.
VS_GRID = 12
RCI_THRESHOLDS = np.linspace(0.5, 0.95, 20)


def _nanmean(values):
    a = np.asarray(values, dtype=float)
    finite = a[np.isfinite(a)]
    return float(finite.mean()) if len(finite) else float("nan")


def _visible_flat(field, vis):
    """Foreground-ordered selection of visible pixels."""
    sel = np.asarray(vis, dtype=bool)[field.foreground]
    return (
        foreground_pixels(field)[sel],
        foreground_uv(field)[sel],
        foreground_parts(field)[sel],
    )


def _nn_partner(uv_a, parts_a, uv_b, parts_b):
    """Index into b of each a row's nearest same-part partner; -1 where
    a row has no compatible partner."""
    d2 = (
        np.sum(uv_a**2, axis=1)[:, None]
        + np.sum(uv_b**2, axis=1)[None, :]
        - 2.0 * (uv_a @ uv_b.T)
    )
    d2 = np.where(parts_a[:, None] == parts_b[None, :], d2, np.inf)
    best = np.argmin(d2, axis=1)
    best[~np.isfinite(d2[np.arange(len(best)), best])] = -1
    return best


def _line_point_distances(F, pts_src, pts_dst):
    """d(dst_k, line of src_k under F), elementwise over matched rows."""
    hs = np.column_stack([pts_src, np.ones(len(pts_src))])
    hd = np.column_stack([pts_dst, np.ones(len(pts_dst))])
    lines = hs @ F.T
    num = np.abs(np.sum(lines * hd, axis=1))
    den = np.maximum(np.hypot(lines[:, 0], lines[:, 1]), MIN_LINE_NORM)
    return num / den


def eval_epipolar(field_a, field_b, pair, vis_a, vis_b):
    """Mean epipolar distance (pixels) of hard UV matches, symmetrized.

    Each visible A pixel is matched to the nearest-UV visible same-part B
    pixel and scored by the distance of the match from the pixel's
    epipolar line; the B->A direction mirrors this; the two directional
    means are averaged. Raises UndefinedMetricError when either side has
    no visible pixels or no compatible matches exist.
    """
    pa, ua, qa = _visible_flat(field_a, vis_a)
    pb, ub, qb = _visible_flat(field_b, vis_b)
    if len(pa) == 0 or len(pb) == 0:
        raise UndefinedMetricError("no mutually visible pixels to evaluate")

    means = []
    for (ps, us, qs, pd, ud, qd, F) in (
        (pa, ua, qa, pb, ub, qb, pair.F),
        (pb, ub, qb, pa, ua, qa, pair.F.T),
    ):
        nn = _nn_partner(us, qs, ud, qd)
        ok = nn >= 0
        if not ok.any():
            raise UndefinedMetricError("no part-compatible visible matches")
        d = _line_point_distances(F, ps[ok], pd[nn[ok]])
        means.append(float(d.mean()))
    return 0.5 * (means[0] + means[1])


def geodesic_errors(pred, gt, scene):
    """Per-foreground-pixel on-surface error in meters, row-major order.

    Predictions are clamped to the chart before measuring; a part
    disagreement scores infinity.
    """
    check_same_mask(pred, gt)
    fg = pred.foreground
    return geodesic(
        scene, pred.uv[fg], gt.uv[fg], pred.part[fg].astype(int),
        gt.part[fg].astype(int), clamp=True,
    )


def gps(pred, gt, scene, kappa=GPS_KAPPA):
    """Geodesic point similarity: mean Gaussian score of the per-pixel
    geodesic errors. 1.0 iff every prediction is exact."""
    g = geodesic_errors(pred, gt, scene)
    if len(g) == 0:
        raise UndefinedMetricError("no foreground pixels to score")
    with np.errstate(over="ignore"):
        return float(np.mean(np.exp(-(g**2) / (2.0 * kappa**2))))


def rcp(pred, gt, scene, thresholds):
    """Ratio of correct points: fraction of pixels whose geodesic error
    is at or below each threshold (meters)."""
    thresholds = np.asarray(thresholds, dtype=float)
    g = geodesic_errors(pred, gt, scene)
    if len(g) == 0:
        raise UndefinedMetricError("no foreground pixels to score")
    return np.mean(g[:, None] <= thresholds[None, :], axis=0)


def rcp_thresholds(cap, points=61):
    return np.linspace(0.0, float(cap), int(points))


def auc(thresholds, curve, cap=None):
    """Area under a ratio curve, normalized to [0, 1].

    The normalizer is the trapezoid measure of the threshold grid itself
    (its span, i.e. the cap), so a curve of all ones scores exactly 1.
    An explicit cap overrides the grid span.
    """
    thresholds = np.asarray(thresholds, dtype=float)
    curve = np.asarray(curve, dtype=float)
    if len(thresholds) < 2 or np.any(np.diff(thresholds) <= 0):
        raise ValidationError("thresholds must be strictly increasing")
    area = _trapz(curve, thresholds)
    denom = float(cap) if cap is not None else _trapz(np.ones_like(curve), thresholds)
    return float(area / denom)


def rci(values, thresholds=None):
    """Ratio of correct instances at each GPS threshold."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValidationError("rci needs at least one instance")
    if thresholds is None:
        thresholds = RCI_THRESHOLDS
    thresholds = np.asarray(thresholds, dtype=float)
    return np.mean(values[:, None] >= thresholds[None, :], axis=0)


def mrci(values, thresholds=None):
    return float(rci(values, thresholds).mean())


@dataclass(eq=False)
class ReconCloud:
    """Triangulated points with their chart tags and source pixels."""

    points: np.ndarray
    uv: np.ndarray
    parts: np.ndarray
    pixels_a: np.ndarray
    pixels_b: np.ndarray

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls):
        z = np.zeros
        return cls(z((0, 3)), z((0, 2)), z(0, dtype=int), z((0, 2), dtype=int),
                   z((0, 2), dtype=int))


def reconstruct(field_a, field_b, pair, vis_a, vis_b):
    """Triangulate every visible A pixel against its nearest-UV visible
    same-part B pixel. Tags each point with the match's mean UV. Pairs
    that fail triangulation (degenerate rays) are dropped; an empty cloud
    is a valid result."""
    pa, ua, qa = _visible_flat(field_a, vis_a)
    pb, ub, qb = _visible_flat(field_b, vis_b)
    if len(pa) == 0 or len(pb) == 0:
        return ReconCloud.empty()
    nn = _nn_partner(ua, qa, ub, qb)
    pts, uvs, parts, srca, srcb = [], [], [], [], []
    for i in range(len(pa)):
        j = nn[i]
        if j < 0:
            continue
        try:
            X = triangulate(pa[i], pb[j], pair)
        except TriangulationError:
            continue
        pts.append(X)
        uvs.append(0.5 * (ua[i] + ub[j]))
        parts.append(int(qa[i]))
        srca.append(pa[i])
        srcb.append(pb[j])
    if not pts:
        return ReconCloud.empty()
    return ReconCloud(
        np.asarray(pts), np.asarray(uvs), np.asarray(parts, dtype=int),
        np.asarray(srca, dtype=int), np.asarray(srcb, dtype=int),
    )


def mpvpe(cloud, scene):
    """Mean distance (meters) between triangulated points and the surface
    points their chart tags name."""
    if len(cloud) == 0:
        raise UndefinedMetricError("empty reconstruction")
    ref = surface_points(scene, cloud.uv, cloud.parts)
    return float(np.linalg.norm(cloud.points - ref, axis=1).mean())


def chart_lattice(grid):
    """(grid*grid, 2) chart samples, u fastest, matching index order
    (iv, iu) -> row iv*grid + iu."""
    g = np.linspace(0.0, 1.0, int(grid))
    uu, vv = np.meshgrid(g, g)
    return np.column_stack([uu.ravel(), vv.ravel()])


def visible_chart_lattice(scene, camera_indices, grid=VS_GRID):
    """Boolean (num_parts, grid, grid): lattice samples whose surface
    point is visible in every listed camera.

    Exact continuous-geometry visibility. Near silhouettes this admits
    samples that no pixel of a finite render can reach; reference sets
    for reconstruction scoring should come from observed_chart_cells
    instead."""
    lat = chart_lattice(grid)
    out = np.zeros((scene.num_parts, int(grid), int(grid)), dtype=bool)
    for p in range(scene.num_parts):
        pts = surface_points(scene, lat, np.full(len(lat), p))
        vis = np.ones(len(lat), dtype=bool)
        for ci in camera_indices:
            vis &= point_visibility(scene, pts, ci)
        out[p] = vis.reshape(int(grid), int(grid))
    return out


def observed_chart_cells(field, vis, num_parts, grid=VS_GRID):
    """Boolean (num_parts, grid, grid): lattice cells carrying at least
    one pixel of `field` selected by the boolean image mask `vis`.

    With a ground-truth field and a cross-view visibility mask this is
    the reachable reference set for reconstruction scoring: the chart
    cells a reconstruction built from these very pixels could cover."""
    mask = np.zeros((int(num_parts), int(grid), int(grid)), dtype=bool)
    if vis.any():
        uv = np.clip(field.uv[vis], 0.0, 1.0)
        parts = field.part[vis].astype(int)
        iu = np.rint(uv[:, 0] * (grid - 1)).astype(int)
        iv = np.rint(uv[:, 1] * (grid - 1)).astype(int)
        mask[parts, iv, iu] = True
    return mask


@dataclass(frozen=True)
class VertexSimilarity:
    vs: float
    iou: float
    mvs: float
    # raw ingredients, kept so multi-pair reports can pool exactly
    score_sum: float = 0.0
    n_visible: int = 0
    n_inter: int = 0
    n_union: int = 0


def vertex_similarity(cloud, scene, visible_mask, kappa=VS_KAPPA):
    """Coverage-aware reconstruction score against a chart lattice.

    Each cloud point snaps to the nearest lattice sample of its part; a
    sample's distance is the best (smallest) distance among the points
    snapped to it, infinity if none. VS averages the Gaussian score of
    those distances over the ground-truth-visible samples; IoU compares
    the matched set against the visible set; MVS = sqrt(VS * IoU).
    """
    P, G, G2 = visible_mask.shape
    if G != G2:
        raise ValidationError("visible_mask must be (parts, grid, grid)")
    if not visible_mask.any():
        raise UndefinedMetricError("no visible lattice samples")
    best = np.full((P, G, G), np.inf)
    if len(cloud):
        uv = np.clip(cloud.uv, 0.0, 1.0)
        iu = np.rint(uv[:, 0] * (G - 1)).astype(int)
        iv = np.rint(uv[:, 1] * (G - 1)).astype(int)
        lat = chart_lattice(G)
        snap_uv = lat[iv * G + iu]
        ref = surface_points(scene, snap_uv, cloud.parts)
        d = np.linalg.norm(cloud.points - ref, axis=1)
        np.minimum.at(best, (cloud.parts, iv, iu), d)
    with np.errstate(over="ignore"):
        score = np.exp(-(best**2) / (2.0 * kappa**2))
    score[~np.isfinite(best)] = 0.0
    score_sum = float(score[visible_mask].sum())
    n_visible = int(visible_mask.sum())
    vs = score_sum / n_visible
    matched = np.isfinite(best)
    union = int((matched | visible_mask).sum())
    inter = int((matched & visible_mask).sum())
    iou = float(inter / union) if union else 0.0
    return VertexSimilarity(
        vs=vs, iou=iou, mvs=math.sqrt(vs * iou),
        score_sum=score_sum, n_visible=n_visible, n_inter=inter, n_union=union,
    )


@dataclass(eq=False)
class MetricReport:
    """Aggregate scores over a set of views and their pairs.

    gps pools pixels across views; mgps averages the per-view GPS values
    (the instances RCI thresholds). vs/mvs pool lattice samples across
    pairs; mmvs averages the per-pair MVS.
    """

    epi_error: float
    gps: float
    mgps: float
    auc10: float
    auc30: float
    mrci: float
    mpvpe: float
    vs: float
    mvs: float
    mmvs: float
    rcp_thresholds: np.ndarray
    rcp_curve: np.ndarray
    rci_thresholds: np.ndarray
    rci_curve: np.ndarray
    gps_per_view: list
    pairs: list  # per-pair dicts

    SCALAR_FIELDS = (
        "epi_error", "gps", "mgps", "auc10", "auc30", "mrci",
        "mpvpe", "vs", "mvs", "mmvs",
    )

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.SCALAR_FIELDS}
        d["rcp"] = {
            "thresholds": [float(t) for t in self.rcp_thresholds],
            "curve": [float(v) for v in self.rcp_curve],
        }
        d["rci"] = {
            "thresholds": [float(t) for t in self.rci_thresholds],
            "curve": [float(v) for v in self.rci_curve],
        }
        d["gps_per_view"] = [float(v) for v in self.gps_per_view]
        d["pairs"] = self.pairs
        return d

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path):
        """Flat rows: one per evaluated pair, then the aggregate."""
        pair_cols = ("view_a", "view_b", "epi_error", "mpvpe", "vs", "iou",
                     "mvs", "n_points")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("scope",) + pair_cols[:2] + self.SCALAR_FIELDS)
            for row in self.pairs:
                w.writerow(
                    ["pair", row["view_a"], row["view_b"], repr(row["epi_error"]),
                     repr(row["mpvpe"]), repr(row["vs"]), "", "", "",
                     repr(row["mvs"]), "", ""]
                )
            w.writerow(
                ["all", "", ""]
                + [repr(getattr(self, k)) for k in self.SCALAR_FIELDS]
            )


def evaluate(scene, views, pred_fields, gt_fields=None, pairs=None,
             gps_kappa=GPS_KAPPA, vs_kappa=VS_KAPPA, vs_grid=VS_GRID,
             rci_thresholds=None, rcp_points=61):
    """Full metric suite over rendered views and predicted fields.

    views supply cameras (by index), depth and ground truth; pairs
    defaults to all view combinations. Per-pair reconstruction metrics
    that cannot be computed (empty cloud) surface as NaN entries rather
    than aborting the report.
    """
    if gt_fields is None:
        gt_fields = [v.field for v in views]
    if len(pred_fields) != len(views) or len(gt_fields) != len(views):
        raise ValidationError("one predicted and one ground-truth field per view")
    if pairs is None:
        pairs = list(combinations(range(len(views)), 2))
    if not pairs:
        raise ValidationError("no view pairs to evaluate")

    gps_views = [gps(pred_fields[i], gt_fields[i], scene, gps_kappa)
                 for i in range(len(views))]
    errs = np.concatenate(
        [geodesic_errors(pred_fields[i], gt_fields[i], scene)
         for i in range(len(views))]
    )
    with np.errstate(over="ignore"):
        pooled_gps = float(np.mean(np.exp(-(errs**2) / (2.0 * gps_kappa**2))))
    thr30 = rcp_thresholds(0.30, rcp_points)
    curve30 = np.mean(errs[:, None] <= thr30[None, :], axis=0)
    thr10 = rcp_thresholds(0.10, rcp_points)
    curve10 = np.mean(errs[:, None] <= thr10[None, :], axis=0)

    pair_rows = []
    epi_vals, mp_vals, mvs_vals = [], [], []
    score_sum = 0.0
    n_visible = 0
    n_inter = 0
    n_union = 0
    for (i, j) in pairs:
        pr = CalibratedPair.from_cameras(scene.cameras[i], scene.cameras[j])
        vis_ij = visibility(scene, views[i], views[j])
        vis_ji = visibility(scene, views[j], views[i])
        try:
            epi = eval_epipolar(pred_fields[i], pred_fields[j], pr, vis_ij, vis_ji)
        except UndefinedMetricError:
            epi = float("nan")
        cloud = reconstruct(pred_fields[i], pred_fields[j], pr, vis_ij, vis_ji)
        # the reference set is anchored like the cloud: chart cells the
        # pair's mutually visible ground-truth pixels occupy in view i
        vm = observed_chart_cells(gt_fields[i], vis_ij, scene.num_parts, vs_grid)
        try:
            sim = vertex_similarity(cloud, scene, vm, vs_kappa)
        except UndefinedMetricError:
            sim = VertexSimilarity(float("nan"), float("nan"), float("nan"))
        try:
            mp = mpvpe(cloud, scene)
        except UndefinedMetricError:
            mp = float("nan")
        epi_vals.append(epi)
        mp_vals.append(mp)
        mvs_vals.append(sim.mvs)
        score_sum += sim.score_sum
        n_visible += sim.n_visible
        n_inter += sim.n_inter
        n_union += sim.n_union
        pair_rows.append({
            "view_a": i, "view_b": j, "epi_error": epi, "mpvpe": mp,
            "vs": sim.vs, "iou": sim.iou, "mvs": sim.mvs,
            "n_points": len(cloud), "n_visible_samples": sim.n_visible,
        })

    pooled_vs = score_sum / n_visible if n_visible else 0.0
    pooled_iou = n_inter / n_union if n_union else 0.0
    pooled_mvs = math.sqrt(pooled_vs * pooled_iou)

    rci_thr = RCI_THRESHOLDS if rci_thresholds is None else np.asarray(rci_thresholds, float)
    rci_curve = rci(gps_views, rci_thr)

    return MetricReport(
        epi_error=_nanmean(epi_vals),
        gps=pooled_gps,
        mgps=float(np.mean(gps_views)),
        auc10=auc(thr10, curve10),
        auc30=auc(thr30, curve30),
        mrci=float(rci_curve.mean()),
        mpvpe=_nanmean(mp_vals),
        vs=pooled_vs,
        mvs=pooled_mvs,
        mmvs=_nanmean(mvs_vals),
        rcp_thresholds=thr30,
        rcp_curve=curve30,
        rci_thresholds=rci_thr,
        rci_curve=rci_curve,
        gps_per_view=gps_views,
        pairs=pair_rows,
    )
