"""Input validation helpers.

Small check_* functions in the sklearn style: each validates one contract
and raises ValidationError (or a subclass) with a message naming the
offending quantity. They return the validated object so call sites can wrap
assignments.
"""

import numpy as np

from .exceptions import MaskMismatchError, ValidationError

_ROT_TOL = 1e-9


def check_camera(camera):
    """Validate intrinsics, extrinsics and image size."""
    K, R = camera.K, camera.R
    if K.shape != (3, 3) or R.shape != (3, 3) or camera.t.shape != (3,):
        raise ValidationError("camera matrices have wrong shapes")
    if not np.all(np.isfinite(K)) or not np.all(np.isfinite(R)) or not np.all(
        np.isfinite(camera.t)
    ):
        raise ValidationError("camera contains non-finite entries")
    lower = K[np.tril_indices(3, -1)]
    if np.any(lower != 0.0):
        raise ValidationError("K must be upper-triangular")
    if K[0, 0] <= 0 or K[1, 1] <= 0 or K[2, 2] <= 0:
        raise ValidationError("K focal entries must be positive")
    if np.max(np.abs(R @ R.T - np.eye(3))) > _ROT_TOL:
        raise ValidationError("R is not orthonormal within 1e-9")
    if abs(np.linalg.det(R) - 1.0) > _ROT_TOL:
        raise ValidationError("R must have determinant +1")
    if camera.width < 1 or camera.height < 1:
        raise ValidationError("image size must be positive")
    return camera


def check_pair(pair):
    """Validate both cameras and the fundamental matrix of a pair."""
    check_camera(pair.cam_a)
    check_camera(pair.cam_b)
    F = np.asarray(pair.F, dtype=float)
    if F.shape != (3, 3):
        raise ValidationError("F must be 3x3")
    if not np.all(np.isfinite(F)):
        raise ValidationError("F contains non-finite entries")
    s = np.linalg.svd(F, compute_uv=False)
    if s[0] <= 0 or s[1] / s[0] < 1e-12:
        raise ValidationError("F must have rank 2")
    return pair


def check_field(field, require_unit_range=False):
    """Validate a dense field's array shapes and invariants.

    Background pixels must carry zeroed part and uv entries. The unit-range
    check is opt-in because transformed or refined fields may legitimately
    leave [0, 1].
    """
    fg, part, uv = field.foreground, field.part, field.uv
    if fg.ndim != 2:
        raise ValidationError("foreground mask must be 2-d")
    h, w = fg.shape
    if part.shape != (h, w):
        raise ValidationError("part map shape differs from mask")
    if uv.shape != (h, w, 2):
        raise ValidationError("uv map shape differs from mask")
    if fg.dtype != bool:
        raise ValidationError("foreground mask must be boolean")
    if field.num_parts < 1 or field.num_parts > 255:
        raise ValidationError("num_parts must be in [1, 255]")
    if not np.all(np.isfinite(uv[fg])):
        raise ValidationError("foreground uv contains non-finite values")
    if fg.any() and int(part[fg].max(initial=0)) >= field.num_parts:
        raise ValidationError("part index exceeds num_parts")
    bg = ~fg
    if np.any(part[bg] != 0) or np.any(uv[bg] != 0.0):
        raise ValidationError("background pixels must have zero part and uv")
    if require_unit_range and fg.any():
        vals = uv[fg]
        if vals.min(initial=0.0) < 0.0 or vals.max(initial=0.0) > 1.0:
            raise ValidationError("foreground uv outside [0, 1]")
    return field


def check_same_mask(field_a, field_b):
    """Two fields participating in a pixelwise loss must share the mask."""
    if field_a.foreground.shape != field_b.foreground.shape:
        raise MaskMismatchError("field shapes differ")
    if not np.array_equal(field_a.foreground, field_b.foreground):
        raise MaskMismatchError("foreground masks differ")
    return field_a, field_b


def check_weights(weights):
    for name in ("lambda_m", "lambda_r", "lambda_t"):
        v = getattr(weights, name)
        if not np.isfinite(v) or v < 0:
            raise ValidationError(f"{name} must be finite and non-negative")
    return weights


def check_matchability_config(cfg):
    if not np.isfinite(cfg.sigma) or cfg.sigma <= 0:
        raise ValidationError("sigma must be positive")
    if int(cfg.omega_grid) < 2:
        raise ValidationError("omega_grid must be at least 2")
    if cfg.omega_mode not in ("grid", "partners"):
        raise ValidationError("omega_mode must be 'grid' or 'partners'")
    return cfg


def check_seed(seed):
    s = int(seed)
    if s < 0 or s >= 2**64:
        raise ValidationError("seed must fit in an unsigned 64-bit integer")
    return s
