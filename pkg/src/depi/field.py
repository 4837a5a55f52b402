"""Dense per-pixel surface fields and their transforms.

A DenseField assigns every pixel a foreground bit, a part index and a chart
coordinate uv in [0, 1]^2. Foreground pixels are enumerated in row-major
order (y outer, x inner); that ordering is the contract every matrix in the
consistency machinery is built on.
"""

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .exceptions import ValidationError
from .rng import named_stream
from .validation import check_field, check_same_mask

MAGIC = b"DEPI"
FORMAT_VERSION = 1

_RECORD = np.dtype(
    [("fg", "u1"), ("part", "u1"), ("u", "<f4"), ("v", "<f4")]
)

# L1 diameter of the unit chart; the penalty charged per part-mismatched pixel.
PART_MISMATCH_PENALTY = 2.0


@dataclass(eq=False)
class DenseField:
    """Per-pixel {foreground, part, uv} maps over one image.

    Background pixels carry zeros everywhere; asking them for uv or part is
    an error rather than a silent zero.
    """

    foreground: np.ndarray
    part: np.ndarray
    uv: np.ndarray
    num_parts: int = 24

    def __post_init__(self):
        self.foreground = np.asarray(self.foreground, dtype=bool)
        self.part = np.asarray(self.part, dtype=np.uint8)
        self.uv = np.asarray(self.uv, dtype=np.float64)
        self.num_parts = int(self.num_parts)
        check_field(self)

    @property
    def height(self):
        return self.foreground.shape[0]

    @property
    def width(self):
        return self.foreground.shape[1]

    @property
    def n_foreground(self):
        return int(self.foreground.sum())

    def uv_at(self, x, y):
        if not self.foreground[y, x]:
            raise ValidationError(f"pixel ({x}, {y}) is background")
        return self.uv[y, x].copy()

    def part_at(self, x, y):
        if not self.foreground[y, x]:
            raise ValidationError(f"pixel ({x}, {y}) is background")
        return int(self.part[y, x])

    def copy(self):
        return DenseField(
            self.foreground.copy(), self.part.copy(), self.uv.copy(), self.num_parts
        )

    def with_uv(self, uv_values):
        """New field with foreground uv replaced by (N, 2) values in
        row-major foreground order."""
        uv = np.zeros_like(self.uv)
        uv[self.foreground] = np.asarray(uv_values, dtype=np.float64).reshape(-1, 2)
        return DenseField(self.foreground.copy(), self.part.copy(), uv, self.num_parts)


def foreground_pixels(field, part=None):
    """Foreground pixel coordinates as an (N, 2) int array of (x, y).

    Row-major order: all pixels of row 0 left to right, then row 1, etc.
    Optionally restricted to a single part.
    """
    mask = field.foreground
    if part is not None:
        mask = mask & (field.part == part)
    ys, xs = np.nonzero(mask)
    return np.column_stack([xs, ys]).astype(np.int64)


def foreground_uv(field):
    """Foreground uv values (N, 2) in row-major foreground order."""
    return field.uv[field.foreground].copy()


def foreground_parts(field):
    return field.part[field.foreground].astype(np.int64)


@dataclass(frozen=True)
class UvTransform:
    """Affine chart transform uv -> A @ uv + b with non-singular A."""

    A: np.ndarray = dc_field(default_factory=lambda: np.eye(2))
    b: np.ndarray = dc_field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        object.__setattr__(self, "A", np.asarray(self.A, dtype=float).reshape(2, 2))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(2))
        if abs(float(np.linalg.det(self.A))) < 1e-12:
            raise ValidationError("uv transform matrix is singular")

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def rotation(cls, angle_rad, center=(0.5, 0.5)):
        """Rigid rotation of the chart about a center point."""
        c, s = np.cos(angle_rad), np.sin(angle_rad)
        A = np.array([[c, -s], [s, c]])
        center = np.asarray(center, dtype=float)
        return cls(A=A, b=center - A @ center)

    def apply(self, uv):
        uv = np.asarray(uv, dtype=float)
        return uv @ self.A.T + self.b

    def compose(self, other):
        """Transform equal to applying `other` first, then self."""
        return UvTransform(A=self.A @ other.A, b=self.A @ other.b + self.b)


def apply_uv_transform(field, transform):
    """Apply an affine chart transform to every foreground uv.

    No clamping: transformed values may leave [0, 1]; the unit-range
    invariant is relaxed for transformed fields.
    """
    uv = field.uv.copy()
    uv[field.foreground] = transform.apply(uv[field.foreground])
    return DenseField(field.foreground.copy(), field.part.copy(), uv, field.num_parts)


def perturb_field(field, stddev, seed):
    """Add iid Gaussian noise to foreground uv, clamped to [0, 1].

    Deterministic per seed; draws from the named stream "perturb".
    """
    if stddev < 0:
        raise ValidationError("stddev must be non-negative")
    rng = named_stream(seed, "perturb")
    uv = field.uv.copy()
    n = field.n_foreground
    noise = rng.normal(0.0, stddev, size=(n, 2)) if stddev > 0 else np.zeros((n, 2))
    uv[field.foreground] = np.clip(uv[field.foreground] + noise, 0.0, 1.0)
    return DenseField(field.foreground.copy(), field.part.copy(), uv, field.num_parts)


def field_l1(field_a, field_b):
    """Summed per-pixel L1 uv distance over the shared foreground.

    Pixels whose part labels disagree contribute the chart's L1 diameter
    (2.0) instead of a uv distance.
    """
    check_same_mask(field_a, field_b)
    fg = field_a.foreground
    same = field_a.part[fg] == field_b.part[fg]
    diff = np.abs(field_a.uv[fg] - field_b.uv[fg]).sum(axis=1)
    return float(np.where(same, diff, PART_MISMATCH_PENALTY).sum())


def save_field(path, f):
    """Write the binary dump: header (magic, version, width, height, parts)
    then row-major packed records {fg u8, part u8, u f32, v f32}, little-endian."""
    header = MAGIC + struct.pack(
        "<IIII", FORMAT_VERSION, f.width, f.height, f.num_parts
    )
    rec = np.zeros(f.height * f.width, dtype=_RECORD)
    rec["fg"] = f.foreground.reshape(-1).astype(np.uint8)
    rec["part"] = f.part.reshape(-1)
    rec["u"] = f.uv[..., 0].reshape(-1).astype(np.float32)
    rec["v"] = f.uv[..., 1].reshape(-1).astype(np.float32)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def load_field(path):
    with open(path, "rb") as fh:
        head = fh.read(20)
        if len(head) < 20 or head[:4] != MAGIC:
            raise ValidationError(f"{path}: not a field dump (bad magic)")
        version, width, height, parts = struct.unpack("<IIII", head[4:20])
        if version != FORMAT_VERSION:
            raise ValidationError(f"{path}: unsupported format version {version}")
        raw = fh.read()
    expected = width * height * _RECORD.itemsize
    if len(raw) != expected:
        raise ValidationError(
            f"{path}: truncated field dump ({len(raw)} of {expected} bytes)"
        )
    rec = np.frombuffer(raw, dtype=_RECORD)
    fg = rec["fg"].reshape(height, width).astype(bool)
    part = rec["part"].reshape(height, width).astype(np.uint8)
    uv = np.stack(
        [rec["u"].reshape(height, width), rec["v"].reshape(height, width)], axis=-1
    ).astype(np.float64)
    part = np.where(fg, part, 0).astype(np.uint8)
    uv[~fg] = 0.0
    return DenseField(fg, part, uv, parts)


def save_field_csv(path, f):
    """Lossless CSV alternative: one row per foreground pixel."""
    pixels = foreground_pixels(f)
    parts = foreground_parts(f)
    uv = foreground_uv(f)
    with open(path, "w") as fh:
        fh.write(f"# width={f.width} height={f.height} parts={f.num_parts}\n")
        fh.write("x,y,part,u,v\n")
        for (x, y), p, (u, v) in zip(pixels, parts, uv):
            # plain-float repr is the shortest exact form; numpy scalar
            # repr would not parse back
            fh.write(f"{x},{y},{p},{float(u)!r},{float(v)!r}\n")


def load_field_csv(path):
    with open(path) as fh:
        meta = fh.readline()
        if not meta.startswith("# width="):
            raise ValidationError(f"{path}: missing field CSV header")
        kv = dict(tok.split("=") for tok in meta[2:].split())
        width, height, parts = int(kv["width"]), int(kv["height"]), int(kv["parts"])
        header = fh.readline().strip()
        if header != "x,y,part,u,v":
            raise ValidationError(f"{path}: unexpected column header {header!r}")
        fg = np.zeros((height, width), dtype=bool)
        part = np.zeros((height, width), dtype=np.uint8)
        uv = np.zeros((height, width, 2), dtype=np.float64)
        for line in fh:
            line = line.strip()
            if not line:
                continue
            x_s, y_s, p_s, u_s, v_s = line.split(",")
            x, y = int(x_s), int(y_s)
            fg[y, x] = True
            part[y, x] = int(p_s)
            uv[y, x] = (float(u_s), float(v_s))
    return DenseField(fg, part, uv, parts)
