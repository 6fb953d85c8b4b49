"""Mask synthesis: geometric shapes, elastic deformation, PCA shape sampling.

Three routes produce translator inputs:

  * parametric shapes rasterized from analytic boundaries,
  * elastic warps of existing masks via a smoothed random displacement field,
  * samples from a PCA model fit to a collection of binary masks.

Every operation is a pure function of (inputs, seed) and returns a strictly
binary uint8 mask.
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.path import Path as MplPath
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import DataIOError, DegenerateOutputError, ValidationError
from .ingest import binarize_mask, resize_nearest, validate_mask

logger = logging.getLogger(__name__)

GEOMETRIC_KINDS = ("circle", "ellipse", "polygon", "star")

PCA_BINARIZE_THRESHOLD = 0.5  # shape-space vectors above this become foreground

SHAPE_MODEL_MAGIC = b"LFSM"
SHAPE_MODEL_VERSION = 1


# ---------------------------------------------------------------------------
# Geometric masks
# ---------------------------------------------------------------------------

def _pixel_centers(side: int) -> tuple[np.ndarray, np.ndarray]:
    # Pixel (r, c) has its center at (x, y) = (c + 0.5, r + 0.5) in a frame
    # spanning [0, side] x [0, side].
    coords = np.arange(side) + 0.5
    xs, ys = np.meshgrid(coords, coords)
    return xs, ys


def _check_in_frame(points: np.ndarray, side: int, what: str) -> None:
    if points.min() < 0 or points.max() > side:
        raise ValidationError(f"{what} does not fit inside the {side}x{side} frame")


def _segments_properly_intersect(p1, p2, p3, p4) -> bool:
    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    d1 = cross(p3, p4, p1)
    d2 = cross(p3, p4, p2)
    d3 = cross(p1, p2, p3)
    d4 = cross(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def _check_simple_polygon(vertices: np.ndarray) -> None:
    n = len(vertices)
    if n < 3:
        raise ValidationError(f"polygon needs at least 3 vertices, got {n}")
    edges = [(vertices[i], vertices[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue  # shared endpoint, not a crossing
            if _segments_properly_intersect(*edges[i], *edges[j]):
                raise ValidationError("polygon is self-intersecting")


def _star_vertices(cx: float, cy: float, points: int, outer: float, inner: float, phase_deg: float) -> np.ndarray:
    angles = np.deg2rad(phase_deg) + np.arange(2 * points) * np.pi / points
    radii = np.where(np.arange(2 * points) % 2 == 0, outer, inner)
    return np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)


def make_geometric_mask(spec: dict, side: int) -> np.ndarray:
    """Rasterize an analytic shape: a pixel is foreground iff its center lies
    inside (or on) the shape boundary.

    spec["kind"] selects the shape; remaining keys are its parameters:
      circle:  cx, cy (default frame center), radius
      ellipse: cx, cy, rx, ry, angle (degrees, default 0)
      polygon: vertices [(x, y), ...] in frame coordinates
      star:    cx, cy, points, outer_radius, inner_radius, phase (degrees)
    """
    if side < 1:
        raise ValidationError(f"side must be >= 1, got {side}")
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in GEOMETRIC_KINDS:
        raise ValidationError(f"unknown shape kind {kind!r}; choose from {GEOMETRIC_KINDS}")
    xs, ys = _pixel_centers(side)
    cx = float(spec.get("cx", side / 2))
    cy = float(spec.get("cy", side / 2))

    if kind == "circle":
        r = float(spec["radius"])
        if r < 1.0:
            raise ValidationError(f"circle radius must be >= 1 pixel, got {r}")
        _check_in_frame(np.array([[cx - r, cy - r], [cx + r, cy + r]]), side, "circle")
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= r**2
    elif kind == "ellipse":
        rx, ry = float(spec["rx"]), float(spec["ry"])
        if rx < 1.0 or ry < 1.0:
            raise ValidationError(f"ellipse radii must be >= 1 pixel, got ({rx}, {ry})")
        theta = np.deg2rad(float(spec.get("angle", 0.0)))
        ext = max(rx, ry)
        _check_in_frame(np.array([[cx - ext, cy - ext], [cx + ext, cy + ext]]), side, "ellipse")
        u = (xs - cx) * np.cos(theta) + (ys - cy) * np.sin(theta)
        v = -(xs - cx) * np.sin(theta) + (ys - cy) * np.cos(theta)
        inside = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    else:
        if kind == "polygon":
            vertices = np.asarray(spec["vertices"], dtype=np.float64)
            if vertices.ndim != 2 or vertices.shape[1] != 2:
                raise ValidationError("polygon vertices must be a list of (x, y) pairs")
            _check_simple_polygon(vertices)
        else:  # star
            points = int(spec["points"])
            outer = float(spec["outer_radius"])
            inner = float(spec["inner_radius"])
            if points < 3 or inner < 1.0 or outer <= inner:
                raise ValidationError(
                    f"degenerate star: points={points}, outer={outer}, inner={inner}"
                )
            vertices = _star_vertices(cx, cy, points, outer, inner, float(spec.get("phase", 0.0)))
        _check_in_frame(vertices, side, kind)
        # closed=True marks the final vertex CLOSEPOLY (coordinates ignored),
        # so the first vertex must be repeated to keep the last real edge
        path = MplPath(np.vstack([vertices, vertices[:1]]), closed=True)
        pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
        # radius=1e-9 makes boundary membership inclusive
        inside = path.contains_points(pts, radius=1e-9).reshape(side, side)

    mask = inside.astype(np.uint8)
    if mask.sum() < 2:
        raise ValidationError(f"{kind} rasterizes to fewer than 2 pixels; enlarge it")
    return validate_mask(mask)


def random_geometric_spec(rng: np.random.Generator, side: int) -> dict:
    """Draw a random in-frame shape spec, for bulk mask generation."""
    kind = GEOMETRIC_KINDS[rng.integers(len(GEOMETRIC_KINDS))]
    margin = side * 0.12
    cx = rng.uniform(side * 0.35, side * 0.65)
    cy = rng.uniform(side * 0.35, side * 0.65)
    max_r = min(cx, cy, side - cx, side - cy) - margin / 2
    if kind == "circle":
        return {"kind": kind, "cx": cx, "cy": cy, "radius": rng.uniform(side * 0.1, max_r)}
    if kind == "ellipse":
        return {
            "kind": kind, "cx": cx, "cy": cy,
            "rx": rng.uniform(side * 0.1, max_r),
            "ry": rng.uniform(side * 0.1, max_r),
            "angle": rng.uniform(0, 180),
        }
    if kind == "star":
        outer = rng.uniform(side * 0.15, max_r)
        return {
            "kind": kind, "cx": cx, "cy": cy,
            "points": int(rng.integers(5, 9)),
            "outer_radius": outer,
            "inner_radius": outer * rng.uniform(0.4, 0.7),
            "phase": rng.uniform(0, 360),
        }
    # polygon: a star-convex blob is always simple
    n = int(rng.integers(5, 11))
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = rng.uniform(side * 0.12, max_r, n)
    verts = [(cx + r * np.cos(a), cy + r * np.sin(a)) for r, a in zip(radii, angles)]
    return {"kind": "polygon", "vertices": verts}


# ---------------------------------------------------------------------------
# Elastic deformation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeformationField:
    """Parameters of a smoothed random displacement field.

    The realized g x g control grid of (dy, dx) displacements is a pure
    function of these parameters; see control_grid().
    """

    amplitude: float          # pixels; displacements drawn U[-amplitude, +amplitude]
    smoothing_sigma: float    # pixels; Gaussian smoothing of the control grid
    seed: int = 0
    grid_size: int = 4

    def validate(self) -> "DeformationField":
        if self.amplitude < 0:
            raise ValidationError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.grid_size < 2:
            raise ValidationError(f"grid_size must be >= 2, got {self.grid_size}")
        if self.smoothing_sigma < 0:
            raise ValidationError(f"smoothing_sigma must be >= 0, got {self.smoothing_sigma}")
        return self


def control_grid(field: DeformationField) -> np.ndarray:
    """Realized (2, g, g) control displacements: uniform draws, then smoothed."""
    field.validate()
    rng = np.random.default_rng(field.seed)
    disp = rng.uniform(-field.amplitude, field.amplitude, size=(2, field.grid_size, field.grid_size))
    return disp


def _dense_field(field: DeformationField, side: int) -> np.ndarray:
    disp = control_grid(field)
    if field.smoothing_sigma > 0:
        # sigma is given in pixels; convert to control-grid units
        spacing = side / (field.grid_size - 1)
        sigma_grid = field.smoothing_sigma / spacing
        disp = np.stack([gaussian_filter(d, sigma=sigma_grid, mode="reflect") for d in disp])
    # bilinear upsample of the control grid to one displacement per pixel
    g = field.grid_size
    target = np.mgrid[0:side, 0:side].astype(np.float64) * (g - 1) / max(side - 1, 1)
    dense = np.stack([
        map_coordinates(disp[0], target, order=1, mode="nearest"),
        map_coordinates(disp[1], target, order=1, mode="nearest"),
    ])
    return dense


def elastic_deform(mask: np.ndarray, field: DeformationField) -> np.ndarray:
    """Warp a binary mask by backward mapping through the displacement field,
    sampling with nearest neighbor so the output stays exactly binary.
    """
    validate_mask(mask)
    if mask.sum() == 0:
        raise ValidationError("input mask is empty")
    side_r, side_c = mask.shape
    if side_r != side_c:
        raise ValidationError(f"elastic_deform expects square masks, got {mask.shape}")
    dense = _dense_field(field, side_r)
    rr, cc = np.mgrid[0:side_r, 0:side_c].astype(np.float64)
    src_r = np.rint(rr + dense[0]).astype(np.int64)
    src_c = np.rint(cc + dense[1]).astype(np.int64)
    in_bounds = (src_r >= 0) & (src_r < side_r) & (src_c >= 0) & (src_c < side_c)
    out = np.zeros_like(mask)
    out[in_bounds] = mask[src_r[in_bounds], src_c[in_bounds]]
    if out.sum() == 0:
        raise DegenerateOutputError(
            f"deformation (amplitude={field.amplitude}, seed={field.seed}) emptied the mask; retry with a new seed"
        )
    return validate_mask(out)


# ---------------------------------------------------------------------------
# PCA shape model
# ---------------------------------------------------------------------------

@dataclass
class ShapeModel:
    """PCA of flattened binary masks: mean shape + orthonormal components."""

    mean: np.ndarray         # (H*W,) float64, per-pixel foreground frequency
    components: np.ndarray   # (k, H*W) float64, rows orthonormal
    eigenvalues: np.ndarray  # (k,) float64, non-increasing, >= 0
    height: int
    width: int
    n_train: int

    ORTHONORMAL_TOL = 1e-8

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    def validate(self) -> "ShapeModel":
        d = self.height * self.width
        if self.mean.shape != (d,):
            raise ValidationError(f"mean has shape {self.mean.shape}, expected ({d},)")
        if self.components.shape != (self.k, d):
            raise ValidationError(f"components have shape {self.components.shape}, expected ({self.k}, {d})")
        if self.k > min(self.n_train - 1, d):
            raise ValidationError(f"k={self.k} exceeds min(n_train - 1, H*W) = {min(self.n_train - 1, d)}")
        if np.any(np.diff(self.eigenvalues) > 0):
            raise ValidationError("eigenvalues are not sorted non-increasing")
        if np.any(self.eigenvalues < -1e-10):
            raise ValidationError("negative eigenvalue beyond tolerance")
        if self.k:
            gram = self.components @ self.components.T
            if not np.allclose(gram, np.eye(self.k), atol=self.ORTHONORMAL_TOL):
                raise ValidationError("components are not orthonormal within 1e-8")
        return self


def fit_pca_shape_model(masks: list[np.ndarray], k: int) -> ShapeModel:
    """Fit mean + principal components to flattened binary masks.

    Components and eigenvalues come from the SVD of the centered data matrix,
    equivalent to eigendecomposition of the sample covariance (divisor n - 1).
    k is truncated to the numerical rank of the data with a warning when the
    requested value exceeds it.
    """
    if len(masks) < 2:
        raise ValidationError(f"need at least 2 masks to fit a shape model, got {len(masks)}")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    shapes = {m.shape for m in masks}
    if len(shapes) != 1:
        raise ValidationError(f"masks have mixed dimensions: {sorted(shapes)}")
    for m in masks:
        validate_mask(m)
    h, w = masks[0].shape
    n = len(masks)
    data = np.stack([m.ravel().astype(np.float64) for m in masks])
    mean = data.mean(axis=0)
    centered = data - mean
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    eigenvalues = np.clip(singular**2 / (n - 1), 0.0, None)
    rank = int(np.sum(singular > 1e-10 * max(1.0, singular[0] if len(singular) else 1.0)))
    limit = min(rank, n - 1, h * w)
    if k > limit:
        warnings.warn(
            f"requested k={k} exceeds the data rank {limit}; truncating", stacklevel=2
        )
        k = limit
    model = ShapeModel(
        mean=mean,
        components=vt[:k],
        eigenvalues=eigenvalues[:k],
        height=h,
        width=w,
        n_train=n,
    )
    return model.validate()


def pca_shape_vector(model: ShapeModel, weights: dict[int, float]) -> np.ndarray:
    """Pre-threshold shape vector: mean + sum_i w_i * sqrt(eigenvalue_i) * component_i.

    Weights are in standard-deviation units and must lie in [-1, 1].
    """
    vec = model.mean.copy()
    for idx, w in weights.items():
        if not 0 <= idx < model.k:
            raise ValidationError(f"component index {idx} out of range [0, {model.k})")
        if abs(w) > 1.0:
            raise ValidationError(f"weight {w} for component {idx} outside [-1, 1]")
        vec += w * np.sqrt(model.eigenvalues[idx]) * model.components[idx]
    return vec


def sample_pca_mask(model: ShapeModel, weights: dict[int, float]) -> np.ndarray:
    """Thresholded shape-space sample; empty results are an error."""
    vec = pca_shape_vector(model, weights)
    mask = (vec >= PCA_BINARIZE_THRESHOLD).astype(np.uint8).reshape(model.height, model.width)
    if mask.sum() == 0:
        raise DegenerateOutputError("sampled shape thresholds to an empty mask")
    return validate_mask(mask)


def import_mask(path: Path | str, side: int) -> np.ndarray:
    """Load a (possibly hand-drawn, anti-aliased) mask file: binarize at 128
    of 255, then resize with nearest neighbor."""
    from .ingest import _read_mask_gray

    raw = _read_mask_gray(Path(path))
    return resize_nearest(binarize_mask(raw), side)


# ---------------------------------------------------------------------------
# Shape-model persistence (versioned binary, little-endian float64 payload)
# ---------------------------------------------------------------------------

def save_shape_model(model: ShapeModel, path: Path | str) -> None:
    model.validate()
    with open(path, "wb") as fh:
        fh.write(SHAPE_MODEL_MAGIC)
        fh.write(struct.pack("<IIIII", SHAPE_MODEL_VERSION, model.height, model.width, model.k, model.n_train))
        fh.write(model.mean.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(model.components, dtype="<f8").tobytes())
        fh.write(model.eigenvalues.astype("<f8").tobytes())


def load_shape_model(path: Path | str) -> ShapeModel:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read shape model {path}: {exc}") from exc
    if blob[:4] != SHAPE_MODEL_MAGIC:
        raise DataIOError(f"{path} is not a shape model file (bad magic)")
    version, height, width, k, n_train = struct.unpack_from("<IIIII", blob, 4)
    if version != SHAPE_MODEL_VERSION:
        raise DataIOError(f"unsupported shape model version {version} in {path}")
    d = height * width
    offset = 4 + 20
    mean = np.frombuffer(blob, dtype="<f8", count=d, offset=offset).copy()
    offset += 8 * d
    components = np.frombuffer(blob, dtype="<f8", count=k * d, offset=offset).reshape(k, d).copy()
    offset += 8 * k * d
    eigenvalues = np.frombuffer(blob, dtype="<f8", count=k, offset=offset).copy()
    return ShapeModel(
        mean=mean, components=components, eigenvalues=eigenvalues,
        height=height, width=width, n_train=n_train,
    ).validate()
