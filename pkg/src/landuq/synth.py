"""Procedural dataset of contour scenes with exact landmark ground truth.

Each scene is a fixed set of smooth blob structures (two tall "lung" lobes,
one low central "heart") drawn as perturbed ellipses: a base ellipse plus a
low-order Fourier displacement along the outward normal. Landmarks are the
analytic contour points at equally spaced curve parameters, so ground truth
is exact by construction. Rendering is scanline polygon fill at 4x landmark
density, two passes of 3x3 box blur, and light Gaussian pixel noise.

Coordinates are normalized to [0, 1]^2 with x rightward and y downward;
pixel position is coord * (size - 1). That convention is shared by every
module downstream.

Out-of-distribution sets reuse the machinery: blank frames, pure noise,
scenes translated mostly off canvas, and spiky star polygons in place of the
smooth blobs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import GenerationError
from .seeding import rng_from, stable_seed

BACKGROUND = 0.7
PIXEL_NOISE = 0.02
INTENSITY_JITTER = 0.05
CANVAS_MARGIN = 0.02
DENSE_FACTOR = 4  # polygon vertices per landmark when rasterizing
FOURIER_ORDERS = (2, 3, 4, 5)

# Per-sample degradation: a fraction of samples carry extra pixel noise or an
# occluding block, and annotations on nodes whose local evidence is destroyed
# are dropped. This is the synthetic stand-in for the heterogeneous quality
# and partial labeling of real clinical corpora, and it is what teaches the
# encoder to widen its posterior when evidence is missing.
NOISE_AUG_PROB = 0.6
NOISE_AUG_RANGE = (0.02, 0.35)
NOISE_DROP_GAIN = 2.2  # annotation drop probability = min(0.85, gain * sigma)
OCCLUDER_PROB = 0.35
OCCLUDER_SIDES = (10, 23)  # half-open integer range in pixels


class OODLabel(enum.Enum):
    IN_DISTRIBUTION = "in_distribution"
    BLANK = "ood_blank"
    NOISE = "ood_noise"
    OFFCANVAS = "ood_offcanvas"
    WRONGSHAPE = "ood_wrongshape"


OOD_CATEGORIES = (OODLabel.BLANK, OODLabel.NOISE, OODLabel.OFFCANVAS, OODLabel.WRONGSHAPE)


@dataclass(frozen=True)
class StructureDef:
    """One structure: node budget, paint intensity, and sampling ranges."""

    name: str
    node_count: int
    closed: bool = True
    intensity: float = 0.5
    center_x: tuple[float, float] = (0.4, 0.6)
    center_y: tuple[float, float] = (0.4, 0.6)
    semi_a: tuple[float, float] = (0.1, 0.2)
    semi_b: tuple[float, float] = (0.1, 0.2)
    rotation: tuple[float, float] = (-0.2, 0.2)
    perturb_frac: float = 0.15  # Fourier coefficient bound as fraction of min(a, b)


DEFAULT_STRUCTURES: tuple[StructureDef, ...] = (
    StructureDef(
        name="left_lung",
        node_count=24,
        intensity=0.25,
        center_x=(0.22, 0.30),
        center_y=(0.38, 0.54),
        semi_a=(0.11, 0.17),
        semi_b=(0.18, 0.28),
        rotation=(-0.12, 0.12),
    ),
    StructureDef(
        name="right_lung",
        node_count=24,
        intensity=0.25,
        center_x=(0.70, 0.78),
        center_y=(0.38, 0.54),
        semi_a=(0.11, 0.17),
        semi_b=(0.18, 0.28),
        rotation=(-0.12, 0.12),
    ),
    StructureDef(
        name="heart",
        node_count=16,
        intensity=0.55,
        center_x=(0.44, 0.56),
        center_y=(0.56, 0.70),
        semi_a=(0.12, 0.18),
        semi_b=(0.09, 0.14),
        rotation=(-0.25, 0.25),
    ),
)


@dataclass(frozen=True)
class ShapeParams:
    """Perturbed-ellipse parameters for a single structure instance."""

    center: tuple[float, float]
    semi_axes: tuple[float, float]
    rotation: float
    # ((alpha_k, beta_k) for k in FOURIER_ORDERS), displacement along the normal
    fourier: tuple[tuple[float, float], ...]
    star_points: int = 0  # > 0 switches to a star-polygon contour (OOD shapes)
    star_amp: float = 0.0
    star_phase: float = 0.0


@dataclass(frozen=True)
class Scene:
    structures: tuple[StructureDef, ...]
    params: tuple[ShapeParams, ...]

    def landmarks(self) -> np.ndarray:
        pts = [contour_landmarks(p, s.node_count) for s, p in zip(self.structures, self.params)]
        return np.concatenate(pts, axis=0)

    def translated(self, dx: float, dy: float) -> "Scene":
        moved = tuple(
            ShapeParams(
                center=(p.center[0] + dx, p.center[1] + dy),
                semi_axes=p.semi_axes,
                rotation=p.rotation,
                fourier=p.fourier,
                star_points=p.star_points,
                star_amp=p.star_amp,
                star_phase=p.star_phase,
            )
            for p in self.params
        )
        return Scene(structures=self.structures, params=moved)


@dataclass
class Sample:
    """One image with exact landmark ground truth."""

    id: str
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    landmarks: np.ndarray  # (M, 2) float32, normalized (x, y)
    annotation_mask: np.ndarray  # (M,) bool
    ood_label: OODLabel
    seed: int


def contour_points(params: ShapeParams, ts: np.ndarray) -> np.ndarray:
    """Contour positions at curve parameters ts, shape (len(ts), 2)."""
    a, b = params.semi_axes
    if params.star_points > 0:
        r = 1.0 + params.star_amp * np.cos(params.star_points * ts + params.star_phase)
        base = np.stack([a * r * np.cos(ts), b * r * np.sin(ts)], axis=1)
    else:
        base = np.stack([a * np.cos(ts), b * np.sin(ts)], axis=1)
        normal = np.stack([b * np.cos(ts), a * np.sin(ts)], axis=1)
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)
        disp = np.zeros_like(ts)
        for (alpha, beta), k in zip(params.fourier, FOURIER_ORDERS):
            disp += alpha * np.cos(k * ts) + beta * np.sin(k * ts)
        base += disp[:, None] * normal
    c, s = np.cos(params.rotation), np.sin(params.rotation)
    rotated = base @ np.array([[c, s], [-s, c]])  # row-vector rotation by theta
    return rotated + np.asarray(params.center)


def contour_landmarks(params: ShapeParams, node_count: int) -> np.ndarray:
    """Landmark i sits at curve parameter 2*pi*i/node_count."""
    if node_count < 3:
        raise GenerationError(f"need >= 3 landmarks per contour, got {node_count}")
    ts = 2.0 * np.pi * np.arange(node_count) / node_count
    return contour_points(params, ts).astype(np.float32)


def polygon_is_simple(pts: np.ndarray) -> bool:
    """True when no two non-adjacent polygon edges intersect."""
    n = len(pts)
    p = pts
    q = np.roll(pts, -1, axis=0)
    d = q - p
    # pairwise segment intersection via cross products, vectorized over (i, j)
    cross = lambda u, v: u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]
    pi = p[:, None]
    di = d[:, None]
    pj = p[None, :]
    dj = d[None, :]
    denom = cross(di, dj)
    rel = pj - pi
    with np.errstate(divide="ignore", invalid="ignore"):
        t = cross(rel, dj) / denom
        u = cross(rel, di) / denom
    hits = (np.abs(denom) > 1e-12) & (t > 1e-9) & (t < 1 - 1e-9) & (u > 1e-9) & (u < 1 - 1e-9)
    idx = np.arange(n)
    adjacent = (np.abs(idx[:, None] - idx[None, :]) <= 1) | (
        np.abs(idx[:, None] - idx[None, :]) == n - 1
    )
    return not np.any(hits & ~adjacent)


def _within_canvas(pts: np.ndarray) -> bool:
    lo, hi = CANVAS_MARGIN, 1.0 - CANVAS_MARGIN
    return bool((pts >= lo).all() and (pts <= hi).all())


def sample_shape(rng_seed: int, spec: StructureDef, max_attempts: int = 100) -> ShapeParams:
    """Draw shape parameters from the spec's uniform ranges.

    Rejection-resamples until the dense contour stays inside the canvas
    margin and is a simple curve; gives up after max_attempts.
    """
    rng = np.random.default_rng(rng_seed)
    for _ in range(max_attempts):
        a = rng.uniform(*spec.semi_a)
        b = rng.uniform(*spec.semi_b)
        bound = spec.perturb_frac * min(a, b)
        params = ShapeParams(
            center=(rng.uniform(*spec.center_x), rng.uniform(*spec.center_y)),
            semi_axes=(a, b),
            rotation=rng.uniform(*spec.rotation),
            fourier=tuple(
                (rng.uniform(-bound, bound), rng.uniform(-bound, bound)) for _ in FOURIER_ORDERS
            ),
        )
        dense = contour_points(params, np.linspace(0, 2 * np.pi, 256, endpoint=False))
        if _within_canvas(dense) and polygon_is_simple(dense):
            return params
    raise GenerationError(f"no valid shape for {spec.name!r} after {max_attempts} attempts")


def sample_scene(seed: int, structures: tuple[StructureDef, ...]) -> Scene:
    params = tuple(sample_shape(stable_seed(seed, s.name), s) for s in structures)
    return Scene(structures=structures, params=params)


def fill_polygon(img: np.ndarray, poly: np.ndarray, value: float) -> None:
    """Even-odd scanline fill of a normalized-coordinate polygon, in place."""
    h, w = img.shape
    px = poly[:, 0] * (w - 1)
    py = poly[:, 1] * (h - 1)
    x0, y0 = px, py
    x1, y1 = np.roll(px, -1), np.roll(py, -1)
    dy = y1 - y0
    for row in range(h):
        straddles = ((y0 <= row) & (y1 > row)) | ((y1 <= row) & (y0 > row))
        if not straddles.any():
            continue
        xs = x0[straddles] + (row - y0[straddles]) * (x1[straddles] - x0[straddles]) / dy[straddles]
        xs.sort()
        for left, right in zip(xs[0::2], xs[1::2]):
            lo = max(int(np.ceil(left)), 0)
            hi = min(int(np.floor(right)), w - 1)
            if hi >= lo:
                img[row, lo : hi + 1] = value


def _box_blur(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for di in range(3):
        for dj in range(3):
            out += padded[di : di + img.shape[0], dj : dj + img.shape[1]]
    return out / 9.0


def render_mask(params: ShapeParams, node_count: int, h: int, w: int) -> np.ndarray:
    """Noiseless boolean fill mask of a single structure."""
    mask = np.zeros((h, w), dtype=np.float64)
    ts = 2.0 * np.pi * np.arange(DENSE_FACTOR * node_count) / (DENSE_FACTOR * node_count)
    fill_polygon(mask, contour_points(params, ts), 1.0)
    return mask > 0.5


def render(scene: Scene, h: int, w: int, rng_seed: int) -> np.ndarray:
    """Rasterize a scene to a float32 (H, W) image in [0, 1]."""
    rng = np.random.default_rng(rng_seed)
    img = np.full((h, w), BACKGROUND, dtype=np.float64)
    for sdef, params in zip(scene.structures, scene.params):
        value = sdef.intensity + rng.uniform(-INTENSITY_JITTER, INTENSITY_JITTER)
        n_dense = DENSE_FACTOR * sdef.node_count
        ts = 2.0 * np.pi * np.arange(n_dense) / n_dense
        fill_polygon(img, contour_points(params, ts), value)
    img = _box_blur(_box_blur(img))
    img += rng.normal(0.0, PIXEL_NOISE, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _degrade(image: np.ndarray, landmarks: np.ndarray, seed: int, h: int, w: int):
    """Apply per-sample quality degradation and drop the affected annotations.

    Annotations vanish where the evidence does: every node under an occluding
    block, and a noise-level-dependent random fraction under heavy pixel
    noise. At least one node always stays annotated.
    """
    rng = rng_from(seed, "degrade")
    mask = np.ones(len(landmarks), dtype=bool)
    keep_scores = rng.random(len(landmarks))
    if rng.random() < NOISE_AUG_PROB:
        sigma = rng.uniform(*NOISE_AUG_RANGE)
        image = np.clip(image + rng.normal(0.0, sigma, size=image.shape), 0.0, 1.0).astype(
            np.float32
        )
        mask &= keep_scores >= min(0.85, NOISE_DROP_GAIN * sigma)
    if rng.random() < OCCLUDER_PROB:
        side = min(int(rng.integers(*OCCLUDER_SIDES)), h - 1, w - 1)
        row = int(rng.integers(0, h - side + 1))
        col = int(rng.integers(0, w - side + 1))
        image = image.copy()
        image[row : row + side, col : col + side] = 0.0
        px = landmarks[:, 0] * (w - 1)
        py = landmarks[:, 1] * (h - 1)
        inside = (py >= row) & (py < row + side) & (px >= col) & (px < col + side)
        mask &= ~inside
    if not mask.any():
        mask[int(np.argmax(keep_scores))] = True
    return image, mask


def _make_sample(sample_id: str, seed: int, structures, h: int, w: int, degrade: bool) -> Sample:
    scene = sample_scene(stable_seed(seed, "scene"), structures)
    image = render(scene, h, w, stable_seed(seed, "render"))
    landmarks = scene.landmarks()
    mask = np.ones(len(landmarks), dtype=bool)
    if degrade:
        image, mask = _degrade(image, landmarks, seed, h, w)
    return Sample(
        id=sample_id,
        image=image[None, :, :],
        landmarks=landmarks,
        annotation_mask=mask,
        ood_label=OODLabel.IN_DISTRIBUTION,
        seed=seed,
    )


def make_dataset(
    structures: tuple[StructureDef, ...],
    h: int,
    w: int,
    n_train: int,
    n_val: int,
    n_test: int,
    master_seed: int,
    degrade: bool = True,
) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Three disjoint splits; every sample is a pure function of its seed."""
    splits = []
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        if count < 1:
            raise GenerationError(f"split {split!r} needs >= 1 samples, got {count}")
        samples = [
            _make_sample(
                f"{split}-{i:05d}", stable_seed(master_seed, split, i), structures, h, w, degrade
            )
            for i in range(count)
        ]
        splits.append(samples)
    return splits[0], splits[1], splits[2]


def _offcanvas_scene(scene: Scene, rng: np.random.Generator) -> Scene:
    """Translate until at least 70% of the pooled dense contour leaves the frame."""
    ts = np.linspace(0, 2 * np.pi, 128, endpoint=False)
    angle = rng.uniform(0, 2 * np.pi)
    direction = np.array([np.cos(angle), np.sin(angle)])
    for dist in np.arange(0.55, 1.45, 0.05):
        moved = scene.translated(dist * direction[0], dist * direction[1])
        dense = np.concatenate([contour_points(p, ts) for p in moved.params])
        outside = ((dense < 0.0) | (dense > 1.0)).any(axis=1).mean()
        if outside >= 0.7:
            return moved
    raise GenerationError("could not push scene off canvas")


def _star_scene(seed: int, structures: tuple[StructureDef, ...]) -> Scene:
    """Star-polygon stand-ins: same centers and scale, spiky contours."""
    params = []
    for sdef in structures:
        rng = np.random.default_rng(stable_seed(seed, sdef.name, "star"))
        for _ in range(100):
            a = 0.7 * rng.uniform(*sdef.semi_a)
            b = 0.7 * rng.uniform(*sdef.semi_b)
            p = ShapeParams(
                center=(rng.uniform(*sdef.center_x), rng.uniform(*sdef.center_y)),
                semi_axes=(a, b),
                rotation=rng.uniform(*sdef.rotation),
                fourier=tuple((0.0, 0.0) for _ in FOURIER_ORDERS),
                star_points=int(rng.integers(5, 9)),
                star_amp=0.35,
                star_phase=rng.uniform(0, 2 * np.pi),
            )
            dense = contour_points(p, np.linspace(0, 2 * np.pi, 256, endpoint=False))
            if _within_canvas(dense):
                params.append(p)
                break
        else:
            raise GenerationError(f"no valid star shape for {sdef.name!r}")
    return Scene(structures=structures, params=tuple(params))


def make_ood_set(
    structures: tuple[StructureDef, ...],
    h: int,
    w: int,
    n_per_category: int,
    master_seed: int,
) -> list[Sample]:
    """Four out-of-distribution categories, n samples each.

    Landmarks are populated (category-dependent, possibly off canvas) but the
    annotation mask is all False: they are not reliable training targets.
    """
    total_nodes = sum(s.node_count for s in structures)
    out: list[Sample] = []
    for label in OOD_CATEGORIES:
        for i in range(n_per_category):
            seed = stable_seed(master_seed, label.value, i)
            rng = rng_from(seed, "image")
            if label is OODLabel.BLANK:
                image = np.clip(
                    BACKGROUND + rng.normal(0.0, PIXEL_NOISE, size=(h, w)), 0.0, 1.0
                ).astype(np.float32)
                landmarks = np.full((total_nodes, 2), 0.5, dtype=np.float32)
            elif label is OODLabel.NOISE:
                image = rng.uniform(0.0, 1.0, size=(h, w)).astype(np.float32)
                landmarks = np.full((total_nodes, 2), 0.5, dtype=np.float32)
            elif label is OODLabel.OFFCANVAS:
                scene = sample_scene(stable_seed(seed, "scene"), structures)
                scene = _offcanvas_scene(scene, rng_from(seed, "shift"))
                image = render(scene, h, w, stable_seed(seed, "render"))
                landmarks = scene.landmarks()
            else:  # WRONGSHAPE
                scene = _star_scene(stable_seed(seed, "scene"), structures)
                image = render(scene, h, w, stable_seed(seed, "render"))
                landmarks = scene.landmarks()
            out.append(
                Sample(
                    id=f"{label.value}-{i:05d}",
                    image=image[None, :, :] if image.ndim == 2 else image,
                    landmarks=landmarks,
                    annotation_mask=np.zeros(total_nodes, dtype=bool),
                    ood_label=label,
                    seed=seed,
                )
            )
    return out


def curvature_sign_changes(pts: np.ndarray) -> int:
    """Number of discrete curvature sign flips around a closed polygon."""
    prev = np.roll(pts, 1, axis=0)
    nxt = np.roll(pts, -1, axis=0)
    v1 = pts - prev
    v2 = nxt - pts
    cross = v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0]
    sign = np.sign(cross)
    sign = sign[sign != 0]
    return int((sign != np.roll(sign, 1)).sum())
