"""Deterministic 2D collision world.

Scenes hold a handful of elastic discs and squares in a walled square arena.
The subject object starts with a random velocity, everything else at rest, so
the caption ("red disc") and the subject's mask identify the one object whose
motion drives the scene. Simulation, rasterization, captioning and dataset
export all run off a single integer seed and are bit-reproducible.

Coordinates are (x, y) with x along the width axis and y along the height
axis; pixel centers sit at integer + 0.5.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

COLOR_NAMES = ("red", "green", "blue", "yellow", "magenta", "cyan")

# Saturated, well-separated RGB corners. Minimum pairwise distance ~162, and
# every entry is far from the background, so a per-pixel color threshold
# recovers object masks exactly on clean renders.
PALETTE = {
    0: (255, 0, 0),
    1: (0, 200, 0),
    2: (40, 60, 255),
    3: (255, 220, 0),
    4: (230, 0, 230),
    5: (0, 210, 210),
}

BACKGROUND = (32, 32, 32)

SHAPE_NAMES = ("disc", "square")

PAD_TOKEN = "<pad>"
VOCAB = (PAD_TOKEN,) + COLOR_NAMES + SHAPE_NAMES
TOKEN_IDS = {word: i for i, word in enumerate(VOCAB)}


class UnsatisfiableSceneError(RuntimeError):
    """Raised when object placement cannot satisfy the non-overlap constraints."""


class VocabularyError(ValueError):
    """Raised when a caption references a color or shape outside the vocabulary."""


class SimulationError(RuntimeError):
    """Raised when collision resolution fails to converge (should not happen
    for speeds below the minimum radius)."""


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color_id: int
    radius: float
    mass: float


@dataclass(frozen=True)
class CollisionEvent:
    """One recorded momentum exchange.

    ``impulse`` is the momentum delta applied to object ``a`` (for pair events
    object ``b`` received the opposite); for wall events it is the momentum the
    wall imparted to the object.
    """

    frame: int
    kind: str  # "pair" | "wall"
    a: int
    b: int | None
    impulse: tuple[float, float]


@dataclass
class SceneTrace:
    objects: list[SceneObject]
    subject_index: int
    arena: tuple[int, int]  # (width, height) in pixels
    positions: np.ndarray  # (T, n, 2) float64
    velocities: np.ndarray  # (T, n, 2) float64
    events: list[CollisionEvent] = field(default_factory=list)

    @property
    def frame_count(self) -> int:
        return self.positions.shape[0]

    @property
    def subject(self) -> SceneObject:
        return self.objects[self.subject_index]


def kinetic_energy(trace: SceneTrace, frame: int) -> float:
    masses = np.array([o.mass for o in trace.objects])
    v = trace.velocities[frame]
    return float(0.5 * np.sum(masses * np.sum(v * v, axis=1)))


def momentum(trace: SceneTrace, frame: int) -> np.ndarray:
    masses = np.array([o.mass for o in trace.objects])
    return masses[:, None] * trace.velocities[frame]


def total_momentum(trace: SceneTrace, frame: int) -> np.ndarray:
    return momentum(trace, frame).sum(axis=0)


def _resolve_pair(pos, vel, radii, masses, i, j):
    """Elastic impulse between overlapping, approaching bodies i and j.

    Returns the impulse applied to i (None when no collision response fires).
    Squares collide via their circumscribed disc, so the same formula serves
    both shapes.
    """
    d = pos[i] - pos[j]
    dist = math.hypot(d[0], d[1])
    if dist <= 0.0 or dist >= radii[i] + radii[j]:
        return None
    n = d / dist
    rel = float((vel[i] - vel[j]) @ n)
    if rel >= 0.0:  # separating or grazing; no response
        return None
    jmag = -2.0 * masses[i] * masses[j] / (masses[i] + masses[j]) * rel
    vel[i] += (jmag / masses[i]) * n
    vel[j] -= (jmag / masses[j]) * n
    return jmag * n


def simulate_scene(
    seed: int,
    n_objects: int,
    frames: int,
    arena: tuple[int, int] = (64, 64),
    radius_range: tuple[float, float] = (5.0, 9.0),
    speed_range: tuple[float, float] = (1.5, 3.0),
    max_place_attempts: int = 500,
) -> SceneTrace:
    """Simulate one scene from a seed.

    Objects get random shapes, radii and distinct palette colors; placement is
    rejection-sampled so bodies start disjoint and clear of the walls. Only
    the subject starts moving. Integration is one step per frame with elastic
    pair collisions and wall reflections resolved after each move; every
    momentum exchange lands in the event log.
    """
    if n_objects < 1:
        raise ValueError(f"n_objects must be >= 1, got {n_objects}")
    if n_objects > len(PALETTE):
        raise UnsatisfiableSceneError(
            f"n_objects={n_objects} exceeds the {len(PALETTE)}-color palette; "
            "colors must be distinct within a scene"
        )
    if frames < 8:
        raise ValueError(f"frames must be >= 8, got {frames}")
    width, height = arena
    if speed_range[1] >= radius_range[0]:
        raise ValueError(
            "max speed must stay below the minimum radius so per-frame motion "
            f"cannot tunnel: speed_range={speed_range}, radius_range={radius_range}"
        )

    rng = np.random.default_rng(seed)
    radii = rng.uniform(radius_range[0], radius_range[1], n_objects)
    shapes = [SHAPE_NAMES[k] for k in rng.integers(0, len(SHAPE_NAMES), n_objects)]
    colors = [int(c) for c in rng.permutation(len(PALETTE))[:n_objects]]
    masses = radii**2 / 25.0

    pos = np.zeros((n_objects, 2))
    for i in range(n_objects):
        r = radii[i]
        if 2 * (r + 0.5) >= min(width, height):
            raise UnsatisfiableSceneError(
                f"object radius {r:.2f} does not fit the {width}x{height} arena"
            )
        for _ in range(max_place_attempts):
            cand = rng.uniform(
                [r + 0.5, r + 0.5], [width - r - 0.5, height - r - 0.5]
            )
            gaps = [
                math.hypot(*(cand - pos[j])) - (radii[i] + radii[j] + 0.5)
                for j in range(i)
            ]
            if all(g >= 0.0 for g in gaps):
                pos[i] = cand
                break
        else:
            raise UnsatisfiableSceneError(
                f"could not place object {i} after {max_place_attempts} attempts "
                f"(seed={seed}, n_objects={n_objects})"
            )

    subject = int(rng.integers(n_objects))
    angle = rng.uniform(0.0, 2.0 * math.pi)
    speed = rng.uniform(speed_range[0], speed_range[1])
    vel = np.zeros((n_objects, 2))
    vel[subject] = speed * np.array([math.cos(angle), math.sin(angle)])

    objects = [
        SceneObject(shape=shapes[i], color_id=colors[i], radius=float(radii[i]), mass=float(masses[i]))
        for i in range(n_objects)
    ]

    positions = np.zeros((frames, n_objects, 2))
    velocities = np.zeros((frames, n_objects, 2))
    events: list[CollisionEvent] = []

    for f in range(frames):
        positions[f] = pos
        velocities[f] = vel
        if f == frames - 1:
            break
        pos = pos + vel
        _resolve_collisions(pos, vel, radii, masses, (width, height), f + 1, events)

    return SceneTrace(
        objects=objects,
        subject_index=subject,
        arena=(width, height),
        positions=positions,
        velocities=velocities,
        events=events,
    )


def _resolve_collisions(pos, vel, radii, masses, arena, frame, events, max_passes=16):
    """Resolve all pair and wall contacts in place after a position update.

    Pair impulses fire only for approaching bodies and wall reflections only
    for outward motion, so each pass strictly dissipates overlap; a handful of
    passes settles chains (e.g. a struck object shoved into a wall).
    """
    n = len(radii)
    width, height = arena
    for _ in range(max_passes):
        changed = False
        for i in range(n):
            for j in range(i + 1, n):
                imp = _resolve_pair(pos, vel, radii, masses, i, j)
                if imp is not None:
                    events.append(
                        CollisionEvent(frame, "pair", i, j, (float(imp[0]), float(imp[1])))
                    )
                    changed = True
        for i in range(n):
            r = radii[i]
            for axis, size in ((0, width), (1, height)):
                lo, hi = r, size - r
                bounced = False
                if pos[i, axis] < lo:
                    pos[i, axis] = 2 * lo - pos[i, axis]
                    if vel[i, axis] < 0:
                        bounced = True
                elif pos[i, axis] > hi:
                    pos[i, axis] = 2 * hi - pos[i, axis]
                    if vel[i, axis] > 0:
                        bounced = True
                if bounced:
                    dv = -2.0 * vel[i, axis]
                    vel[i, axis] = -vel[i, axis]
                    imp = [0.0, 0.0]
                    imp[axis] = float(masses[i] * dv)
                    events.append(CollisionEvent(frame, "wall", i, None, (imp[0], imp[1])))
                    changed = True
        if not changed:
            return
    # One extra sweep to verify nothing is left out of bounds.
    for i in range(n):
        r = radii[i]
        if not (r <= pos[i, 0] <= width - r and r <= pos[i, 1] <= height - r):
            raise SimulationError(
                f"collision resolution did not converge at frame {frame} "
                f"(object {i} at {pos[i]})"
            )


def _coverage(shape: str, center: np.ndarray, radius: float, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    dx = xx - center[0]
    dy = yy - center[1]
    if shape == "disc":
        return dx * dx + dy * dy <= radius * radius
    if shape == "square":
        half = radius / math.sqrt(2.0)
        return np.maximum(np.abs(dx), np.abs(dy)) <= half
    raise VocabularyError(f"unknown shape {shape!r}; expected one of {SHAPE_NAMES}")


def render(trace: SceneTrace) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize a trace to (video, subject_mask).

    video is uint8 (T, H, W, 3); mask is uint8 (T, H, W) with values {0, 1}.
    Objects draw in index order with the subject last, so the subject is never
    occluded and its mask equals its painted pixels exactly.
    """
    width, height = trace.arena
    T = trace.frame_count
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    xx, yy = np.meshgrid(xs, ys)  # each (H, W)

    video = np.empty((T, height, width, 3), dtype=np.uint8)
    video[:] = np.array(BACKGROUND, dtype=np.uint8)
    mask = np.zeros((T, height, width), dtype=np.uint8)

    order = [i for i in range(len(trace.objects)) if i != trace.subject_index]
    order.append(trace.subject_index)

    for f in range(T):
        frame = video[f]
        for i in order:
            obj = trace.objects[i]
            region = _coverage(obj.shape, trace.positions[f, i], obj.radius, xx, yy)
            frame[region] = PALETTE[obj.color_id]
            if i == trace.subject_index:
                mask[f] = region
    return video, mask


@dataclass(frozen=True)
class Caption:
    """Tokenized scene caption: subject color then shape, right-padded."""

    token_ids: tuple[int, ...]
    subject_token_pos: int = 0

    def words(self) -> list[str]:
        return [VOCAB[t] for t in self.token_ids if t != TOKEN_IDS[PAD_TOKEN]]


def make_caption(trace: SceneTrace, text_len: int = 8) -> Caption:
    if text_len < 2:
        raise ValueError(f"text_len must be >= 2 to hold color and shape, got {text_len}")
    subject = trace.subject
    color_name = COLOR_NAMES[subject.color_id] if 0 <= subject.color_id < len(COLOR_NAMES) else None
    if color_name is None:
        raise VocabularyError(f"color_id {subject.color_id} has no palette entry")
    if subject.shape not in SHAPE_NAMES:
        raise VocabularyError(f"shape {subject.shape!r} has no vocabulary token")
    ids = [TOKEN_IDS[color_name], TOKEN_IDS[subject.shape]]
    ids.extend([TOKEN_IDS[PAD_TOKEN]] * (text_len - len(ids)))
    return Caption(token_ids=tuple(ids), subject_token_pos=0)


def transform_mask_sequence(base: np.ndarray, transforms: list[dict]) -> np.ndarray:
    """Animate a single-frame mask with per-frame rigid transforms.

    Each transform holds dx, dy (pixels) and rot_deg (counterclockwise about
    the base mask's centroid); missing keys default to 0. Sampling is nearest
    neighbor, out-of-frame content drops. Returns uint8 (T, H, W) in {0, 1}.
    """
    base = np.asarray(base)
    if base.ndim != 2:
        raise ValueError(f"base mask must be (H, W), got shape {base.shape}")
    vals = np.unique(base)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError(f"base mask must be binary, got values {vals}")
    if not transforms:
        raise ValueError("transform list is empty")
    H, W = base.shape
    ys, xs = np.nonzero(base)
    if len(xs) == 0:
        raise ValueError("base mask is empty; nothing to transform")
    cx = float(xs.mean()) + 0.5
    cy = float(ys.mean()) + 0.5
    gx, gy = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    out = np.zeros((len(transforms), H, W), dtype=np.uint8)
    for f, tr in enumerate(transforms):
        extra = set(tr) - {"dx", "dy", "rot_deg"}
        if extra:
            raise ValueError(f"transform {f} has unknown key(s) {sorted(extra)}")
        dx = float(tr.get("dx", 0.0))
        dy = float(tr.get("dy", 0.0))
        theta = math.radians(float(tr.get("rot_deg", 0.0)))
        # Invert: undo translation, then rotate by -theta about the centroid.
        rx = gx - dx - cx
        ry = gy - dy - cy
        sx = math.cos(theta) * rx + math.sin(theta) * ry + cx
        sy = -math.sin(theta) * rx + math.cos(theta) * ry + cy
        ix = np.floor(sx).astype(int)
        iy = np.floor(sy).astype(int)
        valid = (ix >= 0) & (ix < W) & (iy >= 0) & (iy < H)
        frame = out[f]
        frame[valid] = base[iy[valid], ix[valid]]
    return out


def parse_caption(text: str, text_len: int = 8) -> Caption:
    """Tokenize a free-form caption like "red disc"; unknown words raise."""
    ids = []
    for word in text.split():
        if word not in TOKEN_IDS:
            raise VocabularyError(f"word {word!r} not in vocabulary {VOCAB}")
        ids.append(TOKEN_IDS[word])
    if not ids:
        raise VocabularyError("caption is empty")
    if len(ids) > text_len:
        raise VocabularyError(f"caption has {len(ids)} tokens; text_len is {text_len}")
    ids.extend([TOKEN_IDS[PAD_TOKEN]] * (text_len - len(ids)))
    return Caption(token_ids=tuple(ids), subject_token_pos=0)
