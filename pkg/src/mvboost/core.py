"""Shared domain types: images, orthographic camera poses, the six-view rig,
multi-view sets, Gaussian scenes and seeded random streams."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image as PILImage


class ParameterError(ValueError):
    """Raised when an operation receives an argument outside its domain."""


RIG_LABELS = ("front", "front_right", "right", "back", "left", "front_left")
RIG_AZIMUTHS = (0.0, 45.0, 90.0, 180.0, 270.0, 315.0)
STAGES = ("generated", "rendered", "noised", "refined")


# ---------------------------------------------------------------------------
# Images

def validate_image(img: np.ndarray) -> np.ndarray:
    """Check the Image invariants (H, W, 3), finite, inside [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ParameterError(f"image must have shape (H, W, 3), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ParameterError("image contains non-finite values")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ParameterError("image values must lie in [0, 1]")
    return img


def save_png(path: str | Path, img: np.ndarray) -> None:
    img = validate_image(img)
    data = np.round(img * 255.0).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(path)


def load_png(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float64)
    return data / 255.0


# ---------------------------------------------------------------------------
# Cameras

@dataclass(frozen=True)
class CameraPose:
    """Orthographic camera looking at the origin.

    azimuth rotates about +y starting from +z (front), elevation tilts toward +y.
    """

    azimuth: float
    elevation: float = 0.0
    ortho_half_extent: float = 1.2
    label: str = "free"

    def __post_init__(self):
        if not self.ortho_half_extent > 0:
            raise ParameterError("ortho_half_extent must be positive")
        if not -90.0 <= self.elevation <= 90.0:
            raise ParameterError(f"elevation {self.elevation} outside [-90, 90]")
        object.__setattr__(self, "azimuth", float(self.azimuth) % 360.0)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (right, up, forward) unit vectors in world coordinates."""
        az = np.deg2rad(self.azimuth)
        el = np.deg2rad(self.elevation)
        to_cam = np.array([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
        forward = -to_cam
        right = np.array([np.cos(az), 0.0, -np.sin(az)])
        up = np.cross(right, forward)
        return right, up, forward

    def embedding(self) -> np.ndarray:
        """6-dim pose feature used by the reconstructor."""
        az = np.deg2rad(self.azimuth)
        el = np.deg2rad(self.elevation)
        return np.array([np.sin(az), np.cos(az), np.sin(el), np.cos(el),
                         self.ortho_half_extent, 1.0])

    def key(self) -> tuple[float, float, float]:
        return (round(self.azimuth, 9), round(self.elevation, 9), round(self.ortho_half_extent, 9))


@dataclass(frozen=True)
class CanonicalRig:
    poses: tuple[CameraPose, ...]

    def __post_init__(self):
        if len(self.poses) != 6:
            raise ParameterError("canonical rig must hold exactly 6 poses")
        if len({p.azimuth for p in self.poses}) != 6:
            raise ParameterError("rig azimuths must be pairwise distinct")

    def __iter__(self):
        return iter(self.poses)

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    @property
    def labels(self) -> list[str]:
        return [p.label for p in self.poses]


def make_canonical_rig(ortho_half_extent: float = 1.2) -> CanonicalRig:
    if not ortho_half_extent > 0:
        raise ParameterError("ortho_half_extent must be positive")
    return CanonicalRig(tuple(
        CameraPose(az, 0.0, ortho_half_extent, label)
        for az, label in zip(RIG_AZIMUTHS, RIG_LABELS)
    ))


def is_canonical(poses: Sequence[CameraPose], rig: CanonicalRig | None = None) -> bool:
    if len(poses) != 6:
        return False
    rig = rig or make_canonical_rig(poses[0].ortho_half_extent)
    return all(p.key() == q.key() for p, q in zip(poses, rig.poses))


# ---------------------------------------------------------------------------
# Multi-view sets

@dataclass
class MultiViewSet:
    """Ordered (pose, image) pairs. ``images`` has shape (n, H, W, 3)."""

    poses: list[CameraPose]
    images: np.ndarray
    stage_tag: str = "generated"
    condition: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ParameterError(f"views must have shape (n, H, W, 3), got {self.images.shape}")
        if len(self.poses) != self.images.shape[0] or len(self.poses) < 1:
            raise ParameterError("pose count must equal view count and be >= 1")
        if len({p.key() for p in self.poses}) != len(self.poses):
            raise ParameterError("poses must be pairwise distinct")
        if self.stage_tag not in STAGES:
            raise ParameterError(f"unknown stage tag {self.stage_tag!r}")

    def __len__(self):
        return len(self.poses)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def with_images(self, images: np.ndarray, stage_tag: str) -> "MultiViewSet":
        return MultiViewSet(list(self.poses), images, stage_tag, self.condition)


# ---------------------------------------------------------------------------
# Gaussian scenes

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianScene:
    """Anisotropic Gaussian splats stored as parallel arrays.

    means (N,3), rotations (N,4) unit quaternions (w,x,y,z), scales (N,3) > 0,
    opacity_logits (N,), colors (N,3) in [0,1].
    """

    means: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)

    def __len__(self):
        return len(self.means)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @classmethod
    def empty(cls) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    def copy(self) -> "GaussianScene":
        return GaussianScene(*(a.copy() for a in self.arrays()))

    def arrays(self) -> tuple[np.ndarray, ...]:
        return self.means, self.rotations, self.scales, self.opacity_logits, self.colors

    def normalized(self) -> "GaussianScene":
        q = self.rotations / np.linalg.norm(self.rotations, axis=1, keepdims=True)
        return dataclasses.replace(self, rotations=q)

    def subset(self, idx) -> "GaussianScene":
        return GaussianScene(*(a[idx] for a in self.arrays()))

    def check(self) -> None:
        """Raise if any GaussianScene invariant is violated."""
        if len(self) == 0:
            return
        if np.abs(np.linalg.norm(self.rotations, axis=1) - 1.0).max() > 1e-6:
            raise ParameterError("rotation quaternions must be unit length")
        if not np.all(self.scales > 0):
            raise ParameterError("scales must be strictly positive")
        op = self.opacities
        if not np.all((op > 0) & (op < 1)):
            raise ParameterError("opacities must lie strictly inside (0, 1)")
        if self.colors.min() < 0 or self.colors.max() > 1:
            raise ParameterError("colors must lie in [0, 1]")
        for a in self.arrays():
            if not np.all(np.isfinite(a)):
                raise ParameterError("scene contains non-finite values")

    @staticmethod
    def concat(scenes: Iterable["GaussianScene"]) -> "GaussianScene":
        scenes = list(scenes)
        if not scenes:
            return GaussianScene.empty()
        return GaussianScene(*(np.concatenate(parts) for parts in zip(*(s.arrays() for s in scenes))))


SCENE_HEADER = "MVB-GS v1"


def save_scene(path: str | Path, scene: GaussianScene) -> None:
    rows = np.concatenate([scene.means, scene.rotations, scene.scales,
                           scene.opacity_logits[:, None], scene.colors], axis=1)
    lines = [f"{SCENE_HEADER} {len(scene)}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def load_scene(path: str | Path) -> GaussianScene:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split()
    if len(head) != 3 or " ".join(head[:2]) != SCENE_HEADER:
        raise ParameterError(f"{path}: not an {SCENE_HEADER} file")
    count = int(head[2])
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise ParameterError(f"{path}: header says {count} splats, found {len(body)}")
    if count == 0:
        return GaussianScene.empty()
    rows = np.array([[float(v) for v in ln.split()] for ln in body])
    if rows.shape[1] != 14:
        raise ParameterError(f"{path}: expected 14 columns per splat")
    return GaussianScene(rows[:, 0:3], rows[:, 3:7], rows[:, 7:10], rows[:, 10], rows[:, 11:14])


# ---------------------------------------------------------------------------
# Random streams

@dataclass(frozen=True)
class Rng:
    """Seeded PCG64 stream. ``split`` derives independent child streams from
    integer keys via SeedSequence spawn keys, so work items never share state."""

    seed: int
    path: tuple[int, ...] = field(default=())

    def split(self, *keys: int) -> "Rng":
        return Rng(self.seed, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(ss))


def sample_standard_normal(rng: Rng, count: int) -> np.ndarray:
    if count < 0:
        raise ParameterError("count must be non-negative")
    return rng.generator().standard_normal(count)
