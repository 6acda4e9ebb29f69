"""aortaseg: Synthetic candy-cane aorta phantoms.

Two vertical tubes (ascending and descending aorta) are joined above the arch
plane by a half torus (aortic arch). The tubes sit in a noisy soft-tissue
background scattered with organ-like ellipsoids that never touch the aorta.
Geometry is given in millimetres with x, y, z ordering; arrays are z-major.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidSpecError
from .pipeline import target_dims
from .volume import LabelVolume, Spacing, Volume

logger = logging.getLogger("aortaseg:phantom")

ASCENDING: int = 1
ARCH: int = 2
DESCENDING: int = 3

MARGIN_VOXELS: int = 2
BLOB_AXES_MM: tuple[float, float] = (6.0, 16.0)
BLOB_ATTEMPTS: int = 50
REDRAW_LIMIT: int = 100
AXIS_JITTER_MM: float = 8.0
RADIUS_JITTER_MM: float = 2.0
NOISE_JITTER: float = 0.25
ANISOTROPIC_SPACING: Spacing = (2.5, 0.7, 0.7)


@dataclass(frozen=True)
class PhantomSpec:  # pylint: disable=too-many-instance-attributes
    """Geometry and appearance of one phantom.

    Attributes
    ----------
    shape : tuple[int, int, int]
        Grid size (nz, ny, nx).
    spacing : Spacing
        Voxel size (sz, sy, sx) in mm.
    tube_radius : float
        Aorta radius in mm.
    arch_center : tuple[float, float, float]
        Centre (x, y, z) in mm of the arch torus; z is the arch plane.
    arch_radius : float
        Distance in mm from the torus centre to each tube axis.
    arch_angle : float
        Direction in degrees, in the x-y plane, from the ascending to the
        descending axis.
    root_z : float
        Height in mm of the aortic root, where the ascending tube starts.
    bottom_z : float
        Height in mm where the descending tube starts.
    background_hu, aorta_hu : float
        Intensities before noise.
    organ_hu : tuple[float, float]
        Range of the organ blob intensities.
    noise_sigma : float
        Standard deviation of the additive Gaussian noise in HU.
    blob_count : int
        Number of organ blobs.
    seed : int
        Seed of the blob placement and the noise.
    """

    shape: tuple[int, int, int] = (128, 96, 96)
    spacing: Spacing = (1.0, 1.0, 1.0)
    tube_radius: float = 8.0
    arch_center: tuple[float, float, float] = (48.0, 48.0, 86.0)
    arch_radius: float = 24.0
    arch_angle: float = 0.0
    root_z: float = 50.0
    bottom_z: float = 4.0
    background_hu: float = 0.0
    aorta_hu: float = 40.0
    organ_hu: tuple[float, float] = (-60.0, 60.0)
    noise_sigma: float = 20.0
    blob_count: int = 6
    seed: int = 0

    @property
    def axes(self) -> tuple[tuple[float, float], tuple[float, float]]:
        """(x, y) positions of the ascending and descending tube axes."""
        cx, cy, _ = self.arch_center
        theta = math.radians(self.arch_angle)
        dx = self.arch_radius * math.cos(theta)
        dy = self.arch_radius * math.sin(theta)
        return (cx - dx, cy - dy), (cx + dx, cy + dy)

    def with_axes(
        self, ascending: tuple[float, float], descending: tuple[float, float]
    ) -> PhantomSpec:
        """Copy of the spec whose tubes stand at the given (x, y) positions."""
        ax, ay = ascending
        dx, dy = descending
        centre = ((ax + dx) / 2, (ay + dy) / 2, self.arch_center[2])
        radius = math.hypot(dx - ax, dy - ay) / 2
        angle = math.degrees(math.atan2(dy - ay, dx - ax))
        return replace(self, arch_center=centre, arch_radius=radius, arch_angle=angle)

    def validate(self) -> None:
        """Raise InvalidSpecError unless the aorta fits inside the volume."""
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise InvalidSpecError(f"invalid phantom shape {self.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise InvalidSpecError(f"invalid phantom spacing {self.spacing}")
        if self.tube_radius <= 0:
            raise InvalidSpecError("tube radius must be positive")
        if self.noise_sigma < 0 or self.blob_count < 0:
            raise InvalidSpecError("noise sigma and blob count must be non-negative")
        if self.organ_hu[0] > self.organ_hu[1]:
            raise InvalidSpecError(f"empty organ intensity range {self.organ_hu}")
        r = self.tube_radius
        if self.arch_radius <= r + 2.0:
            raise InvalidSpecError(
                f"tube axes {2 * self.arch_radius:.1f} mm apart, "
                f"need more than {2 * (r + 2.0):.1f} mm"
            )
        cx, cy, cz = self.arch_center
        theta = math.radians(self.arch_angle)
        cos, sin = abs(math.cos(theta)), abs(math.sin(theta))
        half_x = (self.arch_radius + r) * cos + r * sin
        half_y = (self.arch_radius + r) * sin + r * cos
        low_z = min(self.root_z, self.bottom_z)
        extents = (
            ("z", low_z, cz + self.arch_radius + r, 0),
            ("y", cy - half_y, cy + half_y, 1),
            ("x", cx - half_x, cx + half_x, 2),
        )
        for name, low, high, axis in extents:
            margin = MARGIN_VOXELS * self.spacing[axis]
            top = (self.shape[axis] - 1) * self.spacing[axis] - margin
            if low < margin or high > top:
                raise InvalidSpecError(
                    f"aorta spans {name} in [{low:.1f}, {high:.1f}] mm, "
                    f"volume allows [{margin:.1f}, {top:.1f}] mm"
                )
        if max(self.root_z, self.bottom_z) >= cz:
            raise InvalidSpecError("tubes must start below the arch plane")


@dataclass
class Phantom:
    """A generated phantom with the spec it was built from."""

    volume: Volume
    labels: LabelVolume
    spec: PhantomSpec = field(repr=False)

    @property
    def pair(self) -> tuple[Volume, LabelVolume]:
        """(volume, labels) as consumed by the trainer."""
        return self.volume, self.labels


def _coordinates(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    z, y, x = np.ogrid[: spec.shape[0], : spec.shape[1], : spec.shape[2]]
    sz, sy, sx = spec.spacing
    return z * sz, y * sy, x * sx


def aorta_labels(spec: PhantomSpec) -> np.ndarray:
    """Reference labels of the phantom geometry.

    Voxels on the arch plane belong to the arch, so the three classes form a
    partition of the aorta.
    """
    z, y, x = _coordinates(spec)
    cx, cy, cz = spec.arch_center
    r2 = spec.tube_radius**2
    (ax, ay), (dx, dy) = spec.axes
    below = z < cz
    ascending = ((x - ax) ** 2 + (y - ay) ** 2 <= r2) & below & (z >= spec.root_z)
    descending = ((x - dx) ** 2 + (y - dy) ** 2 <= r2) & below & (z >= spec.bottom_z)
    theta = math.radians(spec.arch_angle)
    u = (x - cx) * math.cos(theta) + (y - cy) * math.sin(theta)
    w = (y - cy) * math.cos(theta) - (x - cx) * math.sin(theta)
    h = z - cz
    arch = (h >= 0) & ((np.sqrt(u**2 + h**2) - spec.arch_radius) ** 2 + w**2 <= r2)
    labels = np.zeros(spec.shape, dtype=np.uint8)
    labels[ascending] = ASCENDING
    labels[arch] = ARCH
    labels[descending] = DESCENDING
    return labels


def _draw_blob(
    spec: PhantomSpec, aorta: np.ndarray, rng: np.random.Generator
) -> np.ndarray | None:
    z, y, x = _coordinates(spec)
    extent = [(n - 1) * s for n, s in zip(spec.shape, spec.spacing)]
    for _ in range(BLOB_ATTEMPTS):
        centre = rng.uniform(0.0, 1.0, size=3) * extent
        axes = rng.uniform(*BLOB_AXES_MM, size=3)
        blob = (
            ((z - centre[0]) / axes[0]) ** 2
            + ((y - centre[1]) / axes[1]) ** 2
            + ((x - centre[2]) / axes[2]) ** 2
        ) <= 1.0
        if not np.any(blob & aorta):
            return blob
    return None


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelVolume]:
    """Build the intensity volume and reference labels of a phantom.

    Parameters
    ----------
    spec : PhantomSpec
        Geometry and appearance.

    Returns
    -------
    tuple[Volume, LabelVolume]
        Integer Hounsfield intensities and the four-class labels.
    """
    spec.validate()
    logger.debug("generate_phantom(): seed %d", spec.seed)
    labels = aorta_labels(spec)
    aorta = labels != 0
    blob_seq, noise_seq = np.random.SeedSequence(spec.seed).spawn(2)
    blob_rng = np.random.default_rng(blob_seq)
    intensities = np.full(spec.shape, spec.background_hu, dtype=np.float64)
    for _ in range(spec.blob_count):
        blob = _draw_blob(spec, aorta, blob_rng)
        if blob is None:
            logger.debug("generate_phantom(): no room for another organ blob")
            break
        intensities[blob] = blob_rng.uniform(*spec.organ_hu)
    intensities[aorta] = spec.aorta_hu
    if spec.noise_sigma > 0:
        noise_rng = np.random.default_rng(noise_seq)
        intensities += noise_rng.normal(0.0, spec.noise_sigma, size=spec.shape)
    data = np.clip(np.rint(intensities), -32768, 32767).astype(np.int16)
    return Volume(data, spec.spacing), LabelVolume(labels, spec.spacing, class_count=4)


def derive_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    """Independent child seed sequences, one per phantom."""
    return np.random.SeedSequence(seed).spawn(count)


def jitter_spec(base: PhantomSpec, rng: np.random.Generator) -> PhantomSpec:
    """Randomly displaced tube axes, tube radius and noise level."""
    ascending, descending = base.axes
    jitter = AXIS_JITTER_MM
    ascending = tuple(a + rng.uniform(-jitter, jitter) for a in ascending)
    descending = tuple(d + rng.uniform(-jitter, jitter) for d in descending)
    spec = base.with_axes(ascending, descending)  # type: ignore[arg-type]
    return replace(
        spec,
        tube_radius=base.tube_radius + rng.uniform(-RADIUS_JITTER_MM, RADIUS_JITTER_MM),
        noise_sigma=base.noise_sigma * rng.uniform(1 - NOISE_JITTER, 1 + NOISE_JITTER),
    )


def make_dataset(
    count: int,
    base_spec: PhantomSpec | None = None,
    seed: int = 0,
    spacing: Spacing | None = None,
) -> list[Phantom]:
    """Generate a set of phantoms with jittered geometry.

    Parameters
    ----------
    count : int
        Number of phantoms.
    base_spec : PhantomSpec | None, default None
        Spec around which geometry is jittered.
    seed : int, default 0
        Base seed; each phantom derives its own.
    spacing : Spacing | None, default None
        Voxel size of an anisotropic variant; the physical extent of the
        base grid is kept and the tubes start at least two z voxels up.

    Returns
    -------
    list[Phantom]
        The generated phantoms.
    """
    if count < 1:
        raise InvalidSpecError(f"phantom count must be at least 1, got {count}")
    base = base_spec or PhantomSpec()
    if spacing is not None:
        base = replace(
            base,
            shape=target_dims(base.shape, base.spacing, spacing),
            spacing=tuple(float(s) for s in spacing),
        )
        # coarse z voxels need a larger margin below the tubes
        floor_z = MARGIN_VOXELS * base.spacing[0]
        base = replace(
            base, root_z=max(base.root_z, floor_z), bottom_z=max(base.bottom_z, floor_z)
        )
    phantoms = []
    for index, child in enumerate(derive_seeds(seed, count)):
        rng = np.random.default_rng(child)
        phantom_seed = int(child.generate_state(1)[0])
        for _ in range(REDRAW_LIMIT):
            spec = replace(jitter_spec(base, rng), seed=phantom_seed)
            try:
                spec.validate()
                break
            except InvalidSpecError as err:
                logger.debug("make_dataset(): redrawing phantom %d: %s", index, err)
        else:
            raise InvalidSpecError(
                f"no valid geometry for phantom {index} after {REDRAW_LIMIT} draws"
            )
        volume, labels = generate_phantom(spec)
        phantoms.append(Phantom(volume, labels, spec))
    logger.info("generated %d phantoms of shape %s", count, base.shape)
    return phantoms
