"""Domain types, dataset validation, distances and the seeded RNG contract."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

EARTH_RADIUS_KM = 6371.0


class GeoFTSError(Exception):
    """Base class for all errors raised by the package."""


class DuplicateLocation(GeoFTSError):
    pass


class NonFiniteValue(GeoFTSError):
    pass


class GridNotUniform(GeoFTSError):
    pass


class IndexOutOfRange(GeoFTSError):
    pass


class InvalidCoordinates(GeoFTSError):
    pass


class InvalidChangeConfig(GeoFTSError):
    pass


DomainKind = Literal["plane", "sphere"]


def _readonly(a: np.ndarray) -> np.ndarray:
    # arrays that are already read-only are shared rather than copied
    if isinstance(a, np.ndarray) and a.dtype == np.float64 and not a.flags.writeable:
        return a
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def lonlat_to_xyz(lon: np.ndarray, lat: np.ndarray) -> np.ndarray:
    """Unit-sphere 3-vectors for longitude/latitude given in degrees."""
    lon = np.radians(lon)
    lat = np.radians(lat)
    return np.column_stack(
        [np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)]
    )


@dataclass(frozen=True, eq=False)
class SpatialDomain:
    """Observation locations, either planar ``(x, y)`` or ``(lon, lat)`` in degrees.

    Construction checks coordinate ranges only; distinctness is checked by
    :func:`validate_dataset` (and by :meth:`check`).
    """

    kind: DomainKind
    coords: np.ndarray
    xyz: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("plane", "sphere"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise InvalidCoordinates("coords must have shape (n, 2)")
        if not np.all(np.isfinite(coords)):
            raise InvalidCoordinates("coordinates must be finite")
        if self.kind == "sphere":
            lon, lat = coords[:, 0], coords[:, 1]
            if np.any(lon < -180) or np.any(lon >= 180):
                raise InvalidCoordinates("longitude must satisfy -180 <= lon < 180")
            if np.any(np.abs(lat) > 90):
                raise InvalidCoordinates("latitude must satisfy -90 <= lat <= 90")
            object.__setattr__(self, "xyz", _readonly(lonlat_to_xyz(lon, lat)))
        object.__setattr__(self, "coords", _readonly(coords))

    @classmethod
    def plane(cls, coords) -> "SpatialDomain":
        return cls("plane", coords)

    @classmethod
    def sphere(cls, lonlat) -> "SpatialDomain":
        return cls("sphere", lonlat)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def embedding(self) -> np.ndarray:
        """Coordinates in which Euclidean distance is the domain distance.

        Planar domains return the raw coordinates; spherical domains return
        3-vectors on the Earth sphere in kilometres (chordal distance).
        """
        if self.kind == "plane":
            return np.asarray(self.coords)
        return EARTH_RADIUS_KM * np.asarray(self.xyz)

    def check(self) -> None:
        # on the sphere compare 3-vectors: the poles collapse all longitudes
        key = self.coords if self.kind == "plane" else np.round(self.xyz, 12)
        _, first = np.unique(key, axis=0, return_index=True)
        if first.size != self.n:
            dup = np.setdiff1d(np.arange(self.n), first)
            raise DuplicateLocation(f"location {int(dup[0])} duplicates an earlier location")


@dataclass(frozen=True, eq=False)
class FunctionalDataset:
    """Panel ``values[i, k, j] = Y_k(s_i, u_j)``."""

    domain: SpatialDomain
    values: np.ndarray
    u_grid: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _readonly(self.values))
        object.__setattr__(self, "u_grid", _readonly(np.ravel(self.u_grid)))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @property
    def m(self) -> int:
        return self.values.shape[2]

    def with_values(self, values: np.ndarray) -> "FunctionalDataset":
        return FunctionalDataset(self.domain, values, self.u_grid)


def uniform_grid(m: int) -> np.ndarray:
    """``m`` points evenly spaced on [0, 1], endpoints included."""
    return np.linspace(0.0, 1.0, m) if m > 1 else np.array([0.5])


def validate_dataset(raw: FunctionalDataset) -> FunctionalDataset:
    """Return ``raw`` unchanged if every dataset invariant holds."""
    vals = raw.values
    if vals.ndim != 3:
        raise ValueError("values must be indexed (i, k, j)")
    n, N, m = vals.shape
    if raw.domain.n != n:
        raise ValueError(f"domain has {raw.domain.n} locations but values have {n}")
    if raw.u_grid.shape != (m,):
        raise ValueError(f"u_grid has {raw.u_grid.size} points but values have {m}")
    bad = np.argwhere(~np.isfinite(vals))
    if bad.size:
        i, k, j = (int(x) for x in bad[0])
        raise NonFiniteValue(f"non-finite value at (i={i}, k={k}, j={j})")
    u = raw.u_grid
    if not np.all(np.isfinite(u)) or u[0] < 0 or u[-1] > 1:
        raise GridNotUniform("u_grid must lie inside [0, 1]")
    if m > 1:
        du = np.diff(u)
        if np.any(du <= 0):
            raise GridNotUniform("u_grid must be strictly increasing")
        step = (u[-1] - u[0]) / (m - 1)
        if np.max(np.abs(du - step)) > 1e-9 * step:
            raise GridNotUniform("u_grid spacing is not uniform")
    raw.domain.check()
    return raw


def pairwise_distances(domain: SpatialDomain, a=None, b=None) -> np.ndarray:
    """Distance matrix between index sets ``a`` and ``b`` (default: all)."""
    emb = domain.embedding()
    xa = emb if a is None else emb[np.asarray(a)]
    xb = emb if b is None else emb[np.asarray(b)]
    diff = xa[:, None, :] - xb[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def distance(domain: SpatialDomain, i1: int, i2: int) -> float:
    """Euclidean distance on the plane; chordal distance in km on the sphere."""
    n = domain.n
    for i in (i1, i2):
        if not (0 <= int(i) < n):
            raise IndexOutOfRange(f"index {i} outside [0, {n})")
    if i1 == i2:
        return 0.0
    emb = domain.embedding()
    return float(np.linalg.norm(emb[i1] - emb[i2]))


@dataclass(frozen=True)
class ChangeConfig:
    """Changepoint model and an optional pilot estimate of the change times.

    ``pilot_tau`` is ``None`` for the global null. For AMOC it holds one
    integer per location in ``[1, N]`` (``N`` meaning "no change"); for the
    epidemic model it holds ``(tau1, tau2)`` pairs with ``tau1 < tau2``.
    """

    model: Literal["amoc", "epidemic"] = "amoc"
    pilot_tau: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.model not in ("amoc", "epidemic"):
            raise InvalidChangeConfig(f"unknown model {self.model!r}")
        if self.pilot_tau is None:
            return
        tau = np.asarray(self.pilot_tau)
        if not np.issubdtype(tau.dtype, np.integer):
            if not np.all(tau == np.round(tau)):
                raise InvalidChangeConfig("pilot changepoints must be integers")
            tau = tau.astype(int)
        if self.model == "epidemic":
            if tau.ndim != 2 or tau.shape[1] != 2:
                raise InvalidChangeConfig("epidemic pilot must be (n, 2) pairs")
            if np.any(tau[:, 0] < 1) or np.any(tau[:, 0] >= tau[:, 1]):
                raise InvalidChangeConfig("epidemic pairs need 1 <= tau1 < tau2")
        elif tau.ndim != 1:
            raise InvalidChangeConfig("AMOC pilot must be one integer per location")
        tau = tau.copy()
        tau.setflags(write=False)
        object.__setattr__(self, "pilot_tau", tau)

    @property
    def is_null(self) -> bool:
        return self.pilot_tau is None

    def change_mask(self, n: int, N: int) -> np.ndarray:
        """Boolean ``(n, N)`` array, True where year k lies in the change set."""
        k = np.arange(1, N + 1)
        if self.pilot_tau is None:
            return np.zeros((n, N), dtype=bool)
        tau = self.pilot_tau
        if tau.shape[0] != n:
            raise InvalidChangeConfig(f"pilot has {tau.shape[0]} entries, expected {n}")
        if self.model == "amoc":
            if np.any(tau > N):
                raise InvalidChangeConfig("AMOC pilot must satisfy tau <= N")
            return k[None, :] > tau[:, None]
        if np.any(tau[:, 1] > N):
            raise InvalidChangeConfig("epidemic pilot must satisfy tau2 <= N")
        return (k[None, :] > tau[:, :1]) & (k[None, :] <= tau[:, 1:])


@dataclass(frozen=True)
class RngSpec:
    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not (0 <= int(v) < 2**64):
                raise ValueError(f"{name} must be a 64-bit unsigned integer")

    def generator(self, *subkey: int) -> np.random.Generator:
        """Independent stream for ``(seed, stream_id, *subkey)``.

        Streams depend only on the key, never on thread or process layout.
        """
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id), *map(int, subkey)))
        return np.random.Generator(np.random.PCG64(ss))
