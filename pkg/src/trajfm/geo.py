"""Coordinate projection, region normalization and great-circle distance.

UTM is computed with the 6th-order Krüger series on the WGS84 ellipsoid.
All functions accept scalars or numpy arrays for the coordinate arguments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

WGS84_A = 6378137.0
WGS84_F = 1 / 298.257223563
K0 = 0.9996
FALSE_EASTING = 500000.0
FALSE_NORTHING_SOUTH = 10000000.0
EARTH_RADIUS_M = 6371000.0

_N = WGS84_F / (2 - WGS84_F)
_E = math.sqrt(WGS84_F * (2 - WGS84_F))
_A = WGS84_A / (1 + _N) * (1 + _N**2 / 4 + _N**4 / 64 + _N**6 / 256)


def _series(n):
    n2, n3, n4, n5, n6 = n**2, n**3, n**4, n**5, n**6
    alpha = (
        n / 2 - 2 * n2 / 3 + 5 * n3 / 16 + 41 * n4 / 180 - 127 * n5 / 288 + 7891 * n6 / 37800,
        13 * n2 / 48 - 3 * n3 / 5 + 557 * n4 / 1440 + 281 * n5 / 630 - 1983433 * n6 / 1935360,
        61 * n3 / 240 - 103 * n4 / 140 + 15061 * n5 / 26880 + 167603 * n6 / 181440,
        49561 * n4 / 161280 - 179 * n5 / 168 + 6601661 * n6 / 7257600,
        34729 * n5 / 80640 - 3418889 * n6 / 1995840,
        212378941 * n6 / 319334400,
    )
    beta = (
        n / 2 - 2 * n2 / 3 + 37 * n3 / 96 - n4 / 360 - 81 * n5 / 512 + 96199 * n6 / 604800,
        n2 / 48 + n3 / 15 - 437 * n4 / 1440 + 46 * n5 / 105 - 1118711 * n6 / 3870720,
        17 * n3 / 480 - 37 * n4 / 840 - 209 * n5 / 4480 + 5569 * n6 / 90720,
        4397 * n4 / 161280 - 11 * n5 / 504 - 830251 * n6 / 7257600,
        4583 * n5 / 161280 - 108847 * n6 / 3991680,
        20648693 * n6 / 638668800,
    )
    return alpha, beta


_ALPHA, _BETA = _series(_N)


class GeoError(ValueError):
    pass


@dataclass(frozen=True)
class LngLat:
    lng: float
    lat: float

    def __post_init__(self):
        if not (math.isfinite(self.lng) and math.isfinite(self.lat)):
            raise GeoError(f"non-finite coordinate ({self.lng}, {self.lat})")
        if not -180.0 <= self.lng <= 180.0:
            raise GeoError(f"longitude {self.lng} outside [-180, 180]")
        if not -90.0 <= self.lat <= 90.0:
            raise GeoError(f"latitude {self.lat} outside [-90, 90]")


@dataclass(frozen=True)
class UtmCoord:
    easting: float
    northing: float
    zone: int
    north: bool = True


@dataclass(frozen=True)
class RegionConfig:
    center: LngLat
    scale_x: float = 4000.0
    scale_y: float = 4000.0

    def __post_init__(self):
        if not (self.scale_x > 0 and self.scale_y > 0):
            raise GeoError("region scales must be positive")

    @property
    def zone(self) -> int:
        return zone_of(self.center.lng)

    @property
    def north(self) -> bool:
        return self.center.lat >= 0

    @property
    def center_utm(self) -> UtmCoord:
        return utm_project(self.center)


@dataclass(frozen=True)
class NormXY:
    x: float
    y: float


def zone_of(lng: float) -> int:
    return min(int((lng + 180.0) // 6.0) + 1, 60)


def central_meridian(zone: int) -> float:
    return (zone - 1) * 6.0 - 180.0 + 3.0


def utm_forward(lng, lat, zone: int, north: bool = True):
    """Project WGS84 degrees to (easting, northing) in a given zone.

    Unlike :func:`utm_project` the zone is forced, so points just across a
    zone boundary land in the same planar frame as their region.
    """
    lng = np.asarray(lng, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    if np.any((lat < -80.0) | (lat > 84.0)):
        raise GeoError("latitude outside the UTM domain [-80, 84]")
    phi = np.radians(lat)
    lam = np.radians(lng - central_meridian(zone))
    lam = (lam + np.pi) % (2 * np.pi) - np.pi

    sin_phi = np.sin(phi)
    tau_conf = np.sinh(np.arctanh(sin_phi) - _E * np.arctanh(_E * sin_phi))
    xi_p = np.arctan2(tau_conf, np.cos(lam))
    eta_p = np.arctanh(np.sin(lam) / np.sqrt(1 + tau_conf**2))

    xi, eta = xi_p.copy(), eta_p.copy()
    for j, a in enumerate(_ALPHA, start=1):
        xi = xi + a * np.sin(2 * j * xi_p) * np.cosh(2 * j * eta_p)
        eta = eta + a * np.cos(2 * j * xi_p) * np.sinh(2 * j * eta_p)

    easting = FALSE_EASTING + K0 * _A * eta
    northing = K0 * _A * xi
    if not north:
        northing = northing + FALSE_NORTHING_SOUTH
    return easting, northing


def utm_inverse(easting, northing, zone: int, north: bool = True):
    easting = np.asarray(easting, dtype=np.float64)
    northing = np.asarray(northing, dtype=np.float64)
    if not north:
        northing = northing - FALSE_NORTHING_SOUTH
    xi = northing / (K0 * _A)
    eta = (easting - FALSE_EASTING) / (K0 * _A)

    xi_p, eta_p = xi.copy(), eta.copy()
    for j, b in enumerate(_BETA, start=1):
        xi_p = xi_p - b * np.sin(2 * j * xi) * np.cosh(2 * j * eta)
        eta_p = eta_p - b * np.cos(2 * j * xi) * np.sinh(2 * j * eta)

    tau_p = np.sin(xi_p) / np.sqrt(np.sinh(eta_p) ** 2 + np.cos(xi_p) ** 2)
    lam = np.arctan2(np.sinh(eta_p), np.cos(xi_p))

    # Newton iteration for geographic tan(lat) from conformal tan(lat)
    e2 = _E * _E
    tau = tau_p.copy()
    for _ in range(6):
        sigma = np.sinh(_E * np.arctanh(_E * tau / np.sqrt(1 + tau**2)))
        tau_i = tau * np.sqrt(1 + sigma**2) - sigma * np.sqrt(1 + tau**2)
        d_tau = (
            (tau_p - tau_i)
            / np.sqrt(1 + tau_i**2)
            * (1 + (1 - e2) * tau**2)
            / ((1 - e2) * np.sqrt(1 + tau**2))
        )
        tau = tau + d_tau

    lat = np.degrees(np.arctan(tau))
    lng = np.degrees(lam) + central_meridian(zone)
    lng = (lng + 180.0) % 360.0 - 180.0
    return lng, lat


def utm_project(p: LngLat, zone: int | None = None) -> UtmCoord:
    """Standard UTM projection of a single point.

    The zone follows from the longitude unless ``zone`` is given.
    """
    if not -80.0 <= p.lat <= 84.0:
        raise GeoError(f"latitude {p.lat} outside the UTM domain [-80, 84]")
    z = zone_of(p.lng) if zone is None else zone
    north = p.lat >= 0
    e, n = utm_forward(p.lng, p.lat, z, north)
    return UtmCoord(float(e), float(n), z, north)


def utm_invert(c: UtmCoord) -> LngLat:
    if not 1 <= c.zone <= 60:
        raise GeoError(f"UTM zone {c.zone} outside 1..60")
    if not 100000.0 <= c.easting <= 900000.0:
        raise GeoError(f"easting {c.easting} outside [100000, 900000]")
    if not 0.0 <= c.northing <= FALSE_NORTHING_SOUTH:
        raise GeoError(f"northing {c.northing} outside [0, 10000000]")
    lng, lat = utm_inverse(c.easting, c.northing, c.zone, c.north)
    return LngLat(float(lng), float(lat))


def normalize_xy(c: UtmCoord, r: RegionConfig) -> NormXY:
    center = r.center_utm
    if c.zone != center.zone or c.north != center.north:
        raise GeoError(
            f"coordinate in zone {c.zone}{'N' if c.north else 'S'} but region is "
            f"{center.zone}{'N' if center.north else 'S'}; project with the region zone"
        )
    return NormXY(
        (c.easting - center.easting) / r.scale_x,
        (c.northing - center.northing) / r.scale_y,
    )


def denormalize_xy(n: NormXY, r: RegionConfig) -> UtmCoord:
    center = r.center_utm
    return UtmCoord(
        center.easting + n.x * r.scale_x,
        center.northing + n.y * r.scale_y,
        center.zone,
        center.north,
    )


def lnglat_to_norm(lng, lat, r: RegionConfig):
    """Vectorized projection of raw degrees into the region's normalized frame."""
    center = r.center_utm
    e, n = utm_forward(lng, lat, center.zone, center.north)
    return (e - center.easting) / r.scale_x, (n - center.northing) / r.scale_y


def norm_to_lnglat(x, y, r: RegionConfig):
    center = r.center_utm
    e = center.easting + np.asarray(x, dtype=np.float64) * r.scale_x
    n = center.northing + np.asarray(y, dtype=np.float64) * r.scale_y
    return utm_inverse(e, n, center.zone, center.north)


def project_point(p: LngLat, r: RegionConfig) -> NormXY:
    """Forced-zone projection followed by normalization."""
    return normalize_xy(utm_project(p, zone=r.zone), r)


def unproject_point(n: NormXY, r: RegionConfig) -> LngLat:
    lng, lat = norm_to_lnglat(n.x, n.y, r)
    return LngLat(float(lng), float(np.clip(lat, -90.0, 90.0)))


def haversine_m(a: LngLat, b: LngLat) -> float:
    return float(haversine_np(a.lng, a.lat, b.lng, b.lat))


def haversine_np(lng1, lat1, lng2, lat2):
    lng1, lat1, lng2, lat2 = (np.radians(np.asarray(v, dtype=np.float64)) for v in (lng1, lat1, lng2, lat2))
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lng2 - lng1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
