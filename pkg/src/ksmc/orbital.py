"""Keplerian motion on an ellipse expressed through the true anomaly.

The spacecraft dynamics used by the automata layer is the first-order ODE

    dv/dt = 2*pi*a**3 / (T*b**3) * (1 + e*cos(v))**2

which follows from Kepler's first and second laws. Anomalies handled here are
unwrapped (monotonically increasing); wrapping to [0, 2*pi) is done by the
models that consume them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

from ksmc.errors import DomainError

TWO_PI = 2.0 * math.pi

# Comparisons of the form "anomaly reached 2*pi" use this absolute slack (rad).
ANGLE_TOL = 1e-9


@dataclass(frozen=True)
class Orbit:
    """Ellipse geometry plus revolution period.

    ``b`` and ``p`` are derived at construction; build instances with
    :func:`make_orbit` rather than calling the constructor directly.
    """

    a: float
    e: float
    T: float
    b: float = field(init=False)
    p: float = field(init=False)

    def __post_init__(self) -> None:
        if not (self.a > 0 and math.isfinite(self.a)):
            raise DomainError(f"semi-major axis must be positive, got {self.a}")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise DomainError(f"period must be positive, got {self.T}")
        if not 0 <= self.e < 1:
            raise DomainError(f"eccentricity must lie in [0, 1), got {self.e} (open conics unsupported)")
        b = self.a * math.sqrt(1.0 - self.e * self.e)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "p", b * b / self.a)

    @property
    def periapsis(self) -> float:
        return self.a * (1.0 - self.e)

    @property
    def apoapsis(self) -> float:
        return self.a * (1.0 + self.e)


def make_orbit(a: float, e: float, T: float) -> Orbit:
    return Orbit(float(a), float(e), float(T))


def eccentricity_from_axes(a: float, b: float) -> float:
    """Eccentricity from the two semi-axes, ``sqrt(a**2 - b**2) / a``."""
    if not (0 < b <= a):
        raise DomainError(f"need 0 < b <= a, got a={a}, b={b}")
    return math.sqrt(max(a * a - b * b, 0.0)) / a


def radius(orbit: Orbit, v: float) -> float:
    return orbit.p / (1.0 + orbit.e * math.cos(v))


def areal_constant(orbit: Orbit) -> float:
    """Twice the areal velocity, ``2*pi*a*b/T``; equals ``radius(v)**2 * dv/dt``."""
    return TWO_PI * orbit.a * orbit.b / orbit.T


def rate_function(orbit: Orbit) -> Callable[[float], float]:
    """Return ``v -> dv/dt`` for ``orbit`` with the constant prefactor folded in."""
    k = TWO_PI * orbit.a ** 3 / (orbit.T * orbit.b ** 3)
    e = orbit.e
    cos = math.cos

    def rate(v: float) -> float:
        q = 1.0 + e * cos(v)
        return k * q * q

    return rate


def anomaly_rate(orbit: Orbit, v: float) -> float:
    return rate_function(orbit)(v)


def propagate(orbit: Orbit, v0: float, dt: float, step: float | None = None) -> float:
    """Integrate the anomaly ODE from ``v0`` over ``dt`` with classical RK4.

    Uses fixed steps of ``step`` (default ``T * 1e-4``) and one final partial
    step, so the grid matches the one used by network flows.
    """
    if dt < 0:
        raise DomainError(f"dt must be nonnegative, got {dt}")
    if step is None:
        step = orbit.T * 1e-4
    if step <= 0:
        raise DomainError(f"step must be positive, got {step}")
    f = rate_function(orbit)
    v = float(v0)
    n_full = int(dt // step)
    for _ in range(n_full):
        v = _rk4(f, v, step)
    rest = dt - n_full * step
    if rest > 0:
        v = _rk4(f, v, rest)
    return v


def _rk4(f: Callable[[float], float], v: float, h: float) -> float:
    k1 = f(v)
    k2 = f(v + 0.5 * h * k1)
    k3 = f(v + 0.5 * h * k2)
    k4 = f(v + h * k3)
    return v + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# --- closed-form oracle -----------------------------------------------------

def _revolutions(v: float) -> tuple[int, float]:
    n = round(v / TWO_PI)
    return n, v - n * TWO_PI


def eccentric_anomaly(orbit: Orbit, v: float) -> float:
    """Unwrapped eccentric anomaly for an unwrapped true anomaly."""
    n, vr = _revolutions(v)
    half = 0.5 * vr
    E = 2.0 * math.atan2(math.sqrt(1.0 - orbit.e) * math.sin(half),
                         math.sqrt(1.0 + orbit.e) * math.cos(half))
    return E + n * TWO_PI


def mean_anomaly(orbit: Orbit, v: float) -> float:
    E = eccentric_anomaly(orbit, v)
    return E - orbit.e * math.sin(E)


def time_to_anomaly(orbit: Orbit, v0: float, v_target: float) -> float:
    """Exact time to move from ``v0`` to ``v_target`` (both unwrapped)."""
    if v_target < v0:
        raise DomainError(f"v_target ({v_target}) precedes v0 ({v0})")
    dM = mean_anomaly(orbit, v_target) - mean_anomaly(orbit, v0)
    return orbit.T * dM / TWO_PI


def solve_kepler(M: float, e: float, tol: float = 1e-15) -> float:
    """Eccentric anomaly E with ``E - e*sin(E) = M`` by safeguarded Newton."""
    n, Mr = _revolutions(M)
    E = Mr if e < 0.8 else math.copysign(math.pi, Mr) if Mr != 0 else 0.0
    for _ in range(60):
        f = E - e * math.sin(E) - Mr
        dE = f / (1.0 - e * math.cos(E))
        E -= dE
        if abs(dE) <= tol:
            break
    return E + n * TWO_PI


def anomaly_at_time(orbit: Orbit, v0: float, dt: float) -> float:
    """Closed-form true anomaly after ``dt``; inverse of :func:`time_to_anomaly`."""
    M = mean_anomaly(orbit, v0) + TWO_PI * dt / orbit.T
    E = solve_kepler(M, orbit.e)
    n, Er = _revolutions(E)
    half = 0.5 * Er
    v = 2.0 * math.atan2(math.sqrt(1.0 + orbit.e) * math.sin(half),
                         math.sqrt(1.0 - orbit.e) * math.cos(half))
    # roundoff must not move the anomaly backwards
    return max(v + n * TWO_PI, v0)
