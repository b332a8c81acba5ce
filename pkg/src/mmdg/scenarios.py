"""Registry of the benchmark problems.

Every bottom and initial-state function takes physical points of shape
(..., d) and returns arrays of shape (...).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError
from .swe import G


# ------------------------------------------------------------- bottoms
def flat(x):
    return np.zeros(x.shape[:-1])


def gaussian_hump(x):
    return 5.0 * np.exp(-0.4 * (x[..., 0] - 5.0) ** 2)


def tall_hump(x):
    return 10.0 * np.exp(-0.4 * (x[..., 0] - 5.0) ** 2)


def step_block(x):
    s = x[..., 0]
    return np.where((s > 4.0) & (s < 8.0), 4.0, 0.0)


def cosine_bump(x, amp=0.25):
    s = x[..., 0]
    return np.where((s > 1.4) & (s < 1.6), amp * (np.cos(10.0 * np.pi * (s - 1.5)) + 1.0), 0.0)


def tall_cosine_bump(x):
    return cosine_bump(x, 0.5)


def wavy(x):
    s = x[..., 0]
    return np.where((s >= 0.0) & (s <= 2.0), 0.3 * np.cos(0.5 * np.pi * (s - 1.0)) ** 30, 0.0)


def riemann_step(x):
    return np.where(x[..., 0] > 0.0, 1.0, 0.0)


def sine_squared(x):
    return np.sin(np.pi * x[..., 0]) ** 2


def hump_2d(x):
    return 0.8 * np.exp(-50.0 * ((x[..., 0] - 0.5) ** 2 + (x[..., 1] - 0.5) ** 2))


def elliptic_hump(x):
    return 0.8 * np.exp(-5.0 * (x[..., 0] - 0.9) ** 2 - 50.0 * (x[..., 1] - 0.5) ** 2)


@dataclass(frozen=True)
class Scenario:
    name: str
    description: str
    dim: int
    domain: tuple  # ((lo, hi),) or ((x0, x1), (y0, y1))
    bottom: Callable
    depth: Callable  # initial h
    velocity: tuple  # initial (u[, v]) callables
    boundary: str
    T: float
    n: int  # 1D: elements; 2D: cells along y (x gets the aspect-ratio multiple)
    degree: int = 2
    M_tvb: float = 0.0
    C_cfl: Optional[float] = None
    mesh_mode: str = "moving"
    monitor: str = "equilibrium+depth"
    b_update: str = "dg-interp"
    still_level: Optional[float] = None  # lake level C for well-balance ledgers
    g: float = G
    dt_max: float = np.inf
    extras: dict = field(default_factory=dict)

    def with_(self, **kw):
        return replace(self, **kw)

    def initial(self, x):
        """Initial (h, m[, w]) at points x."""
        h = self.depth(x)
        out = [h] + [h * v(x) for v in self.velocity]
        return out


def _const(c):
    return lambda x: np.full(x.shape[:-1], float(c))


def _lake(level, bottom):
    return lambda x: level - bottom(x)


def _pulse(bottom, eps, lo=1.1, hi=1.2):
    def h(x):
        s = x[..., 0]
        return 1.0 - bottom(x) + np.where((s >= lo) & (s <= hi), eps, 0.0)

    return h


def _riemann_h(x):
    return np.where(x[..., 0] <= 0.0, 4.0, 1.0)


def _riemann_u(x):
    return np.where(x[..., 0] <= 0.0, 5.0, -0.9)


def _dam_h(bottom):
    return lambda x: np.where(x[..., 0] < 1.0, 2.0, 0.35) - bottom(x)


def _dam_u(x):
    return np.where(x[..., 0] < 1.0, 1.0, 0.0)


def _acc_h(x):
    return 5.0 + np.exp(np.cos(2.0 * np.pi * x[..., 0]))


def _acc_u(x):
    return np.sin(np.cos(2.0 * np.pi * x[..., 0])) / _acc_h(x)


def _perturb2d_h(x):
    s = x[..., 0]
    return 1.0 - elliptic_hump(x) + np.where((s > 0.05) & (s < 0.15), 0.01, 0.0)


SCENARIOS = {}


def register(s):
    SCENARIOS[s.name] = s
    return s


register(Scenario("acc1d", "smooth periodic flow over a sinusoidal hump (accuracy)", 1, ((0.0, 1.0),),
                  sine_squared, _acc_h, (_acc_u,), "periodic", 0.1, 40, M_tvb=40.0, mesh_mode="fixed"))
register(Scenario("wb1d-smooth", "lake at rest over a Gaussian hump", 1, ((0.0, 10.0),),
                  gaussian_hump, _lake(10.0, gaussian_hump), (_const(0.0),), "reflective", 0.5, 50,
                  degree=1, still_level=10.0))
register(Scenario("wb1d-step", "lake at rest over a rectangular step", 1, ((0.0, 10.0),),
                  step_block, _lake(10.0, step_block), (_const(0.0),), "reflective", 0.5, 50,
                  degree=1, still_level=10.0))
register(Scenario("wb1d-dry", "lake at rest over a hump touching the surface", 1, ((0.0, 10.0),),
                  tall_hump, _lake(10.0, tall_hump), (_const(0.0),), "reflective", 0.5, 50,
                  degree=1, still_level=10.0))
register(Scenario("perturb1d-small", "small pulse over a cosine bump", 1, ((0.0, 2.0),),
                  cosine_bump, _pulse(cosine_bump, 1e-5), (_const(0.0),), "transmissive", 0.2, 160,
                  extras={"eps": 1e-5}))
register(Scenario("perturb1d-big", "large pulse over a cosine bump", 1, ((0.0, 2.0),),
                  cosine_bump, _pulse(cosine_bump, 0.2), (_const(0.0),), "transmissive", 0.2, 160,
                  extras={"eps": 0.2}))
register(Scenario("perturb1d-dry", "small pulse over a bump with a dry top", 1, ((0.0, 2.0),),
                  tall_cosine_bump, _pulse(tall_cosine_bump, 1e-5), (_const(0.0),), "transmissive", 0.2, 160,
                  extras={"eps": 1e-5}))
register(Scenario("riemann-step", "Riemann problem over a step bottom", 1, ((-10.0, 10.0),),
                  riemann_step, _riemann_h, (_riemann_u,), "transmissive", 1.0, 100))
register(Scenario("dam-flat", "rarefaction and shock over a flat bottom", 1, ((-10.0, 10.0),),
                  flat, _dam_h(flat), (_dam_u,), "transmissive", 1.0, 100))
register(Scenario("dam-wavy", "rarefaction and shocks over a wavy bottom", 1, ((-10.0, 10.0),),
                  wavy, _dam_h(wavy), (_dam_u,), "transmissive", 1.0, 160))
register(Scenario("wb2d", "2D lake at rest over a round hump", 2, ((0.0, 1.0), (0.0, 1.0)),
                  hump_2d, _lake(1.0, hump_2d), (_const(0.0), _const(0.0)), "periodic", 0.1, 10,
                  degree=1, still_level=1.0))
register(Scenario("perturb2d", "2D small pulse over an elliptic hump", 2, ((-1.0, 2.0), (0.0, 1.0)),
                  elliptic_hump, _perturb2d_h, (_const(0.0), _const(0.0)), "reflective", 0.48, 10,
                  degree=1))


def get_scenario(name):
    try:
        return SCENARIOS[name]
    except KeyError:
        raise ConfigurationError(f"unknown scenario {name!r}; known: {', '.join(sorted(SCENARIOS))}") from None


def list_scenarios():
    return sorted(SCENARIOS)
