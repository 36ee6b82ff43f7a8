"""Seeded random instances, the 3-site illustrative instance, and instance JSON.

Random instances: sites uniform in a square, every site is a candidate
facility, and only pairs within the effective distance carry utility.
The draw order is fixed: site coordinates (x then y, site by site),
capacities, demands, all from the main stream; then one independent
stream per effective pair ``stream_seed(seed, i, j)`` producing Q row-major.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .model import Facility, Instance, ModelError, PairAmbiguity, Site
from .rng import Stream, Xoshiro256, stream_seed

FORMAT_VERSION = 1


@dataclass
class GenConfig:
    n_sites: int
    budget: float
    seed: int = 0
    square_side: float = 15.0
    effective_distance: float = 5.0
    capacity_range: tuple[float, float] = (100.0, 180.0)
    demand_range: tuple[int, int] = (20, 80)
    gamma_hi: float = 0.2
    gamma_lo: float = 0.0
    ellipsoid_radius: float = 0.2
    cov_mix: float = 0.3
    clip_negative_beta: bool = True
    full_matrices: bool = False
    name: str = field(default="")

    def __post_init__(self):
        if self.n_sites < 1:
            raise ModelError("n_sites must be >= 1")
        if self.budget < 0:
            raise ModelError("budget must be >= 0")
        if self.capacity_range[0] > self.capacity_range[1] or self.demand_range[0] > self.demand_range[1]:
            raise ModelError("empty capacity or demand range")


def beta_hat_row(dist_i: np.ndarray, j: int, l0: float, clip: bool = True) -> np.ndarray:
    """Mean utility coefficients of pair (i, j) given distances from site i.

    Own-location weight is 10 (1 - d_ij / L0); other open locations k add
    (1 - d_ik / L0).  With ``clip`` the latter is floored at 0 so that
    locations beyond L0 never reduce utility.
    """
    if dist_i[j] > l0:
        return np.zeros_like(dist_i)
    beta = 1.0 - dist_i / l0
    if clip:
        beta = np.maximum(beta, 0.0)
    beta[j] = 10.0 * (1.0 - dist_i[j] / l0)
    return beta


def generate(cfg: GenConfig) -> Instance:
    n = cfg.n_sites
    main = Stream(cfg.seed)
    coords = np.array([[main.uniform(0.0, cfg.square_side), main.uniform(0.0, cfg.square_side)]
                       for _ in range(n)])
    caps = [main.uniform(*cfg.capacity_range) for _ in range(n)]
    demands = [float(main.integers(*cfg.demand_range)) for _ in range(n)]

    dist = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=2)
    l0 = cfg.effective_distance
    pairs = [(i, j) for i in range(n) for j in range(n) if dist[i, j] <= l0]
    ambiguity: dict[tuple[int, int], PairAmbiguity] = {}
    if pairs:
        g = Xoshiro256([stream_seed(cfg.seed, i, j) for i, j in pairs])
        q_all = g.uniform_block(n * n)  # (n*n, n_pairs)
        for col, (i, j) in enumerate(pairs):
            q = q_all[:, col].reshape(n, n)
            cov = q.T @ q
            ambiguity[(i, j)] = PairAmbiguity(
                beta_hat=beta_hat_row(dist[i], j, l0, cfg.clip_negative_beta),
                ellipsoid_shape=np.eye(n) + cfg.cov_mix * cov,
                ellipsoid_radius=cfg.ellipsoid_radius,
                cov_hat=cov,
                gamma_lo=cfg.gamma_lo,
                gamma_hi=cfg.gamma_hi,
            )
    if cfg.full_matrices:
        for i in range(n):
            for j in range(n):
                ambiguity.setdefault((i, j), PairAmbiguity.zero(n))

    sites = [Site(i, (float(coords[i, 0]), float(coords[i, 1])), demands[i]) for i in range(n)]
    facilities = [Facility(j, sites[j].coord, float(caps[j]), 1.0) for j in range(n)]
    name = cfg.name or f"gen-n{n}-b{cfg.budget:g}-s{cfg.seed}"
    ambiguity = dict(sorted(ambiguity.items()))
    return Instance(sites, facilities, float(cfg.budget), np.zeros(n), ambiguity, name)


BETA_2_4 = np.array([
    [[8.5, 0.2, 0.4], [0.1, 8.0, 0.3], [0.2, 0.1, 7.3]],
    [[8.2, 0.0, 0.2], [0.1, 8.2, 0.3], [0.2, 0.0, 7.4]],
    [[8.3, 0.1, 0.2], [0.0, 8.1, 0.1], [0.1, 0.0, 7.5]],
])
DEMANDS_2_4 = (20.0, 30.0, 25.0)
RADII_2_4 = {"base": (0.0, 0.0, 0.0), "est1": (1.41, 1.27, 2.69), "est2": (1.41, 0.99, 2.55)}


def illustrative_2_4(which: str = "est1") -> Instance:
    """The three-site example: one facility may open, capacity is unlimited.

    ``base`` has no ambiguity; its ellipsoid matrix is set to the identity
    (the radius is zero, so the matrix is irrelevant but must be invertible).
    """
    if which not in RADII_2_4:
        raise ValueError(f"unknown case {which!r}; choose from {sorted(RADII_2_4)}")
    scale = 0.0 if which == "base" else 2.0
    shape = np.eye(3) if which == "base" else scale * np.eye(3)
    total = sum(DEMANDS_2_4)
    sites = [Site(i, (float(i), 0.0), DEMANDS_2_4[i]) for i in range(3)]
    facilities = [Facility(j, (float(j), 0.0), total, 1.0) for j in range(3)]
    ambiguity = {
        (i, j): PairAmbiguity(
            beta_hat=BETA_2_4[i, j],
            ellipsoid_shape=shape,
            ellipsoid_radius=RADII_2_4[which][j],
            cov_hat=scale * np.eye(3),
            gamma_lo=0.0,
            gamma_hi=scale,
        )
        for i in range(3) for j in range(3)
    }
    return Instance(sites, facilities, 1.0, np.zeros(3), ambiguity, f"example-2-4-{which}")


# --- JSON ------------------------------------------------------------------

def _matrix_to_json(mat: np.ndarray) -> dict:
    if np.count_nonzero(mat - np.diag(np.diag(mat))) == 0:
        return {"diag": np.diag(mat).tolist()}
    return {"dense": mat.tolist()}


def _matrix_from_json(obj, n: int) -> np.ndarray:
    if "diag" in obj:
        diag = np.asarray(obj["diag"], dtype=float)
        if diag.size != n:
            raise ModelError(f"diag of length {diag.size}, expected {n}")
        return np.diag(diag)
    if "dense" in obj:
        mat = np.asarray(obj["dense"], dtype=float)
        if mat.shape != (n, n):
            raise ModelError(f"dense matrix of shape {mat.shape}, expected {(n, n)}")
        return mat
    raise ModelError("matrix must be given as {'dense': ...} or {'diag': ...}")


def instance_to_dict(inst: Instance) -> dict:
    return {
        "format": FORMAT_VERSION,
        "name": inst.name,
        "budget": inst.budget,
        "sites": [{"id": s.id, "x": s.coord[0], "y": s.coord[1], "demand": s.demand}
                  for s in inst.sites],
        "facilities": [{"id": f.id, "site_id": f.id, "x": f.coord[0], "y": f.coord[1],
                        "capacity": f.capacity, "open_cost": f.open_cost,
                        "fixed_gain": float(inst.fixed_gains[k])}
                       for k, f in enumerate(inst.facilities)],
        "pairs": [{"i": i, "j": j, "beta_hat": p.beta_hat.tolist(),
                   "A": _matrix_to_json(p.ellipsoid_shape), "b": p.ellipsoid_radius,
                   "sigma_hat": _matrix_to_json(p.cov_hat),
                   "gamma1": p.gamma_lo, "gamma2": p.gamma_hi}
                  for (i, j), p in inst.ambiguity.items()],
    }


def instance_from_dict(data: dict) -> Instance:
    if data.get("format", FORMAT_VERSION) != FORMAT_VERSION:
        raise ModelError(f"unsupported instance format {data.get('format')}")
    sites = [Site(int(s["id"]), (float(s.get("x", 0.0)), float(s.get("y", 0.0))), float(s["demand"]))
             for s in data["sites"]]
    by_id = {s.id: s for s in sites}
    facilities = []
    gains = []
    for f in data["facilities"]:
        if "x" in f:
            coord = (float(f["x"]), float(f.get("y", 0.0)))
        elif "site_id" in f and f["site_id"] in by_id:
            coord = by_id[f["site_id"]].coord
        else:
            coord = (0.0, 0.0)
        facilities.append(Facility(int(f["id"]), coord, float(f["capacity"]),
                                   float(f.get("open_cost", 1.0))))
        gains.append(float(f.get("fixed_gain", 0.0)))
    site_pos = {s.id: k for k, s in enumerate(sites)}
    fac_pos = {f.id: k for k, f in enumerate(facilities)}
    n = len(facilities)
    ambiguity = {}
    for p in data.get("pairs", []):
        key = (site_pos[p["i"]], fac_pos[p["j"]])
        ambiguity[key] = PairAmbiguity(
            beta_hat=np.asarray(p["beta_hat"], dtype=float),
            ellipsoid_shape=_matrix_from_json(p["A"], n),
            ellipsoid_radius=float(p["b"]),
            cov_hat=_matrix_from_json(p["sigma_hat"], n),
            gamma_lo=float(p.get("gamma1", 0.0)),
            gamma_hi=float(p["gamma2"]),
        )
    return Instance(sites, facilities, float(data["budget"]), np.asarray(gains), ambiguity,
                    str(data.get("name", "instance")))


def dumps(inst: Instance) -> str:
    return json.dumps(instance_to_dict(inst), separators=(",", ":"))


def save_instance(inst: Instance, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps(inst))


def load_instance(path: Union[str, Path]) -> Instance:
    return instance_from_dict(json.loads(Path(path).read_text()))


def config_dict(cfg: GenConfig) -> dict:
    return asdict(cfg)
