"""Per-fit data block shared by all models.

Field names in the JSON serialization follow the fitting data contract
(``y``, ``cv2_y``, ``nResp``, ``x``, ``Emp``, ``region``, ``N_obs``,
``ind_obs``, ``y_r``, ``cv2_y_r``, ``cv2_y_nat``); index vectors are
1-based in files and 0-based in memory.  The time-series form stacks the
domain-indexed arrays month-major: T blocks of N (or R) entries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

SCHEMA_NAME = "countsae.model_input"
SCHEMA_VERSION = 1


class InputError(ValueError):
    """Raised when a data block violates the model input contract."""


@dataclass
class ModelInput:
    y: np.ndarray                 # (N*T,) direct point estimates, int, 0 at missing
    cv2_y: np.ndarray             # (N*T,) observed squared CV, 0 at missing
    n_resp: np.ndarray            # (N*T,) respondent counts, 0 at missing
    x: np.ndarray                 # (N*T, P) positive predictors
    emp: np.ndarray               # (N*T,) positive offsets
    region: np.ndarray            # (N, R) incidence matrix
    ind_obs: tuple                # per month: 0-based observed indices in 0..N-1
    y_r: np.ndarray               # (R*T,) regional estimates
    cv2_y_r: np.ndarray           # (R*T,)
    cv2_y_nat: np.ndarray         # (T,)
    n_months: int = 1

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.cv2_y = np.asarray(self.cv2_y, dtype=float)
        self.n_resp = np.asarray(self.n_resp, dtype=float)
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if self.x.shape[0] != len(self.y):
            self.x = self.x.T
        self.emp = np.asarray(self.emp, dtype=float)
        self.region = np.asarray(self.region, dtype=float)
        self.ind_obs = tuple(np.asarray(ix, dtype=np.int64) for ix in self.ind_obs)
        self.y_r = np.asarray(self.y_r, dtype=np.int64)
        self.cv2_y_r = np.asarray(self.cv2_y_r, dtype=float)
        self.cv2_y_nat = np.atleast_1d(np.asarray(self.cv2_y_nat, dtype=float))

    # shape accessors --------------------------------------------------------

    @property
    def n_domains(self):
        return self.region.shape[0]

    @property
    def n_regions(self):
        return self.region.shape[1]

    @property
    def n_pred(self):
        return self.x.shape[1]

    @property
    def is_mv(self):
        return self.n_months > 1

    @property
    def ind_miss(self):
        n = self.n_domains
        return tuple(np.setdiff1d(np.arange(n), ix) for ix in self.ind_obs)

    @property
    def ind_cum_obs(self):
        """Observed indices mapped into the stacked 0..N*T-1 range."""
        n = self.n_domains
        return np.concatenate(
            [ix + t * n for t, ix in enumerate(self.ind_obs)]) if self.ind_obs else np.array([], dtype=np.int64)

    # derived blocks mirroring the transformed-data computations -------------

    @property
    def n_resp_r(self):
        """Regional respondent counts, (R*T,), summed from domain counts."""
        n = self.n_domains
        per_month = [self.n_resp[t * n:(t + 1) * n] @ self.region
                     for t in range(self.n_months)]
        return np.concatenate(per_month)

    @property
    def n_resp_nat(self):
        return self.n_resp_r.reshape(self.n_months, self.n_regions).sum(axis=1)

    @property
    def y_nat(self):
        return self.y_r.reshape(self.n_months, self.n_regions).sum(axis=1)

    def validate(self):
        n, r, t = self.n_domains, self.n_regions, self.n_months
        if len(self.y) != n * t or len(self.emp) != n * t or len(self.n_resp) != n * t:
            raise InputError("stacked arrays must have length N*T")
        if self.x.shape != (n * t, self.n_pred):
            raise InputError("x must be (N*T, P)")
        if np.any(self.emp <= 0):
            raise InputError("offsets (Emp) must be strictly positive")
        if np.any(self.x <= 0):
            raise InputError("predictors must be strictly positive (logged internally)")
        if not np.allclose(self.region.sum(axis=1), 1.0):
            raise InputError("each domain must belong to exactly one region")
        if len(self.ind_obs) != t:
            raise InputError("need one observed-index set per month")
        if len(self.y_r) != r * t or len(self.cv2_y_r) != r * t or len(self.cv2_y_nat) != t:
            raise InputError("regional/national arrays must match R*T / T")
        for month, ix in enumerate(self.ind_obs):
            if len(ix) and (ix.min() < 0 or ix.max() >= n):
                raise InputError(f"observed indices out of range in month {month + 1}")
            if len(np.unique(ix)) != len(ix):
                raise InputError(f"duplicate observed indices in month {month + 1}")
        obs = self.ind_cum_obs
        if np.any(self.cv2_y[obs] <= 0):
            raise InputError("observed cv2 must be strictly positive")
        if np.any(self.cv2_y < 0):
            raise InputError("cv2 must be non-negative")
        if np.any(self.n_resp[obs] < 1):
            raise InputError("observed domains need at least one respondent")
        if np.any(self.cv2_y_r <= 0) or np.any(self.cv2_y_nat <= 0):
            raise InputError("regional/national cv2 must be strictly positive")
        if np.any(self.y < 0) or np.any(self.y_r < 0):
            raise InputError("count estimates must be non-negative")
        return self


def to_json_dict(data: ModelInput) -> dict:
    """Serialize to the file schema (1-based indices)."""
    data.validate()
    n, t = data.n_domains, data.n_months
    doc = {
        "schema": SCHEMA_NAME,
        "schema_version": SCHEMA_VERSION,
        "form": "mv" if data.is_mv else "cs",
        "N": n,
        "y": data.y.tolist(),
        "cv2_y": data.cv2_y.tolist(),
        "nResp": data.n_resp.tolist(),
        "P": data.n_pred,
        "x": data.x.tolist(),
        "Emp": data.emp.tolist(),
        "R": data.n_regions,
        "region": data.region.tolist(),
        "y_r": data.y_r.tolist(),
        "cv2_y_r": data.cv2_y_r.tolist(),
    }
    if data.is_mv:
        doc["T"] = t
        doc["N_obs"] = [len(ix) for ix in data.ind_obs]
        doc["ind_obs"] = np.concatenate(
            [ix + 1 for ix in data.ind_obs]).tolist() if any(len(ix) for ix in data.ind_obs) else []
        doc["cv2_y_nat"] = data.cv2_y_nat.tolist()
    else:
        obs, miss = data.ind_obs[0], data.ind_miss[0]
        doc["N_obs"] = len(obs)
        doc["N_miss"] = len(miss)
        doc["ind_obs"] = (obs + 1).tolist()
        doc["ind_miss"] = (miss + 1).tolist()
        doc["cv2_y_nat"] = float(data.cv2_y_nat[0])
    return doc


def from_json_dict(doc: dict) -> ModelInput:
    if doc.get("schema") != SCHEMA_NAME:
        raise InputError(f"not a {SCHEMA_NAME} document")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise InputError(
            f"schema version {doc.get('schema_version')} unsupported "
            f"(expected {SCHEMA_VERSION})")
    form = doc.get("form", "cs")
    if form == "mv":
        t = int(doc["T"])
        n_obs = list(doc["N_obs"])
        flat = np.asarray(doc["ind_obs"], dtype=np.int64) - 1
        bounds = np.cumsum([0] + n_obs)
        ind_obs = tuple(flat[bounds[i]:bounds[i + 1]] for i in range(t))
        cv2_nat = doc["cv2_y_nat"]
    else:
        t = 1
        ind_obs = (np.asarray(doc["ind_obs"], dtype=np.int64) - 1,)
        cv2_nat = [doc["cv2_y_nat"]]
    data = ModelInput(
        y=doc["y"], cv2_y=doc["cv2_y"], n_resp=doc["nResp"], x=doc["x"],
        emp=doc["Emp"], region=doc["region"], ind_obs=ind_obs,
        y_r=doc["y_r"], cv2_y_r=doc["cv2_y_r"], cv2_y_nat=cv2_nat,
        n_months=t)
    return data.validate()


def save_json(data: ModelInput, path):
    with open(path, "w") as fh:
        json.dump(to_json_dict(data), fh)


def load_json(path) -> ModelInput:
    with open(path) as fh:
        return from_json_dict(json.load(fh))
