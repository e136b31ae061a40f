"""Parameter-block layout and unconstrained <-> constrained transforms.

Each model declares an ordered list of named blocks.  Positivity-bounded
blocks map through ``exp`` (log-Jacobian = the unconstrained coordinate),
the variance-bias factor maps through ``1 + exp`` (same Jacobian), and
unbounded blocks pass through unchanged.  The layout doubles as the draws
manifest so downstream tools can index stored draws stably.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad

TRANSFORMS = ("identity", "exp", "exp1p")


@dataclass(frozen=True)
class Block:
    name: str
    size: int
    transform: str = "identity"

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")


class ParamLayout:
    """Ordered named blocks over one flat unconstrained vector."""

    def __init__(self, blocks):
        self.blocks = tuple(blocks)
        offset = 0
        self.slices = {}
        for b in self.blocks:
            self.slices[b.name] = slice(offset, offset + b.size)
            offset += b.size
        self.dim = offset

    def constrain(self, u):
        """Constrained values per block plus the summed log-Jacobian."""
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.dim:
            raise ValueError(f"expected dimension {self.dim}, got {u.shape[-1]}")
        out = {}
        log_jac = np.zeros(u.shape[:-1])
        for b in self.blocks:
            seg = u[..., self.slices[b.name]]
            if b.transform == "identity":
                out[b.name] = seg
            elif b.transform == "exp":
                out[b.name] = np.exp(seg)
                log_jac = log_jac + seg.sum(axis=-1)
            else:
                out[b.name] = 1.0 + np.exp(seg)
                log_jac = log_jac + seg.sum(axis=-1)
        return out, log_jac

    def unconstrain(self, values):
        """Inverse of :meth:`constrain`; exact round trip away from bounds."""
        u = np.empty(self.dim)
        for b in self.blocks:
            v = np.asarray(values[b.name], dtype=float)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite values in block {b.name}")
            if b.transform == "identity":
                u[self.slices[b.name]] = v
            elif b.transform == "exp":
                if np.any(v <= 0):
                    raise ValueError(f"block {b.name} must be positive")
                u[self.slices[b.name]] = np.log(v)
            else:
                if np.any(v <= 1):
                    raise ValueError(f"block {b.name} must exceed 1")
                u[self.slices[b.name]] = np.log(v - 1.0)
        return u

    def constrain_vars(self, u_var):
        """Graph version: block Vars plus the log-Jacobian Var."""
        out = {}
        jac_terms = []
        for b in self.blocks:
            seg = u_var[self.slices[b.name]]
            if b.transform == "identity":
                out[b.name] = seg
            elif b.transform == "exp":
                out[b.name] = ad.exp(seg)
                jac_terms.append(ad.vsum(seg))
            else:
                out[b.name] = ad.exp(seg) + 1.0
                jac_terms.append(ad.vsum(seg))
        log_jac = jac_terms[0]
        for t in jac_terms[1:]:
            log_jac = log_jac + t
        return out, log_jac

    def manifest(self):
        rows = []
        for b in self.blocks:
            rows.append({
                "name": b.name, "size": b.size, "transform": b.transform,
                "offset": self.slices[b.name].start,
            })
        return rows

    def flat_names(self):
        names = []
        for b in self.blocks:
            if b.size == 1:
                names.append(b.name)
            else:
                names.extend(f"{b.name}[{i + 1}]" for i in range(b.size))
        return names
