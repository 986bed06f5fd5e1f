"""Cluster-blocked arrays for batched mixed-model algebra."""

from __future__ import annotations

from typing import Optional

import numpy as np

from mixed_trees.schemas import RandomSpec

LOG_2PI = float(np.log(2.0 * np.pi))


def random_design(waves: np.ndarray, random: RandomSpec) -> np.ndarray:
    """Random-effects design Z: a column of ones, plus the wave index for a random slope."""
    waves = np.asarray(waves, dtype=float)
    cols = [np.ones_like(waves)]
    if random.has_slope:
        cols.append(waves)
    return np.column_stack(cols)


class ClusterBlocks:
    """Rows grouped by cluster and zero-padded to the largest cluster size.

    Padded positions hold zeros in every data block and an identity block in
    V, so batched determinants and solves are unaffected by them.
    """

    def __init__(self, groups: np.ndarray, waves: np.ndarray, Z: Optional[np.ndarray] = None) -> None:
        groups = np.asarray(groups).astype(str)
        clusters, codes = np.unique(groups, return_inverse=True)
        codes = codes.reshape(-1)
        self.clusters = tuple(str(c) for c in clusters)
        self.n = int(groups.shape[0])
        self.m = len(self.clusters)
        self.sizes = np.bincount(codes, minlength=self.m)
        self.T = int(self.sizes.max()) if self.n else 0

        order = np.argsort(codes, kind="stable")
        starts = np.concatenate([[0], np.cumsum(self.sizes)[:-1]])
        pos = np.empty(self.n, dtype=np.int64)
        pos[order] = np.arange(self.n) - starts[codes[order]]
        self.codes = codes
        self.pos = pos

        self.mask = np.zeros((self.m, self.T), dtype=bool)
        self.mask[codes, pos] = True
        W = self.block(np.asarray(waves, dtype=float))
        self._valid2 = self.mask[:, :, None] & self.mask[:, None, :]
        self._lag = np.where(self._valid2, np.abs(W[:, :, None] - W[:, None, :]), 0.0)
        self._pad = np.eye(self.T)[None, :, :] * (~self.mask)[:, :, None]
        self.Z = self.block(Z) if Z is not None else None

    def block(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        out = np.zeros((self.m, self.T) + values.shape[1:])
        out[self.codes, self.pos] = values
        return out

    def unblock(self, blocked: np.ndarray) -> np.ndarray:
        return blocked[self.codes, self.pos]

    def correlation(self, phi: float) -> np.ndarray:
        """AR(1) correlation phi^|w_s - w_t| on observed positions, zero on padding."""
        return np.where(self._valid2, np.power(phi, self._lag), 0.0)

    def covariance(self, D: np.ndarray, sigma2: float, phi: float) -> np.ndarray:
        ZDZ = np.einsum("mtq,qk,msk->mts", self.Z, D, self.Z)
        return ZDZ + sigma2 * self.correlation(phi) + self._pad

    @property
    def padding(self) -> np.ndarray:
        return self._pad


def gaussian_loglik(blocks: ClusterBlocks, resid: np.ndarray, V: np.ndarray) -> float:
    """Marginal Gaussian log-likelihood of blocked residuals under blocked covariances."""
    sign, logdet = np.linalg.slogdet(V)
    if np.any(sign <= 0):
        return float("-inf")
    solved = np.linalg.solve(V, resid[..., None])[..., 0]
    quad = float(np.einsum("mt,mt->", resid, solved))
    return -0.5 * (float(logdet.sum()) + quad + blocks.n * LOG_2PI)
