"""Face detection linking: pairwise affinities and two-threshold chaining.

Affinities combine location, size and appearance into a product score in
[0, 1].  Linking sweeps frames in order and extends open chains with the
two-threshold rule: a pair must score at least ``theta_high`` and beat its
best competitor (any candidate pair sharing an endpoint) by ``theta_margin``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .model import Detection, LinkingConfig, Tracklet, ValidationError, _require


def location_affinity(a: Detection, b: Detection, sigma_loc: float = 1.0) -> float:
    """Gaussian center-distance affinity, scaled by the mean box diagonal."""
    _require(sigma_loc > 0, "sigma_loc must be > 0")
    ax, ay = a.bbox.center
    bx, by = b.bbox.center
    d2 = (ax - bx) ** 2 + (ay - by) ** 2
    scale = (a.bbox.diagonal + b.bbox.diagonal) / 2.0
    return math.exp(-d2 / (sigma_loc * sigma_loc * scale * scale))

def size_affinity(a: Detection, b: Detection) -> float:
    """Width/height ratio affinity: 1 for equal boxes, toward 0 as they diverge."""
    rw = min(a.bbox.w, b.bbox.w) / max(a.bbox.w, b.bbox.w)
    rh = min(a.bbox.h, b.bbox.h) / max(a.bbox.h, b.bbox.h)
    return rw * rh

def appearance_affinity(a: Detection, b: Detection) -> float:
    """Cosine similarity of unit embeddings mapped to [0, 1]."""
    dot = float(np.dot(a.embedding, b.embedding))
    return min(1.0, max(0.0, (1.0 + dot) / 2.0))


def link_affinity(a: Detection, b: Detection, cfg: LinkingConfig = LinkingConfig()) -> float:
    """Combined linking score for detections in increasing frame order."""
    if b.frame <= a.frame:
        raise ValidationError(
            f"link_affinity requires a.frame < b.frame, got {a.frame} >= {b.frame}")
    if b.frame - a.frame > cfg.max_gap:
        raise ValidationError(
            f"frame gap {b.frame - a.frame} exceeds max_gap {cfg.max_gap}")
    return (location_affinity(a, b, cfg.sigma_loc)
            * size_affinity(a, b)
            * appearance_affinity(a, b))


def aggregate_embeddings(embeddings: np.ndarray) -> np.ndarray:
    """Mean of unit embeddings, renormalized to unit length.

    Raises if the members cancel out (degenerate tracklet).
    """
    arr = np.asarray(embeddings, dtype=np.float64)
    _require(arr.ndim == 2 and arr.shape[0] >= 1, "need a (n, d) embedding matrix")
    mean = arr.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm <= 1e-12:
        raise ValidationError("degenerate tracklet: member embeddings cancel out")
    return mean / norm


@dataclass
class _Chain:
    """An open chain during the frame sweep."""

    id: int
    members: list[int]
    frames: list[int]

    @property
    def head(self) -> int:
        return self.members[-1]

    @property
    def head_frame(self) -> int:
        return self.frames[-1]


class TrackletLinker(BaseEstimator):
    """Two-threshold frame-sweep linker.

    After :meth:`fit`, ``tracklets_`` holds chains of length >= 2 with
    aggregated unit features and ``singletons_`` the indices of detections
    that never linked.  Detections are consumed in canonical order; member
    indices refer to the input sequence.
    """

    def __init__(self, theta_high: float = 0.6, theta_margin: float = 0.05,
                 max_gap: int = 10, sigma_loc: float = 1.0):
        self.theta_high = theta_high
        self.theta_margin = theta_margin
        self.max_gap = max_gap
        self.sigma_loc = sigma_loc

    @classmethod
    def from_config(cls, cfg: LinkingConfig) -> "TrackletLinker":
        return cls(theta_high=cfg.theta_high, theta_margin=cfg.theta_margin,
                   max_gap=cfg.max_gap, sigma_loc=cfg.sigma_loc)

    def _config(self) -> LinkingConfig:
        return LinkingConfig(theta_high=self.theta_high, theta_margin=self.theta_margin,
                             max_gap=self.max_gap, sigma_loc=self.sigma_loc)

    def fit(self, detections: list[Detection], y=None) -> "TrackletLinker":
        cfg = self._config()
        order = sorted(range(len(detections)),
                       key=lambda i: (detections[i].frame, detections[i].bbox.x,
                                      detections[i].bbox.y, i))
        by_frame: dict[int, list[int]] = {}
        for idx in order:
            by_frame.setdefault(detections[idx].frame, []).append(idx)

        chains: list[_Chain] = []
        open_chains: list[_Chain] = []
        for frame in sorted(by_frame):
            open_chains = [c for c in open_chains
                           if frame - c.head_frame <= cfg.max_gap]
            dets = by_frame[frame]
            pairs = []
            for ci, chain in enumerate(open_chains):
                head = detections[chain.head]
                for di, idx in enumerate(dets):
                    score = link_affinity(head, detections[idx], cfg)
                    pairs.append((score, ci, di))
            taken_chain: set[int] = set()
            taken_det: set[int] = set()
            for score, ci, di in sorted(
                    pairs,
                    key=lambda p: (-p[0], open_chains[p[1]].head_frame, p[2],
                                   open_chains[p[1]].id)):
                if ci in taken_chain or di in taken_det:
                    continue
                if score < cfg.theta_high:
                    continue
                # best still-available rival sharing an endpoint, any score
                rival = max((s for s, c, d in pairs
                             if (c == ci or d == di) and not (c == ci and d == di)
                             and c not in taken_chain and d not in taken_det),
                            default=-math.inf)
                if score - rival < cfg.theta_margin:
                    continue
                chain = open_chains[ci]
                chain.members.append(dets[di])
                chain.frames.append(frame)
                taken_chain.add(ci)
                taken_det.add(di)
            for di, idx in enumerate(dets):
                if di not in taken_det:
                    new = _Chain(id=len(chains), members=[idx], frames=[frame])
                    chains.append(new)
                    open_chains.append(new)
        # chains grow in place; re-collect the extended ones in creation order
        tracklets: list[Tracklet] = []
        singletons: list[int] = []
        for chain in chains:
            if len(chain.members) >= 2:
                emb = np.stack([detections[i].embedding for i in chain.members])
                tracklets.append(Tracklet(
                    id=len(tracklets),
                    members=tuple(chain.members),
                    frames=tuple(chain.frames),
                    feature=aggregate_embeddings(emb),
                    max_gap=cfg.max_gap,
                ))
            else:
                singletons.append(chain.members[0])
        self.tracklets_ = tracklets
        self.singletons_ = sorted(singletons)
        self.n_detections_ = len(detections)
        return self

def link_tracklets(detections: list[Detection],
                   cfg: LinkingConfig = LinkingConfig()) -> tuple[list[Tracklet], list[int]]:
    """Convenience wrapper: link and return (tracklets, singleton indices)."""
    linker = TrackletLinker.from_config(cfg).fit(detections)
    return linker.tracklets_, linker.singletons_
