"""STAPLE consensus by expectation-maximization.

Binary STAPLE with a spatially constant foreground prior, run independently
per foreground label for multi-label inputs. The prior is either re-estimated
in every M-step (``estimated``, default), fixed to the mean rater vote rate
(``global-prevalence``) or given (``fixed``). E-step products are evaluated in
log space with probabilities clamped to ``[EPS, 1 - EPS]``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .volume import LabelMap, require_same_geometry

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass(frozen=True)
class StapleConfig:
    max_iter: int = 100
    tol: float = 1e-6
    prior_mode: str = "estimated"
    prior: float | None = None
    init_p: float = 0.99999
    init_q: float = 0.99999
    threshold: float = 0.5
    roi_mode: str = "union-bounding-box"

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.prior_mode not in ("estimated", "global-prevalence", "fixed"):
            raise ValueError(f"unknown prior_mode {self.prior_mode!r}")
        if self.prior_mode == "fixed" and (self.prior is None or not 0 < self.prior < 1):
            raise ValueError("prior_mode 'fixed' needs 0 < prior < 1")
        if self.roi_mode not in ("all-voxels", "union-bounding-box"):
            raise ValueError(f"unknown roi_mode {self.roi_mode!r}")
        for name in ("init_p", "init_q"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RaterPerformance:
    p: np.ndarray
    q: np.ndarray
    iterations: int
    converged: bool
    log_likelihood: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "p": [float(v) for v in self.p],
            "q": [float(v) for v in self.q],
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }


def _bounding_box(any_fg: np.ndarray, pad: int = 1) -> tuple[slice, ...]:
    idx = np.nonzero(any_fg)
    return tuple(
        slice(max(int(i.min()) - pad, 0), min(int(i.max()) + pad + 1, n))
        for i, n in zip(idx, any_fg.shape)
    )


def _log_terms(p, q, f):
    """Per-rater log factors for votes 1 / 0 under truth 1 / 0."""
    p = np.clip(p, EPS, 1 - EPS)
    q = np.clip(q, EPS, 1 - EPS)
    f = min(max(f, EPS), 1 - EPS)
    return np.log(p), np.log1p(-p), np.log(q), np.log1p(-q), np.log(f), np.log1p(-f)


def staple_binary(decisions: Sequence[np.ndarray], cfg: StapleConfig | None = None):
    """Estimate the hidden binary truth from several rater masks.

    Returns ``(W, perf)`` where ``W`` is the float64 posterior probability of
    foreground at every voxel and ``perf`` holds per-rater sensitivity ``p``
    and specificity ``q``. ``perf.log_likelihood`` records the observed-data
    log-likelihood evaluated at the parameters entering each E-step.
    """
    cfg = cfg or StapleConfig()
    if len(decisions) == 0:
        raise ValueError("staple_binary needs at least one rater")
    masks = [np.asarray(d) for d in decisions]
    shape = masks[0].shape
    for j, m in enumerate(masks):
        if m.shape != shape:
            raise ValueError(f"rater {j} has shape {m.shape}, expected {shape}")
        if m.dtype != np.bool_ and not np.isin(m, (0, 1)).all():
            raise ValueError(f"rater {j} mask is not binary")
    D = np.stack([m.astype(bool) for m in masks])  # (R, *shape)
    n_raters = D.shape[0]
    n_total = int(np.prod(shape))

    any_fg = D.any(axis=0)
    if not any_fg.any():
        return np.zeros(shape), RaterPerformance(
            np.full(n_raters, cfg.init_p), np.full(n_raters, cfg.init_q), 1, True
        )

    if cfg.prior_mode == "fixed":
        prior = float(cfg.prior)
    else:
        prior = float(D.sum(dtype=np.int64)) / (n_raters * n_total)

    if cfg.roi_mode == "union-bounding-box":
        box = _bounding_box(any_fg)
        Droi = D[(slice(None), *box)].reshape(n_raters, -1)
    else:
        box = None
        Droi = D.reshape(n_raters, -1)
    n_roi = Droi.shape[1]
    # voxels outside the box: every rater voted 0
    n_out = n_total - n_roi
    Df = Droi.astype(np.float64)

    p = np.full(n_raters, float(cfg.init_p))
    q = np.full(n_raters, float(cfg.init_q))
    W = None
    W_out = 0.0
    lls: list[float] = []
    converged = False
    iterations = 0
    for it in range(1, cfg.max_iter + 1):
        iterations = it
        lp, l1p, lq, l1q, lf, l1f = _log_terms(p, q, prior)
        # E-step
        log_a = lf + Df.T @ lp + (1.0 - Df).T @ l1p
        log_b = l1f + (1.0 - Df).T @ lq + Df.T @ l1q
        log_a_out = lf + l1p.sum()
        log_b_out = l1f + lq.sum()
        m = np.maximum(log_a, log_b)
        norm = m + np.log(np.exp(log_a - m) + np.exp(log_b - m))
        W_new = np.exp(log_a - norm)
        m_out = max(log_a_out, log_b_out)
        norm_out = m_out + np.log(np.exp(log_a_out - m_out) + np.exp(log_b_out - m_out))
        W_out_new = float(np.exp(log_a_out - norm_out))
        lls.append(float(norm.sum() + n_out * norm_out))

        if W is not None:
            delta = (np.abs(W_new - W).sum() + n_out * abs(W_out_new - W_out)) / n_total
        else:
            delta = np.inf
        W, W_out = W_new, W_out_new

        # M-step
        sum_w = W.sum() + n_out * W_out
        sum_nw = (1.0 - W).sum() + n_out * (1.0 - W_out)
        ok = True
        if sum_w > 0:
            p_new = (Df @ W) / sum_w
        else:
            p_new, ok = p, False
        if sum_nw > 0:
            # outside voxels have D = 0, so each contributes (1 - W_out)
            q_new = ((1.0 - Df) @ (1.0 - W) + n_out * (1.0 - W_out)) / sum_nw
        else:
            q_new, ok = q, False
        p, q = np.clip(p_new, EPS, 1.0), np.clip(q_new, EPS, 1.0)
        if cfg.prior_mode == "estimated":
            prior = sum_w / n_total
        if not ok:
            log.warning("STAPLE M-step hit a zero denominator at iteration %d", it)
            converged = False
            break
        if delta < cfg.tol:
            converged = True
            break

    full = np.full(shape, W_out)
    if box is None:
        full = W.reshape(shape)
    else:
        full[box] = W.reshape(full[box].shape)
    return full, RaterPerformance(p, q, iterations, converged, lls)


def staple_multilabel(raters: Sequence[LabelMap], cfg: StapleConfig | None = None):
    """Per-label binary STAPLE, then resolve overlaps.

    A voxel takes the label with the highest posterior among labels whose
    posterior exceeds ``cfg.threshold`` (ties go to the lowest code);
    otherwise it is background.
    """
    cfg = cfg or StapleConfig()
    if len(raters) == 0:
        raise ValueError("staple_multilabel needs at least one rater")
    require_same_geometry(raters)
    enc = raters[0].encoding
    for j, r in enumerate(raters[1:], 1):
        if dict(r.encoding) != dict(enc):
            raise ValueError(f"rater {j} encoding {r.encoding} differs from {enc}")
    codes = raters[0].codes
    best = np.zeros(raters[0].shape)
    out = np.zeros(raters[0].shape, dtype=raters[0].volume.dtype)
    perf = {}
    for code in codes:
        W, perf[enc[code]] = staple_binary([r.data == code for r in raters], cfg)
        # ascending code order + strict '>' keeps the lowest code on ties
        take = (W > cfg.threshold) & (W > best)
        out[take] = code
        best = np.where(take, W, best)
    return raters[0].with_data(out), perf
