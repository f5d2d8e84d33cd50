"""Propagation-model and geostatistical baselines: LDPL (homogeneous and kNN-PLE),
ordinary kriging, and kriging on LDPL residuals (OKD).

Locations are (lat, lng) arrays; geometry is done in a local tangent frame.
"""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geo import LocalFrame, distance_m

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0
DEFAULT_RS_POWER_DBM = 15.0
FALLBACK_P0_DBM = -30.0

# LTE downlink bands: (F_DL_low MHz, N_offs_DL, last EARFCN)
_EARFCN_BANDS = (
    (2110.0, 0, 599), (1930.0, 600, 1199), (1805.0, 1200, 1949), (2110.0, 1950, 2399),
    (869.0, 2400, 2649), (2620.0, 2750, 3449), (925.0, 3450, 3799), (729.0, 5010, 5179),
    (746.0, 5180, 5279), (758.0, 5280, 5379), (734.0, 5730, 5849), (1930.0, 8040, 8689),
    (859.0, 8690, 9039), (717.0, 9660, 9769), (2350.0, 9770, 9869), (2496.0, 39650, 41589),
    (2110.0, 66436, 67335), (617.0, 68586, 68935),
)


def earfcn_to_hz(earfcn: int) -> float:
    for f_low, off, last in _EARFCN_BANDS:
        if off <= earfcn <= last:
            return (f_low + 0.1 * (earfcn - off)) * 1e6
    raise ValueError(f"EARFCN {earfcn} not in the band table")


def friis_p0(freq_hz: float | None, d0: float = 1.0, tx_power_dbm: float = DEFAULT_RS_POWER_DBM) -> float:
    """Received power at ``d0`` under free-space loss with 0 dBi antennas."""
    if freq_hz is None:
        log.warning("no downlink frequency; p0 defaults to %.0f dBm", FALLBACK_P0_DBM)
        return FALLBACK_P0_DBM
    fspl = 20.0 * math.log10(4.0 * math.pi * d0 * freq_hz / SPEED_OF_LIGHT)
    return tx_power_dbm - fspl


def _dist(latlng, bs, d0):
    d = distance_m(np.atleast_2d(np.asarray(latlng, dtype=float)), np.asarray(bs, dtype=float))
    return np.maximum(np.atleast_1d(d), d0)


def _log_term(latlng, bs, d0):
    return 10.0 * np.log10(_dist(latlng, bs, d0) / d0)


# LDPL

@dataclass(frozen=True)
class LdplModel:
    p0: float
    n: float
    d0: float
    bs: tuple  # (lat, lng)

    def __post_init__(self):
        if not self.d0 > 0 or not math.isfinite(self.n):
            raise ValueError("LDPL needs d0 > 0 and a finite exponent")

    def predict(self, latlng) -> np.ndarray:
        return self.p0 - self.n * _log_term(latlng, self.bs, self.d0)


def perceived_ple(latlng, y, bs, p0, d0=1.0):
    """Per-point exponent ``(p0 - y_i) / (10 log10(d_i / d0))`` and the mask where it is defined."""
    x = _log_term(latlng, bs, d0)
    ok = x > 0
    n = np.full(len(x), np.nan)
    n[ok] = (p0 - np.asarray(y, dtype=float)[ok]) / x[ok]
    return n, ok


def fit_ldpl_hom(latlng, y, bs, p0: float, d0: float = 1.0) -> LdplModel:
    """Least-squares exponent with the intercept fixed at ``p0``."""
    x = _log_term(latlng, bs, d0)
    sxx = float(np.dot(x, x))
    if not sxx > 0:
        raise ValueError("every training point lies within d0 of the base station")
    n = float(np.dot(x, p0 - np.asarray(y, dtype=float)) / sxx)
    return LdplModel(float(p0), n, float(d0), tuple(map(float, bs)))


@dataclass(frozen=True)
class LdplKnnModel:
    base: LdplModel
    frame: LocalFrame
    xy: np.ndarray   # training locations with a defined exponent
    ple: np.ndarray
    k: int

    def ple_at(self, latlng) -> np.ndarray:
        q = self.frame.to_local(np.atleast_2d(np.asarray(latlng, dtype=float)))
        dist, nn = cKDTree(self.xy).query(q, k=self.k)
        dist = np.asarray(dist).reshape(len(q), self.k)
        nn = np.asarray(nn).reshape(len(q), self.k)
        w = 1.0 / np.maximum(dist, 1.0)
        out = (w * self.ple[nn]).sum(axis=1) / w.sum(axis=1)
        hit = dist[:, 0] == 0.0
        for r in np.flatnonzero(hit):
            # coincident query: the co-located points' own exponent
            out[r] = self.ple[nn[r][dist[r] == 0.0]].mean()
        return out

    def predict(self, latlng) -> np.ndarray:
        b = self.base
        return b.p0 - self.ple_at(latlng) * _log_term(latlng, b.bs, b.d0)


def default_knn_k(n_train: int, dense: bool) -> int:
    return min(n_train, 100) if dense else max(1, int(round(0.1 * n_train)))


def fit_ldpl_knn(latlng, y, bs, p0: float, d0: float = 1.0, k: int = 10) -> LdplKnnModel:
    latlng = np.atleast_2d(np.asarray(latlng, dtype=float))
    n, ok = perceived_ple(latlng, y, bs, p0, d0)
    if not ok.any():
        raise ValueError("no training point beyond d0; per-point exponents undefined")
    if not ok.all():
        log.warning("%d point(s) within d0 of the base station dropped from kNN-PLE", int((~ok).sum()))
    if not 1 <= k <= int(ok.sum()):
        raise ValueError(f"k={k} must be in [1, {int(ok.sum())}]")
    frame = LocalFrame(float(bs[0]), float(bs[1]))
    xy = frame.to_local(latlng[ok])
    base = LdplModel(float(p0), float(np.mean(n[ok])), float(d0), tuple(map(float, bs)))
    return LdplKnnModel(base, frame, xy, n[ok], int(k))


# semivariogram

@dataclass(frozen=True)
class Semivariogram:
    nugget: float
    sill: float
    range_m: float
    lags: np.ndarray = None    # empirical bins used in the fit
    gamma: np.ndarray = None
    counts: np.ndarray = None
    max_lag_m: float = 200.0
    bin_width_m: float = 10.0

    def __post_init__(self):
        if self.nugget < 0 or self.sill <= 0 or self.range_m <= 0:
            raise ValueError("semivariogram needs nugget >= 0, sill > 0, range > 0")

    def __call__(self, h) -> np.ndarray:
        """Model value; the computed ``gamma(0)`` equals the nugget."""
        h = np.asarray(h, dtype=float)
        return self.nugget + self.sill * (1.0 - np.exp(-h / self.range_m))

    def to_csv(self) -> bytes:
        buf = io.StringIO()
        buf.write("lag_m,gamma,n_pairs\n")
        if self.lags is not None:
            for h, g, c in zip(self.lags, self.gamma, self.counts):
                buf.write(f"{float(h)!r},{float(g)!r},{int(c)}\n")
        return buf.getvalue().encode("utf-8")


def empirical_semivariogram(xy, y, max_lag_m=200.0, bin_width_m=10.0):
    """Binned ``0.5 * mean((y_i - y_j)^2)`` over pairs with lag <= max_lag.

    Returns (mean lag, gamma, pair count) for non-empty bins and the total pair count.
    """
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    y = np.asarray(y, dtype=float)
    pairs = cKDTree(xy).query_pairs(max_lag_m, output_type="ndarray")
    nb = max(1, int(math.ceil(max_lag_m / bin_width_m)))
    if len(pairs) == 0:
        return np.empty(0), np.empty(0), np.empty(0, dtype=np.int64), 0
    h = np.linalg.norm(xy[pairs[:, 0]] - xy[pairs[:, 1]], axis=1)
    sq = (y[pairs[:, 0]] - y[pairs[:, 1]]) ** 2
    b = np.minimum((h // bin_width_m).astype(np.int64), nb - 1)
    cnt = np.bincount(b, minlength=nb)
    hs = np.bincount(b, weights=h, minlength=nb)
    gs = np.bincount(b, weights=sq, minlength=nb)
    m = cnt > 0
    return hs[m] / cnt[m], 0.5 * gs[m] / cnt[m], cnt[m], int(len(pairs))


def _lm_exponential(h, g, theta, fixed_nugget, lo, iters=200):
    """Damped Gauss-Newton fit of nugget + sill (1 - exp(-h / range)); steps are clamped at ``lo``."""
    def resid(t):
        return t[0] + t[1] * (1.0 - np.exp(-h / t[2])) - g

    def jac(t):
        e = np.exp(-h / t[2])
        J = np.column_stack([np.ones_like(h), 1.0 - e, -t[1] * e * h / t[2] ** 2])
        if fixed_nugget:
            J[:, 0] = 0.0
        return J

    t = np.maximum(np.asarray(theta, dtype=float), lo)
    r = resid(t)
    sse = float(r @ r)
    lam = 1e-3
    for _ in range(iters):
        J = jac(t)
        A = J.T @ J
        gvec = J.T @ r
        D = np.diag(np.maximum(np.diag(A), 1e-12))
        try:
            step = np.linalg.solve(A + lam * D, -gvec)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        t_new = np.maximum(t + step, lo)
        r_new = resid(t_new)
        sse_new = float(r_new @ r_new)
        if sse_new < sse:
            done = abs(sse - sse_new) <= 1e-14 * max(sse, 1e-300) or np.allclose(t_new, t, rtol=1e-12, atol=0)
            t, r, sse = t_new, r_new, sse_new
            lam = max(lam / 3.0, 1e-12)
            if done:
                break
        else:
            lam *= 3.0
            if lam > 1e12:
                break
    return t


def fit_semivariogram(latlng=None, y=None, max_lag_m=200.0, bin_width_m=10.0, frame=None, xy=None,
                      nugget: float | None = None) -> Semivariogram:
    """Empirical bins plus an exponential-model fit. ``nugget=0.0`` pins the nugget."""
    if xy is None:
        latlng = np.atleast_2d(np.asarray(latlng, dtype=float))
        frame = frame or LocalFrame(*latlng.mean(axis=0))
        xy = frame.to_local(latlng)
    lags, gam, cnt, _ = empirical_semivariogram(xy, y, max_lag_m, bin_width_m)
    if len(lags) < 3:
        raise ValueError(f"only {len(lags)} non-empty lag bins within {max_lag_m} m; need 3")
    scale = float(gam.max())
    sill_floor = 1e-12
    if scale <= 0:
        return Semivariogram(0.0 if nugget is None else nugget, sill_floor, max_lag_m / 3.0,
                             lags, gam, cnt, max_lag_m, bin_width_m)
    g = gam / scale
    n0 = float(g[0]) if nugget is None else nugget / scale
    theta = (n0, max(float(g.max()) - n0, 1e-6), max_lag_m / 3.0)
    lo = np.array([0.0, sill_floor / scale, 1e-3 * bin_width_m])
    if nugget is not None:
        lo[0] = n0
    t = _lm_exponential(lags, g, theta, nugget is not None, lo)
    nug = float(t[0] * scale) if nugget is None else float(nugget)
    return Semivariogram(nug, max(float(t[1] * scale), sill_floor), float(t[2]),
                         lags, gam, cnt, max_lag_m, bin_width_m)


# ordinary kriging

def _dedupe(xy, y):
    u, inv = np.unique(xy, axis=0, return_inverse=True)
    inv = np.asarray(inv).ravel()
    if len(u) == len(xy):
        return xy, y
    sums = np.bincount(inv, weights=y, minlength=len(u))
    return u, sums / np.bincount(inv, minlength=len(u))


@dataclass(frozen=True)
class KrigingModel:
    frame: LocalFrame
    xy: np.ndarray
    y: np.ndarray
    vario: Semivariogram
    k: int = 10

    def _gamma(self, h):
        # the diagonal convention: zero semivariance at zero lag
        g = self.vario(h)
        return np.where(h == 0.0, 0.0, g)

    def solve(self, q_xy, chunk: int = 8192):
        """Kriging weights for local-frame queries: (pred, variance, weights, neighbor idx)."""
        q = np.atleast_2d(np.asarray(q_xy, dtype=float))
        K = self.k
        dist, nn = cKDTree(self.xy).query(q, k=K)
        dist = np.asarray(dist, dtype=float).reshape(len(q), K)
        nn = np.asarray(nn).reshape(len(q), K)
        pred = np.empty(len(q))
        var = np.empty(len(q))
        lam = np.empty((len(q), K))
        for s in range(0, len(q), chunk):
            ib = nn[s:s + chunk]
            P = self.xy[ib]  # (M, K, 2)
            dij = np.linalg.norm(P[:, :, None, :] - P[:, None, :, :], axis=3)
            A = np.ones((len(ib), K + 1, K + 1))
            A[:, :K, :K] = self._gamma(dij)
            A[:, K, K] = 0.0
            b = np.ones((len(ib), K + 1))
            b[:, :K] = self._gamma(dist[s:s + chunk])
            try:
                sol = np.linalg.solve(A, b[:, :, None])[:, :, 0]
            except np.linalg.LinAlgError as e:
                raise ValueError("singular kriging system") from e
            lam[s:s + chunk] = sol[:, :K]
            pred[s:s + chunk] = (sol[:, :K] * self.y[ib]).sum(axis=1)
            var[s:s + chunk] = (sol[:, :K] * b[:, :K]).sum(axis=1) + sol[:, K]
        return pred, var, lam, nn

    def predict(self, latlng):
        """(mean, kriging variance) at (lat, lng) queries."""
        q = self.frame.to_local(np.atleast_2d(np.asarray(latlng, dtype=float)))
        if np.ptp(self.y) == 0.0:
            return np.full(len(q), self.y[0]), np.zeros(len(q))
        pred, var, _, _ = self.solve(q)
        return pred, var


def fit_kriging(latlng, y, max_lag_m=200.0, bin_width_m=10.0, k=10, frame=None,
                vario: Semivariogram | None = None, nugget: float | None = None) -> KrigingModel:
    latlng = np.atleast_2d(np.asarray(latlng, dtype=float))
    y = np.asarray(y, dtype=float)
    frame = frame or LocalFrame(*latlng.mean(axis=0))
    xy, yy = _dedupe(frame.to_local(latlng), y)
    if vario is None:
        if np.ptp(yy) == 0.0:
            vario = Semivariogram(0.0, 1e-12, max_lag_m / 3.0, max_lag_m=max_lag_m, bin_width_m=bin_width_m)
        else:
            vario = fit_semivariogram(y=yy, xy=xy, max_lag_m=max_lag_m, bin_width_m=bin_width_m, nugget=nugget)
    if not 1 <= k:
        raise ValueError("k must be >= 1")
    return KrigingModel(frame, xy, yy, vario, int(min(k, len(yy))))


def ok_predict(m: KrigingModel, latlng):
    return m.predict(latlng)


# kriging on LDPL residuals

@dataclass(frozen=True)
class OkdModel:
    trend: LdplModel      # exponent = mean perceived PLE
    residual: KrigingModel

    @property
    def n(self) -> float:
        return self.trend.n

    def predict(self, latlng):
        r, var = self.residual.predict(latlng)
        return self.trend.predict(latlng) + r, var


def okd_fit(latlng, y, bs, p0: float, d0: float = 1.0, max_lag_m=200.0, bin_width_m=10.0, k=10,
            frame=None, nugget: float | None = None) -> OkdModel:
    latlng = np.atleast_2d(np.asarray(latlng, dtype=float))
    y = np.asarray(y, dtype=float)
    n_i, ok = perceived_ple(latlng, y, bs, p0, d0)
    if not ok.any():
        raise ValueError("every training point lies within d0 of the base station")
    trend = LdplModel(float(p0), float(np.mean(n_i[ok])), float(d0), tuple(map(float, bs)))
    delta = y - trend.predict(latlng)
    return OkdModel(trend, fit_kriging(latlng, delta, max_lag_m, bin_width_m, k, frame, nugget=nugget))


def okd_predict(m: OkdModel, latlng):
    return m.predict(latlng)
