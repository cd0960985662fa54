"""Per-site and per-sample statistics: spot detection, lattice registration,
saturation fitting, photostability, implantation yield, and depth profiles.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .numfit import ModelSpec, fit_nlls, poisson_mle, ztp_mle

__all__ = [
    "SaturationFit",
    "SiteRecord",
    "YieldReport",
    "DepthStats",
    "GridTransform",
    "saturation_model",
    "fit_saturation",
    "detect_spots",
    "register_grid",
    "photostability",
    "ions_per_aperture",
    "ions_per_aperture_interval",
    "lateral_uncertainty",
    "yield_report",
    "depth_stats",
    "write_image_csv",
    "read_image_csv",
    "write_pgm16",
    "read_pgm16",
    "read_depth_profile",
]

NM_PER_CM = 1e7

# photostability blinking test constants: evidence threshold on the BIC
# difference and the minimum separation of the two rate levels
BLINK_BIC_MARGIN = 10.0
BLINK_SEPARATION_SIGMAS = 5.0


@dataclass(frozen=True)
class SaturationFit:
    """Saturation curve parameters of I(P) = I_s / (1 + P0 / P)."""

    i_s: float  # saturated count rate, cps
    p0: float  # half-saturation power, mW
    fit: "object" = None

    def __post_init__(self):
        if self.i_s <= 0 or self.p0 <= 0:
            raise ValueError("I_s and P0 must be > 0")

    def rate_at(self, power_mw: float) -> float:
        return self.i_s / (1.0 + self.p0 / power_mw)


@dataclass(frozen=True)
class SiteRecord:
    """One lattice site of an implanted array."""

    lattice_index: tuple[int, int]
    position_um: tuple[float, float]
    intensity: float
    g2_zero: float | None = None
    n_emitters: int = 0

    def __post_init__(self):
        if self.intensity < 0:
            raise ValueError("intensity must be >= 0")
        if self.n_emitters < 0:
            raise ValueError("n_emitters must be >= 0")


@dataclass(frozen=True)
class YieldReport:
    """Defects-per-site statistics and the implantation conversion yield."""

    lambda_hat: float
    lambda_stderr: float
    single_fraction: float
    ions_per_aperture: float
    conversion_yield: float
    n_sites: int
    ztp_lambda_hat: float | None = None
    single_fraction_nonzero: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.single_fraction <= 1.0:
            raise ValueError("single_fraction must be in [0, 1]")
        if self.conversion_yield < 0:
            raise ValueError("conversion_yield must be >= 0")


@dataclass(frozen=True)
class DepthStats:
    """Weighted depth statistics of an implantation profile."""

    mean_depth_nm: float
    straggle_nm: float
    profile: np.ndarray  # (n, 2) array of (depth_nm, weight)

    def __post_init__(self):
        if self.mean_depth_nm <= 0:
            raise ValueError("mean depth must be > 0")
        if self.straggle_nm < 0:
            raise ValueError("straggle must be >= 0")


@dataclass(frozen=True)
class GridTransform:
    """Square lattice registered to spot positions: x = origin + R(rotation) @ (pitch * index)."""

    origin_um: tuple[float, float]
    rotation_deg: float
    pitch_um: float
    residual_um: float
    degenerate: bool = False

    def node_position(self, i: int, j: int) -> tuple[float, float]:
        theta = math.radians(self.rotation_deg)
        x = self.pitch_um * i
        y = self.pitch_um * j
        return (
            self.origin_um[0] + x * math.cos(theta) - y * math.sin(theta),
            self.origin_um[1] + x * math.sin(theta) + y * math.cos(theta),
        )


def saturation_model() -> ModelSpec:
    """ModelSpec for I(P) = I_s / (1 + P0 / P), parameters {I_s, P0}."""

    def evaluate(params: np.ndarray, power: np.ndarray) -> np.ndarray:
        i_s, p0 = params
        return i_s / (1.0 + p0 / power)

    def jacobian(params: np.ndarray, power: np.ndarray) -> np.ndarray:
        i_s, p0 = params
        denom = 1.0 + p0 / power
        jac = np.empty((len(power), 2))
        jac[:, 0] = 1.0 / denom
        jac[:, 1] = -i_s / (denom**2 * power)
        return jac

    return ModelSpec(
        name="saturation",
        param_names=("I_s", "P0"),
        eval=evaluate,
        bounds=((1e-12, None), (1e-12, None)),
        jac=jacobian,
    )


def fit_saturation(points, sigmas=None) -> SaturationFit:
    """Fit the saturation curve to (power_mw, rate_cps) pairs.

    ``sigmas`` are optional per-point rate uncertainties (1/sigma^2
    weights); pass them when the noise is multiplicative, otherwise the
    bright points dominate and the half-saturation power is poorly
    constrained.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be (n, 2): power_mw, rate_cps")
    powers, rates = pts[:, 0], pts[:, 1]
    if np.unique(powers).size < 3:
        raise ValueError("need at least 3 distinct powers")
    if np.any(powers <= 0):
        raise ValueError("powers must be > 0")
    p0_init = np.array([1.1 * float(np.max(rates)), float(np.median(powers))])
    result = fit_nlls(saturation_model(), p0_init, powers, rates, sigmas=sigmas)
    if not result.converged:
        raise RuntimeError(f"saturation fit did not converge: {result.message}")
    return SaturationFit(result.params["I_s"], result.params["P0"], result)


def detect_spots(image, min_sep_px: int = 5, snr_threshold: float = 5.0):
    """Find bright spots: local maxima above background + threshold * sqrt(background).

    The background level is the image median.  Candidate maxima closer
    than ``min_sep_px`` are merged keeping the brightest.  Each kept
    maximum is refined by an intensity centroid over its 5x5
    neighborhood; reported intensities are background-subtracted sums
    over that neighborhood.  Returns a list of ((x, y), intensity) in
    pixel units, brightest first.
    """
    img = np.asarray(image, dtype=float)
    if img.size == 0:
        raise ValueError("image is empty")
    background = float(np.median(img))
    cutoff = background + snr_threshold * math.sqrt(max(background, 1.0))
    footprint = np.ones((2 * min_sep_px + 1,) * 2, dtype=bool)
    is_max = (img == ndimage.maximum_filter(img, footprint=footprint)) & (img > cutoff)
    ys, xs = np.nonzero(is_max)
    order = np.argsort(img[ys, xs])[::-1]
    ys, xs = ys[order], xs[order]

    kept: list[tuple[float, float]] = []
    spots: list[tuple[tuple[float, float], float]] = []
    min_sep_sq = min_sep_px**2
    for y, x in zip(ys, xs):
        if any((x - kx) ** 2 + (y - ky) ** 2 < min_sep_sq for kx, ky in kept):
            continue
        kept.append((x, y))
        y0, y1 = max(y - 2, 0), min(y + 3, img.shape[0])
        x0, x1 = max(x - 2, 0), min(x + 3, img.shape[1])
        patch = img[y0:y1, x0:x1] - background
        weights = np.clip(patch, 0.0, None)
        total = float(weights.sum())
        if total <= 0:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        cx = float((weights * xx).sum() / total)
        cy = float((weights * yy).sum() / total)
        spots.append(((cx, cy), float(patch.sum())))
    return spots


def _fit_rotation_offset(spot_xy: np.ndarray, indices: np.ndarray, pitch: float):
    """Least-squares rigid transform mapping pitch*indices onto spots."""
    target = spot_xy - spot_xy.mean(axis=0)
    source = pitch * (indices - indices.mean(axis=0))
    cov = source.T @ target
    theta = math.atan2(cov[0, 1] - cov[1, 0], cov[0, 0] + cov[1, 1])
    rot = np.array(
        [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
    )
    origin = spot_xy.mean(axis=0) - (pitch * indices.mean(axis=0)) @ rot.T
    return theta, rot, origin


def register_grid(spots, pitch_um: float):
    """Register a fixed-pitch square lattice to detected spots.

    ``spots`` is the detect_spots output with positions already scaled
    to um.  Returns (GridTransform, [SiteRecord...]) where every node of
    the bounding index rectangle appears once; nodes with no spot within
    half a pitch get intensity 0.  Collinear inputs cannot fix a
    rotation; it is then pinned to 0 and the transform is flagged
    degenerate.
    """
    if len(spots) < 3:
        raise ValueError("need at least 3 spots to register a grid")
    xy = np.array([p for p, _ in spots], dtype=float)
    intensities = np.array([v for _, v in spots], dtype=float)

    centered = xy - xy.mean(axis=0)
    degenerate = np.linalg.matrix_rank(centered, tol=1e-9 * pitch_um) < 2
    if degenerate:
        theta = 0.0
    else:
        # initial rotation estimate from short inter-spot vectors, folded
        # into (-45, 45] by the lattice 4-fold symmetry
        angles = []
        for k in range(len(xy)):
            delta = xy - xy[k]
            dist = np.hypot(delta[:, 0], delta[:, 1])
            near = (dist > 0.25 * pitch_um) & (dist < 1.5 * pitch_um)
            for dx, dy in delta[near]:
                angles.append(math.atan2(dy, dx) % (math.pi / 2.0))
        if not angles:
            raise ValueError("spots too sparse to estimate the lattice orientation")
        angles = np.array(angles)
        mean_angle = math.atan2(np.sin(4 * angles).mean(), np.cos(4 * angles).mean()) / 4.0
        theta = mean_angle if mean_angle <= math.pi / 4 else mean_angle - math.pi / 2

    origin = xy[0].copy()
    for _ in range(20):
        rot = np.array(
            [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
        )
        local = (xy - origin) @ rot  # inverse rotation
        indices = np.rint(local / pitch_um)
        if degenerate:
            origin = (xy - pitch_um * indices @ rot.T).mean(axis=0)
            new_theta = 0.0
        else:
            new_theta, rot, origin = _fit_rotation_offset(xy, indices, pitch_um)
        if abs(new_theta - theta) < 1e-12:
            theta = new_theta
            break
        theta = new_theta

    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    local = (xy - origin) @ rot
    indices = np.rint(local / pitch_um).astype(int)
    predicted = origin + (pitch_um * indices) @ rot.T
    residual = float(np.sqrt(np.mean(np.sum((xy - predicted) ** 2, axis=1))))

    # re-anchor indices so the lattice starts at (0, 0)
    i_min = indices.min(axis=0)
    indices = indices - i_min
    origin = origin + (pitch_um * i_min) @ rot.T

    transform = GridTransform(
        origin_um=(float(origin[0]), float(origin[1])),
        rotation_deg=math.degrees(theta),
        pitch_um=pitch_um,
        residual_um=residual,
        degenerate=bool(degenerate),
    )

    occupied: dict[tuple[int, int], tuple[float, float, float]] = {}
    for (i, j), (x, y), inten in zip(map(tuple, indices), xy, intensities):
        if (i, j) not in occupied or occupied[(i, j)][2] < inten:
            occupied[(i, j)] = (float(x), float(y), float(inten))
    records = []
    for i in range(indices[:, 0].max() + 1):
        for j in range(indices[:, 1].max() + 1):
            if (i, j) in occupied:
                x, y, inten = occupied[(i, j)]
                records.append(SiteRecord((i, j), (x, y), inten))
            else:
                records.append(
                    SiteRecord((i, j), transform.node_position(i, j), 0.0, n_emitters=0)
                )
    return transform, records


def _gaussian_loglik(x: np.ndarray, mean: float, var: float) -> float:
    var = max(var, 1e-12)
    return float(-0.5 * np.sum((x - mean) ** 2 / var + math.log(2 * math.pi * var)))


def _mixture_em(x: np.ndarray, mu1: float, mu2: float, n_iter: int = 200):
    """Two-component 1-d Gaussian mixture by EM; returns (loglik, means, weight)."""
    w = 0.5
    v1 = v2 = max(float(np.var(x)) / 4.0, 1e-6)
    loglik = -np.inf
    for _ in range(n_iter):
        p1 = w * np.exp(-0.5 * (x - mu1) ** 2 / v1) / math.sqrt(2 * math.pi * v1)
        p2 = (1 - w) * np.exp(-0.5 * (x - mu2) ** 2 / v2) / math.sqrt(2 * math.pi * v2)
        total = p1 + p2 + 1e-300
        resp = p1 / total
        new_loglik = float(np.sum(np.log(total)))
        w = float(np.mean(resp))
        if w < 1e-9 or w > 1 - 1e-9:
            break
        mu1 = float(np.sum(resp * x) / (resp.sum() + 1e-300))
        mu2 = float(np.sum((1 - resp) * x) / ((1 - resp).sum() + 1e-300))
        v1 = max(float(np.sum(resp * (x - mu1) ** 2) / (resp.sum() + 1e-300)), 1e-6)
        v2 = max(float(np.sum((1 - resp) * (x - mu2) ** 2) / ((1 - resp).sum() + 1e-300)), 1e-6)
        if abs(new_loglik - loglik) < 1e-9 * max(abs(new_loglik), 1.0):
            loglik = new_loglik
            break
        loglik = new_loglik
    return loglik, (mu1, mu2), w


def photostability(trace, bin_ms: float) -> dict:
    """Blinking diagnostics for a binned intensity trace.

    Computes the Fano factor (variance/mean of bin counts; 1 for a
    Poisson-stable emitter) and tests for two-state switching by
    comparing one- and two-component Gaussian descriptions of the count
    distribution: the trace is flagged as blinking when the mixture
    improves the BIC by more than 10 and its component means sit more
    than 5 sqrt(pooled mean) apart.
    """
    counts = np.asarray(trace, dtype=float)
    if counts.size < 100:
        raise ValueError("need at least 100 bins for photostability analysis")
    if bin_ms <= 0:
        raise ValueError("bin_ms must be > 0")
    mean = float(np.mean(counts))
    fano = float(np.var(counts) / mean) if mean > 0 else 0.0
    mean_rate = mean / (bin_ms / 1000.0)

    n = counts.size
    loglik1 = _gaussian_loglik(counts, mean, float(np.var(counts)))
    bic1 = -2.0 * loglik1 + 2.0 * math.log(n)
    lo, hi = np.percentile(counts, [20.0, 80.0])
    loglik2, (mu1, mu2), _ = _mixture_em(counts, float(lo), float(hi))
    bic2 = -2.0 * loglik2 + 5.0 * math.log(n)
    separation = abs(mu2 - mu1)
    blinking = bool(
        (bic1 - bic2) > BLINK_BIC_MARGIN
        and separation > BLINK_SEPARATION_SIGMAS * math.sqrt(max(mean, 1e-12))
    )
    return {
        "mean_rate": mean_rate,
        "fano": fano,
        "blinking_flag": blinking,
        "delta_bic": bic1 - bic2,
        "level_separation": separation,
        "n_bins": n,
    }


def ions_per_aperture(fluence_per_cm2: float, diameter_nm: float) -> float:
    """Mean implanted ions through one circular aperture: fluence * area."""
    if fluence_per_cm2 < 0 or diameter_nm <= 0:
        raise ValueError("fluence must be >= 0 and diameter > 0")
    radius_cm = diameter_nm / 2.0 / NM_PER_CM
    return fluence_per_cm2 * math.pi * radius_cm**2


def ions_per_aperture_interval(
    fluence_per_cm2: float, diameter_nm: float, diameter_tol_nm: float = 10.0
) -> tuple[float, float, float]:
    """(low, mean, high) ion counts for a diameter known to +/- tolerance."""
    if diameter_tol_nm < 0 or diameter_tol_nm >= diameter_nm:
        raise ValueError("tolerance must be in [0, diameter)")
    return (
        ions_per_aperture(fluence_per_cm2, diameter_nm - diameter_tol_nm),
        ions_per_aperture(fluence_per_cm2, diameter_nm),
        ions_per_aperture(fluence_per_cm2, diameter_nm + diameter_tol_nm),
    )


def lateral_uncertainty(aperture_diameter_nm: float, lateral_straggle_nm: float = 0.0) -> float:
    """Lateral placement scale: aperture radius and straggle in quadrature."""
    if aperture_diameter_nm <= 0 or lateral_straggle_nm < 0:
        raise ValueError("diameter must be > 0 and straggle >= 0")
    return math.hypot(aperture_diameter_nm / 2.0, lateral_straggle_nm)


def yield_report(sites, ions_per_aperture_mean: float) -> YieldReport:
    """Defect-count statistics over the site list.

    ``lambda_hat`` is the plain Poisson MLE over all sites;
    ``ztp_lambda_hat`` re-estimates it from the nonzero sites under a
    zero-truncated Poisson, which is the right comparison when empty
    sites are invisible to the survey.  Both single-site fractions are
    reported for the same reason.
    """
    sites = list(sites)
    if not sites:
        raise ValueError("need at least one site")
    if ions_per_aperture_mean <= 0:
        raise ValueError("ions_per_aperture must be > 0")
    counts = np.array([s.n_emitters for s in sites], dtype=int)
    pois = poisson_mle(counts)
    single = float(np.count_nonzero(counts == 1) / counts.size)
    nonzero = counts[counts > 0]
    ztp_lambda = None
    single_nonzero = None
    if nonzero.size:
        single_nonzero = float(np.count_nonzero(nonzero == 1) / nonzero.size)
        if np.mean(nonzero) > 1.0:
            ztp_lambda = ztp_mle(nonzero).lambda_hat
    return YieldReport(
        lambda_hat=pois.lambda_hat,
        lambda_stderr=pois.stderr,
        single_fraction=single,
        ions_per_aperture=ions_per_aperture_mean,
        conversion_yield=pois.lambda_hat / ions_per_aperture_mean,
        n_sites=int(counts.size),
        ztp_lambda_hat=ztp_lambda,
        single_fraction_nonzero=single_nonzero,
    )


def depth_stats(profile) -> DepthStats:
    """Weighted mean depth and straggle (weighted standard deviation)."""
    table = np.asarray(profile, dtype=float)
    if table.ndim != 2 or table.shape[1] != 2 or table.shape[0] < 2:
        raise ValueError("profile must be an (n >= 2, 2) table of depth_nm, weight")
    depths, weights = table[:, 0], table[:, 1]
    if np.any(weights < 0):
        raise ValueError("weights must be >= 0")
    total = float(weights.sum())
    if total <= 0:
        raise ValueError("profile weights sum to zero")
    mean = float(np.sum(depths * weights) / total)
    var = float(np.sum(weights * (depths - mean) ** 2) / total)
    return DepthStats(mean, math.sqrt(var), table)


# ---------------------------------------------------------------------------
# Image and profile files.  Scan images travel as a plain CSV matrix of
# integer counts or as 16-bit binary PGM; depth profiles as two-column
# CSV "depth_nm,weight".
# ---------------------------------------------------------------------------


def write_image_csv(image: np.ndarray, path: str | Path) -> None:
    np.savetxt(path, np.asarray(image, dtype=np.int64), fmt="%d", delimiter=",")


def read_image_csv(path: str | Path) -> np.ndarray:
    img = np.loadtxt(path, delimiter=",", dtype=np.int64, ndmin=2)
    return img


def write_pgm16(image: np.ndarray, path: str | Path) -> None:
    img = np.asarray(image)
    if np.any(img < 0) or np.any(img > 65535):
        raise ValueError("PGM16 requires counts in [0, 65535]")
    data = img.astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm16(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM file")
        dims = fh.readline().split()
        width, height = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        if maxval != 65535:
            raise ValueError(f"{path}: expected 16-bit PGM (maxval 65535)")
        raw = fh.read(width * height * 2)
    return np.frombuffer(raw, dtype=">u2").reshape(height, width).astype(np.int64)


def write_site_table(sites, path: str | Path) -> None:
    """Site table JSON: {"sites": [{lattice_index, position_um, intensity, ...}]}."""
    payload = {
        "sites": [
            {
                "lattice_index": list(s.lattice_index),
                "position_um": list(s.position_um),
                "intensity": s.intensity,
                "g2_zero": s.g2_zero,
                "n_emitters": s.n_emitters,
            }
            for s in sites
        ]
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_site_table(path: str | Path) -> list[SiteRecord]:
    with open(path) as fh:
        payload = json.load(fh)
    if "sites" not in payload or not isinstance(payload["sites"], list):
        raise ValueError(f"{path}: expected a JSON object with a 'sites' list")
    records = []
    for k, entry in enumerate(payload["sites"]):
        try:
            records.append(
                SiteRecord(
                    lattice_index=tuple(entry.get("lattice_index", (k, 0))),
                    position_um=tuple(entry.get("position_um", (0.0, 0.0))),
                    intensity=float(entry.get("intensity", 0.0)),
                    g2_zero=entry.get("g2_zero"),
                    n_emitters=int(entry["n_emitters"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: malformed site entry {k}: {entry!r}") from exc
    return records


def read_depth_profile(path: str | Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if lineno == 1 and line.replace(" ", "") == "depth_nm,weight":
                continue
            parts = line.split(",")
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed profile row {line!r}") from exc
    if len(rows) < 2:
        raise ValueError(f"{path}: depth profile needs at least 2 rows")
    return np.array(rows)
