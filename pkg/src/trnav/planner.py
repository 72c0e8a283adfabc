"""Appearance-based teach-and-repeat planner.

Keyframes pair an odometry pose with a patch-normalized low-resolution image.
During the repeat phase the current camera view is registered against the
stored keyframes with normalized cross-correlation over horizontal shifts,
yielding an orientation offset and an along-path offset that nudge the pose
estimate back onto the taught route.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .config import load_kv, write_kv, packaged_default
from .vehicle import wrap_angle
from .world import IMG_W, IMG_H, DEFAULT_FOV

PATCH = 9


@dataclass(frozen=True)
class PlannerGains:
    """Correction gains, gating threshold and search geometry."""

    k_p: float = 0.01        # heading-correction gain (shares the K_theta value)
    k_theta: float = 0.01    # pixel-offset to heading-nudge gain
    k_s: float = 3.0         # along-path correction gain, applied as a rate
    rho_bar: float = 0.1     # corrections below this peak correlation are ignored
    d_search: int = 75       # NCC shift range, pixels
    fov: float = DEFAULT_FOV

    def __post_init__(self):
        if not (0.0 < self.rho_bar < 1.0):
            raise ValueError("rho_bar must lie in (0, 1)")
        if not (0 < self.d_search < IMG_W):
            raise ValueError("NCC search range must stay below the image width")

    @classmethod
    def from_file(cls, path) -> "PlannerGains":
        kv = load_kv(path)
        kv["d_search"] = int(float(kv.get("d_search", 75)))
        if "fov_deg" in kv:
            kv["fov"] = math.radians(float(kv.pop("fov_deg")))
        return cls(**{k: (float(v) if k != "d_search" else v) for k, v in kv.items()})

    @classmethod
    def table_defaults(cls) -> "PlannerGains":
        kv = packaged_default("planner_default.txt")
        return cls(k_p=float(kv["k_p"]), k_theta=float(kv["k_theta"]),
                   k_s=float(kv["k_s"]), rho_bar=float(kv["rho_bar"]),
                   d_search=int(float(kv["d_search"])),
                   fov=math.radians(float(kv["fov_deg"])))

    def to_file(self, path):
        write_kv(path, {"k_p": self.k_p, "k_theta": self.k_theta, "k_s": self.k_s,
                        "rho_bar": self.rho_bar, "d_search": self.d_search,
                        "fov_deg": math.degrees(self.fov)},
                 header="planner gains")


@dataclass
class Correction:
    """Planner output: heading and along-path offsets plus match confidence."""

    delta_theta: float = 0.0
    delta_s: float = 0.0
    rho: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.delta_theta, self.delta_s, self.rho)):
            raise ValueError("correction fields must be finite")
        if not (-1.0 - 1e-9 <= self.rho <= 1.0 + 1e-9):
            raise ValueError("correlation confidence must lie in [-1, 1]")


@dataclass
class PoseEstimate:
    """Repeat-phase belief: odometry pose plus along-path progress."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    progress: float = 0.0


def patch_normalize(image) -> np.ndarray:
    """Zero-mean unit-variance normalisation over non-overlapping 9x9 tiles.

    Tiles are anchored at the top-left corner; the partial tiles at the right
    and bottom edges are normalised over the pixels they actually contain.
    Constant tiles map to zero.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (IMG_H, IMG_W):
        raise ValueError(f"expected a {IMG_H}x{IMG_W} image, got {img.shape}")
    out = np.empty_like(img)
    for r0 in range(0, IMG_H, PATCH):
        for c0 in range(0, IMG_W, PATCH):
            tile = img[r0:r0 + PATCH, c0:c0 + PATCH]
            mu = tile.mean()
            sd = tile.std()
            if sd < 1e-12:
                out[r0:r0 + PATCH, c0:c0 + PATCH] = 0.0
            else:
                out[r0:r0 + PATCH, c0:c0 + PATCH] = (tile - mu) / sd
    return out


def _overlap_stats(img, cum, cum2, a, b):
    """(sum, sumsq) of columns [a, b) from per-column cumulative sums."""
    return cum[b] - cum[a], cum2[b] - cum2[a]


def _zncc_at(query, reference, d):
    """Zero-mean NCC of the column overlap at integer shift d (exact)."""
    w = query.shape[1]
    qa, qb = max(0, -d), w - max(0, d)
    ra, rb = qa + d, qb + d
    q = query[:, qa:qb].ravel()
    r = reference[:, ra:rb].ravel()
    n = q.size
    sq, sr = q.sum(), r.sum()
    sqq = float(np.dot(q, q))
    srr = float(np.dot(r, r))
    sqr = float(np.dot(q, r))
    num = sqr - sq * sr / n
    den = math.sqrt(max(sqq - sq * sq / n, 0.0) * max(srr - sr * sr / n, 0.0))
    if den <= 0.0:
        return 0.0
    return num / den


def _cross_all_shifts(query, reference, d_max):
    """Row-aligned cross-correlation sums for every shift in [-d_max, d_max]."""
    w = query.shape[1]
    nfft = 1
    while nfft < 2 * w:
        nfft *= 2
    fq = np.fft.rfft(query, nfft, axis=1)
    fr = np.fft.rfft(reference, nfft, axis=1)
    cc = np.fft.irfft(np.sum(np.conj(fq) * fr, axis=0), nfft)
    d = np.arange(-d_max, d_max + 1)
    return cc[d % nfft]


def ncc_offset(query, reference, d_max: int):
    """Integer horizontal shift maximising the overlap NCC, and its peak value.

    Shifts run over [-d_max, d_max]; ties break toward the smaller magnitude
    (and toward the negative shift between equal magnitudes). The winning few
    candidates are re-evaluated with exact sums so the returned peak value is
    free of FFT rounding.
    """
    q = np.asarray(query, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if q.shape != r.shape:
        raise ValueError("query and reference must share dimensions")
    h, w = q.shape
    if not (0 < d_max < w):
        raise ValueError("search range must be positive and below the width")

    shifts = np.arange(-d_max, d_max + 1)
    cross = _cross_all_shifts(q, r, d_max)
    qc = np.concatenate([[0.0], np.cumsum(q.sum(axis=0))])
    qc2 = np.concatenate([[0.0], np.cumsum((q * q).sum(axis=0))])
    rc = np.concatenate([[0.0], np.cumsum(r.sum(axis=0))])
    rc2 = np.concatenate([[0.0], np.cumsum((r * r).sum(axis=0))])

    qa = np.maximum(0, -shifts)
    qb = w - np.maximum(0, shifts)
    n = (qb - qa) * h
    sq, sq2 = _overlap_stats(q, qc, qc2, qa, qb)
    sr, sr2 = _overlap_stats(r, rc, rc2, qa + shifts, qb + shifts)
    num = cross - sq * sr / n
    var = np.maximum(sq2 - sq * sq / n, 0.0) * np.maximum(sr2 - sr * sr / n, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(var > 0.0, num / np.sqrt(var), 0.0)

    # re-rank near-peak candidates exactly, smaller |shift| first
    best = np.max(rho)
    cand = shifts[rho >= best - 1e-9]
    cand = sorted(cand, key=lambda d: (abs(d), d))
    best_d, best_rho = cand[0], -2.0
    for d in cand[:8]:
        val = _zncc_at(q, r, int(d))
        if val > best_rho + 1e-12:
            best_d, best_rho = int(d), val
    return best_d, best_rho


def orientation_correction(offset_px: int, gains: PlannerGains,
                           width: int = IMG_W) -> float:
    """Pixel offset to a gain-weighted heading nudge via the horizontal FOV."""
    if abs(offset_px) > gains.d_search:
        raise ValueError("offset outside the configured search range")
    return gains.k_theta * offset_px * (gains.fov / width)


@dataclass
class Keyframe:
    pose: tuple                   # odometry (x, y, theta) at record time
    image: np.ndarray             # patch-normalized float64
    raw_image: np.ndarray         # stored uint8 rendering
    index: int

    def __post_init__(self):
        if self.image.shape != (IMG_H, IMG_W):
            raise ValueError(f"keyframe {self.index}: image must be {IMG_H}x{IMG_W}")


@dataclass
class TeachMap:
    """Ordered keyframes with their cumulative odometry arc-length."""

    keyframes: list
    dist_threshold: float = 0.1
    angle_threshold: float = math.radians(5.0)
    arc_lengths: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if len(self.arc_lengths) != len(self.keyframes):
            raise ValueError("one arc-length per keyframe required")
        if len(self.keyframes) > 1:
            diffs = np.diff(self.arc_lengths)
            if np.any(diffs <= 0.0):
                raise ValueError("arc-length must be strictly increasing")
            for a, b in zip(self.keyframes[:-1], self.keyframes[1:]):
                d = math.hypot(b.pose[0] - a.pose[0], b.pose[1] - a.pose[1])
                rot = abs(wrap_angle(b.pose[2] - a.pose[2]))
                if (d < self.dist_threshold - 1e-9
                        and rot < self.angle_threshold - 1e-9):
                    raise ValueError(
                        f"keyframes {a.index} and {b.index} violate the "
                        "recording separation rule")

    def __len__(self):
        return len(self.keyframes)

    @property
    def total_length(self) -> float:
        return float(self.arc_lengths[-1]) if len(self.keyframes) else 0.0

    def index_at(self, progress: float) -> int:
        """Keyframe whose arc-length is nearest below-or-at the progress."""
        i = int(np.searchsorted(self.arc_lengths, progress, side="right")) - 1
        return min(max(i, 0), len(self.keyframes) - 1)

    def nearest_index(self, progress: float) -> int:
        """Keyframe closest in arc-length to the progress."""
        i = self.index_at(progress)
        if (i + 1 < len(self.keyframes)
                and self.arc_lengths[i + 1] - progress < progress - self.arc_lengths[i]):
            return i + 1
        return i

    def local_spacing(self, index: int) -> float:
        if len(self.keyframes) < 2:
            return self.dist_threshold
        i = min(max(index, 0), len(self.keyframes) - 2)
        return float(self.arc_lengths[i + 1] - self.arc_lengths[i])


def should_record(current_pose, last_pose, dist_threshold: float,
                  angle_threshold: float) -> bool:
    """True once the pose moved or turned past either recording threshold."""
    d = math.hypot(current_pose[0] - last_pose[0], current_pose[1] - last_pose[1])
    rot = abs(wrap_angle(current_pose[2] - last_pose[2]))
    return d >= dist_threshold or rot >= angle_threshold


def along_path_correction(query, tmap: TeachMap, current_index: int,
                          gains: PlannerGains):
    """Sub-keyframe along-path offset from a three-keyframe correlation window.

    The peak NCC values against keyframes {i-1, i, i+1} are fitted with a
    parabola; its vertex gives a fractional index offset which scales to
    metres by the local keyframe spacing. At the map ends the missing
    neighbour is mirrored, which biases the vertex toward the interior.
    Returns (delta_s, rho) with rho the strongest of the three peaks.
    """
    n = len(tmap)
    if not (0 <= current_index < n):
        raise ValueError("keyframe index out of range")
    rhos = {}
    for j in (current_index - 1, current_index, current_index + 1):
        if 0 <= j < n:
            _, rhos[j] = ncc_offset(query, tmap.keyframes[j].image, gains.d_search)
    frac = _window_vertex(rhos, current_index)
    delta_s = gains.k_s * frac * tmap.local_spacing(current_index)
    return delta_s, max(rhos.values())


def _window_vertex(rhos: dict, center: int) -> float:
    """Fractional index offset from up to three peak correlations.

    Full windows use the parabola vertex; at the map ends the offset is a
    half-step nudge toward the stronger available neighbour, and zero when the
    centre keyframe already wins.
    """
    r0 = rhos[center]
    rm = rhos.get(center - 1)
    rp = rhos.get(center + 1)
    if rm is not None and rp is not None:
        denom = rm - 2.0 * r0 + rp
        if denom < -1e-12:
            return min(max(0.5 * (rm - rp) / denom, -1.0), 1.0)
        vals = {-1: rm, 0: r0, 1: rp}
        return float(max(vals, key=vals.get))
    if rp is not None:
        return 0.5 if rp > r0 else 0.0
    if rm is not None:
        return -0.5 if rm > r0 else 0.0
    return 0.0


def apply_correction(estimate: PoseEstimate, correction: Correction,
                     gains: PlannerGains) -> PoseEstimate:
    """Gated incremental update of the pose estimate.

    Corrections whose confidence falls below the noise threshold never touch
    the estimate. delta_theta arrives already gain-weighted (k_p and k_theta
    share one value in the hyperparameter table and the gain is applied once,
    at the pixel-to-angle conversion).
    """
    if correction.rho < gains.rho_bar:
        return PoseEstimate(estimate.x, estimate.y, estimate.theta,
                            estimate.progress)
    return PoseEstimate(estimate.x, estimate.y,
                        wrap_angle(estimate.theta + correction.delta_theta),
                        estimate.progress + correction.delta_s)


@dataclass(frozen=True)
class SpeedProfile:
    """Trapezoidal commanded speed over arc-length, zero at the exact endpoints.

    Inside the path a creep floor keeps the reference moving so the ramp tails
    cannot stall the repeat loop.
    """

    v_max: float
    ramp: float = 0.75
    total_length: float = 1.0
    v_min: float = 0.05

    def _trapezoid(self, s: float) -> float:
        head = s / self.ramp
        tail = (self.total_length - s) / self.ramp
        return self.v_max * min(max(min(head, tail), 0.0), 1.0)

    def speed(self, s: float) -> float:
        if s <= 0.0 or s >= self.total_length:
            return 0.0
        return max(self._trapezoid(s), min(self.v_min, self.v_max))

    def slope(self, s: float) -> float:
        """dv/ds at s (0 on the plateau and on the creep floor)."""
        if self._trapezoid(s) <= min(self.v_min, self.v_max):
            return 0.0
        head = s / self.ramp
        tail = (self.total_length - s) / self.ramp
        if 0.0 < head < 1.0 and head < tail:
            return self.v_max / self.ramp
        if 0.0 < tail < 1.0 and tail <= head:
            return -self.v_max / self.ramp
        return 0.0


def _segment_cache(tmap: TeachMap):
    cache = getattr(tmap, "_segment_cache", None)
    if cache is None:
        s = tmap.arc_lengths
        poses = np.array([kf.pose for kf in tmap.keyframes])
        dth = np.array([wrap_angle(b - a)
                        for a, b in zip(poses[:-1, 2], poses[1:, 2])])
        ds = np.diff(s)
        slopes = dth / ds                      # heading change per metre, per segment
        mids = 0.5 * (s[:-1] + s[1:])
        # slope-of-slope via central differences over adjacent segments
        dslope = np.zeros_like(slopes)
        if len(slopes) > 2:
            dslope[1:-1] = (slopes[2:] - slopes[:-2]) / (mids[2:] - mids[:-2])
            dslope[0] = (slopes[1] - slopes[0]) / (mids[1] - mids[0])
            dslope[-1] = (slopes[-1] - slopes[-2]) / (mids[-1] - mids[-2])
        cache = (s, poses, slopes, dslope)
        tmap._segment_cache = cache
    return cache


def reference_lookup(tmap: TeachMap, progress: float, profile: SpeedProfile):
    """Controller reference interpolated from the teach map at an arc-length.

    Pose is linear between the bracketing keyframes (heading via the shortest
    arc); the desired yaw rate is the segment heading slope times the
    commanded speed; the time derivatives combine the speed-profile slope with
    the slope differences across adjacent segments.
    """
    from .smc import Reference

    s, poses, slopes, dslope = _segment_cache(tmap)
    if not (-1e-9 <= progress <= tmap.total_length + 1e-9):
        raise ValueError(f"progress {progress} outside [0, {tmap.total_length}]")
    progress = min(max(progress, 0.0), tmap.total_length)
    if len(tmap) < 2:
        p = tmap.keyframes[0].pose
        return Reference(x=p[0], y=p[1], theta=p[2])
    i = min(int(np.searchsorted(s, progress, side="right")) - 1, len(s) - 2)
    i = max(i, 0)
    f = (progress - s[i]) / (s[i + 1] - s[i])
    x = poses[i, 0] + f * (poses[i + 1, 0] - poses[i, 0])
    y = poses[i, 1] + f * (poses[i + 1, 1] - poses[i, 1])
    th = wrap_angle(poses[i, 2] + f * wrap_angle(poses[i + 1, 2] - poses[i, 2]))

    v = profile.speed(progress)
    dv = profile.slope(progress)
    omega = slopes[i] * v
    v_dot = dv * v
    omega_dot = dslope[i] * v * v + slopes[i] * v_dot
    return Reference(x=x, y=y, theta=th, v_x=v, omega=omega,
                     v_x_dot=v_dot, omega_dot=omega_dot)


class KeyframeMatcher:
    """NCC against a fixed map with cached keyframe transforms.

    Produces the same offsets and peak values as ncc_offset, amortising the
    reference-side FFTs and column sums across the repeat run.
    """

    def __init__(self, tmap: TeachMap, d_search: int):
        self.tmap = tmap
        self.d = d_search
        w = IMG_W
        self.nfft = 1
        while self.nfft < 2 * w:
            self.nfft *= 2
        self.shifts = np.arange(-d_search, d_search + 1)
        self._order = np.lexsort((self.shifts, np.abs(self.shifts)))
        self._fr, self._rc, self._rc2 = [], [], []
        for kf in tmap.keyframes:
            r = kf.image
            self._fr.append(np.fft.rfft(r, self.nfft, axis=1))
            self._rc.append(np.concatenate([[0.0], np.cumsum(r.sum(axis=0))]))
            self._rc2.append(np.concatenate([[0.0], np.cumsum((r * r).sum(axis=0))]))

    def _rho_all(self, fq, qc, qc2, index, query):
        w = IMG_W
        h = IMG_H
        cc = np.fft.irfft(np.sum(np.conj(fq) * self._fr[index], axis=0), self.nfft)
        cross = cc[self.shifts % self.nfft]
        qa = np.maximum(0, -self.shifts)
        qb = w - np.maximum(0, self.shifts)
        n = (qb - qa) * h
        sq, sq2 = qc[qb] - qc[qa], qc2[qb] - qc2[qa]
        ra, rb = qa + self.shifts, qb + self.shifts
        sr = self._rc[index][rb] - self._rc[index][ra]
        sr2 = self._rc2[index][rb] - self._rc2[index][ra]
        num = cross - sq * sr / n
        var = np.maximum(sq2 - sq * sq / n, 0.0) * np.maximum(sr2 - sr * sr / n, 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(var > 0.0, num / np.sqrt(var), 0.0)

    def _peak(self, rho, query, index):
        best = np.max(rho)
        cand = self.shifts[rho >= best - 1e-9]
        cand = sorted(cand, key=lambda d: (abs(d), d))
        best_d, best_rho = cand[0], -2.0
        ref = self.tmap.keyframes[index].image
        for d in cand[:8]:
            val = _zncc_at(query, ref, int(d))
            if val > best_rho + 1e-12:
                best_d, best_rho = int(d), val
        return best_d, best_rho

    def match(self, query, index: int, gains: PlannerGains):
        """(offset_px, rho) at the indexed keyframe plus the window's (delta_s, rho_s)."""
        q = np.asarray(query, dtype=np.float64)
        fq = np.fft.rfft(q, self.nfft, axis=1)
        qc = np.concatenate([[0.0], np.cumsum(q.sum(axis=0))])
        qc2 = np.concatenate([[0.0], np.cumsum((q * q).sum(axis=0))])
        n = len(self.tmap)
        rhos = {}
        center = None
        for j in (index - 1, index, index + 1):
            if not (0 <= j < n):
                continue
            rho_all = self._rho_all(fq, qc, qc2, j, q)
            d, rho = self._peak(rho_all, q, j)
            rhos[j] = rho
            if j == index:
                center = (d, rho)
        frac = _window_vertex(rhos, index)
        delta_s = gains.k_s * frac * self.tmap.local_spacing(index)
        return center[0], center[1], delta_s, max(rhos.values())


# ---------------------------------------------------------------------------
# persistence: poses.csv + per-keyframe binary PGM files + manifest
# ---------------------------------------------------------------------------

def persist_teach_map(tmap: TeachMap, location):
    """Write a map directory: manifest, full-precision poses, raw PGM images."""
    if len(tmap) == 0:
        raise ValueError("refusing to persist an empty teach map")
    os.makedirs(location, exist_ok=True)
    write_kv(os.path.join(location, "manifest.txt"), {
        "dist_threshold": tmap.dist_threshold,
        "angle_threshold": tmap.angle_threshold,
        "width": IMG_W, "height": IMG_H,
        "count": len(tmap),
    }, header="teach map manifest")
    with open(os.path.join(location, "poses.csv"), "w") as fh:
        fh.write("index,x,y,theta,arc_length\n")
        for kf, s in zip(tmap.keyframes, tmap.arc_lengths):
            fh.write(f"{kf.index},{kf.pose[0]!r},{kf.pose[1]!r},"
                     f"{kf.pose[2]!r},{s!r}\n")
    for kf in tmap.keyframes:
        _write_pgm(os.path.join(location, f"{kf.index:06d}.pgm"), kf.raw_image)


def load_teach_map(location) -> TeachMap:
    manifest = load_kv(os.path.join(location, "manifest.txt"))
    count = int(manifest["count"])
    keyframes, arcs = [], []
    with open(os.path.join(location, "poses.csv")) as fh:
        header = fh.readline()
        if header.strip() != "index,x,y,theta,arc_length":
            raise ValueError("poses.csv: unexpected header")
        for line in fh:
            idx_s, x, y, th, s = line.strip().split(",")
            idx = int(idx_s)
            path = os.path.join(location, f"{idx:06d}.pgm")
            try:
                raw = _read_pgm(path)
            except FileNotFoundError:
                raise FileNotFoundError(f"keyframe {idx}: missing image {path}")
            except ValueError as e:
                raise ValueError(f"keyframe {idx}: {e}")
            keyframes.append(Keyframe(pose=(float(x), float(y), float(th)),
                                      image=patch_normalize(raw),
                                      raw_image=raw, index=idx))
            arcs.append(float(s))
    if len(keyframes) != count:
        raise ValueError(f"manifest promises {count} keyframes, "
                         f"poses.csv holds {len(keyframes)}")
    return TeachMap(keyframes=keyframes,
                    dist_threshold=float(manifest["dist_threshold"]),
                    angle_threshold=float(manifest["angle_threshold"]),
                    arc_lengths=np.asarray(arcs))


def _write_pgm(path, img: np.ndarray):
    arr = np.asarray(img, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(arr.tobytes())


def _read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ValueError("not a binary PGM file")
    w, h, maxval = int(m.group(1)), int(m.group(2)), int(m.group(3))
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    pixels = data[m.end():]
    if len(pixels) != w * h:
        raise ValueError(f"truncated image payload ({len(pixels)} of {w * h} bytes)")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
