"""Synthetic paired RGB/thermal sequences and OTB-style scoring.

On-disk layout of one sequence::

    <dir>/rgb/000001.ppm ...   binary P6
    <dir>/tir/000001.pgm ...   binary P5
    <dir>/groundtruth.txt      "x,y,w,h" per frame, pixels, top-left origin
    <dir>/meta.txt             key=value
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import ConfigError, DataError

ATTRIBUTES = (
    "occlusion", "low_illumination_rgb", "high_illumination_rgb", "thermal_crossover",
    "fast_motion", "scale_variation", "aspect_ratio_change",
)

SUITES = {
    "clean": (),
    "low_light": ("low_illumination_rgb",),
    "thermal_crossover": ("thermal_crossover",),
    "high_light": ("high_illumination_rgb",),
    "occlusion": ("occlusion",),
    "fast_motion": ("fast_motion",),
    "scale_variation": ("scale_variation", "aspect_ratio_change"),
}
MIXED_POOL = ("clean", "low_light", "thermal_crossover")


@dataclass
class SceneSpec:
    seed: int
    num_frames: int = 30
    frame_size: int = 256
    shape: str = "rect"
    size_range: tuple = (26.0, 44.0)
    speed: float = 2.0
    attributes: frozenset = field(default_factory=frozenset)
    clutter: float = 0.5

    def validate(self):
        if self.num_frames < 2:
            raise ConfigError(f"num_frames must be >= 2, got {self.num_frames}")
        if self.shape not in ("rect", "ellipse"):
            raise ConfigError(f"unknown target shape {self.shape!r}")
        bad = set(self.attributes) - set(ATTRIBUTES)
        if bad:
            raise ConfigError(f"unknown attributes: {sorted(bad)}")
        lo, hi = self.size_range
        if not 0 < lo <= hi or 3 * hi > self.frame_size:
            raise ConfigError(f"size_range {self.size_range} does not fit a {self.frame_size}px frame")
        if self.speed < 0 or not 0 <= self.clutter <= 1:
            raise ConfigError("speed must be >= 0 and clutter in [0, 1]")


# -- image io ----------------------------------------------------------------

def write_pnm(path, image):
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim == 3:
        header = b"P6\n%d %d\n255\n" % (image.shape[1], image.shape[0])
    else:
        header = b"P5\n%d %d\n255\n" % (image.shape[1], image.shape[0])
    with open(path, "wb") as f:
        f.write(header + image.tobytes())


def read_pnm(path):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise DataError(f"{path}: unsupported image format {magic!r}/{maxval}")
    ch = 3 if magic == b"P6" else 1
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * ch, offset=pos)
    return arr.reshape((h, w, 3) if ch == 3 else (h, w))


def format_box(box):
    return ",".join(f"{v:.4f}" for v in box)


def write_boxes(path, boxes):
    with open(path, "w") as f:
        for b in boxes:
            f.write(format_box(b) + "\n")


def read_boxes(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        parts = line.replace("\t", ",").replace(" ", ",").split(",")
        vals = [p for p in parts if p]
        if len(vals) != 4:
            raise DataError(f"{path}: expected 4 values per line, got {line!r}")
        rows.append([float(v) for v in vals])
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


# -- rendering -------------------------------------------------------------

def _smooth_field(rng, size, cells, lo, hi, channels):
    coarse = rng.uniform(lo, hi, size=(cells, cells, channels)).astype(np.float32)
    out = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
    return out.reshape(size, size, channels).astype(np.float64)


def _shape_mask(size, cx, cy, w, h, kind):
    """Anti-aliased coverage of a box-shaped target, [H, W] in [0, 1]."""
    ys = np.arange(size)[:, None] + 0.5
    xs = np.arange(size)[None, :] + 0.5
    if kind == "ellipse":
        d = np.sqrt(((xs - cx) / (w / 2)) ** 2 + ((ys - cy) / (h / 2)) ** 2)
        return np.clip((1.0 - d) * min(w, h) / 2 + 0.5, 0.0, 1.0)
    mx = np.clip(w / 2 - np.abs(xs - cx) + 0.5, 0.0, 1.0)
    my = np.clip(h / 2 - np.abs(ys - cy) + 0.5, 0.0, 1.0)
    return mx * my


def _trajectory(spec, rng):
    n, size = spec.num_frames, spec.frame_size
    lo, hi = spec.size_range
    base = rng.uniform(lo, hi)
    aspect0 = rng.uniform(0.75, 1.33)
    t = np.arange(n)
    phase = rng.uniform(0, 2 * np.pi)
    scale = np.ones(n)
    if "scale_variation" in spec.attributes:
        scale = scale + 0.35 * np.sin(2 * np.pi * t / max(n, 8) + phase)
    aspect = np.full(n, aspect0)
    if "aspect_ratio_change" in spec.attributes:
        aspect = aspect * (1.0 + 0.4 * np.sin(2 * np.pi * t / max(n, 8) * 0.7 + phase))
    ws = base * scale * np.sqrt(aspect)
    hs = base * scale / np.sqrt(aspect)
    speed = spec.speed * (4.0 if "fast_motion" in spec.attributes else 1.0)
    margin = 0.75 * hi * 1.4
    pos = rng.uniform(margin, size - margin, size=2)
    ang = rng.uniform(0, 2 * np.pi)
    vel = speed * np.array([math.cos(ang), math.sin(ang)])
    centres = np.zeros((n, 2))
    for i in range(n):
        centres[i] = pos
        vel = vel + rng.normal(0.0, 0.15 * max(speed, 0.5), size=2)
        norm = np.hypot(*vel)
        if norm > 0:
            vel = vel * (speed / norm)
        pos = pos + vel
        for k in range(2):
            lim_lo = (ws[i] if k == 0 else hs[i]) / 2 + 2
            lim_hi = size - lim_lo
            if pos[k] < lim_lo or pos[k] > lim_hi:
                vel[k] = -vel[k]
                pos[k] = min(max(pos[k], lim_lo), lim_hi)
    return centres, ws, hs


def region_contrast(image, box):
    """Largest per-channel |mean(target box) - mean(surrounding ring)|, over 255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    h, w = img.shape[:2]
    x, y, bw, bh = box
    x0, y0 = int(round(x)), int(round(y))
    x1, y1 = int(round(x + bw)), int(round(y + bh))
    pad = int(round(0.5 * max(bw, bh)))
    inner = np.zeros((h, w), dtype=bool)
    inner[max(y0, 0):max(y1, 0), max(x0, 0):max(x1, 0)] = True
    outer = np.zeros((h, w), dtype=bool)
    outer[max(y0 - pad, 0):max(y1 + pad, 0), max(x0 - pad, 0):max(x1 + pad, 0)] = True
    ring = outer & ~inner
    if not inner.any() or not ring.any():
        return 0.0
    diff = np.abs(img[inner].mean(axis=0) - img[ring].mean(axis=0))
    return float(diff.max() / 255.0)


def render(spec):
    """Render a sequence in memory: (rgb [T,H,W,3] uint8, tir [T,H,W] uint8, gt [T,4])."""
    spec.validate()
    rng = np.random.Generator(np.random.Philox(int(spec.seed)))
    attrs = set(spec.attributes)
    size, n = spec.frame_size, spec.num_frames

    bg_rgb = _smooth_field(rng, size, 6, 40, 170, 3)
    bg_tir = _smooth_field(rng, size, 5, 55, 105, 1)[..., 0]
    for _ in range(int(round(spec.clutter * 24))):
        cx, cy = rng.uniform(0, size, size=2)
        w, h = rng.uniform(8, 40, size=2)
        m = _shape_mask(size, cx, cy, w, h, "ellipse" if rng.random() < 0.5 else "rect")
        colour = rng.uniform(30, 190, size=3)
        bg_rgb = bg_rgb * (1 - m[..., None]) + colour * m[..., None]
        bg_tir = bg_tir * (1 - m) + rng.uniform(70, 135) * m

    stripe = rng.uniform(5.0, 9.0)
    target_temp = rng.uniform(205, 235)
    centres, ws, hs = _trajectory(spec, rng)

    # pick the target colouring that stands out most from the background
    # along the path, so the clean suite is visible in RGB every frame
    path = np.clip(np.rint(centres).astype(int), 0, size - 1)
    bg_path = bg_rgb[path[:, 1], path[:, 0]]
    best = None
    for hue in rng.uniform(0, 1, size=8):
        a = 255 * np.array(_hsv(hue, 0.95, 1.0))
        b = 255 * np.array(_hsv((hue + 0.5) % 1.0, 0.9, 0.55))
        gap = np.abs(bg_path - (a + b) / 2).max(axis=1).min()
        if best is None or gap > best[0]:
            best = (gap, a, b)
    _, col_a, col_b = best
    occ_lo, occ_hi = int(0.4 * n), int(0.6 * n)
    occ_col = rng.uniform(60, 120, size=3)

    rgb = np.empty((n, size, size, 3), dtype=np.uint8)
    tir = np.empty((n, size, size), dtype=np.uint8)
    gt = np.empty((n, 4))
    ys = np.arange(size)[:, None] + 0.5
    xs = np.arange(size)[None, :] + 0.5
    for i in range(n):
        cx, cy = centres[i]
        w, h = ws[i], hs[i]
        gt[i] = (cx - w / 2, cy - h / 2, w, h)
        m = _shape_mask(size, cx, cy, w, h, spec.shape)
        band = (np.floor(((xs - cx) + (ys - cy)) / stripe) % 2)[..., None]
        tex = col_a * (1 - band) + col_b * band
        frame = bg_rgb * (1 - m[..., None]) + tex * m[..., None]

        heat = target_temp - 25.0 * np.clip(((xs - cx) ** 2 + (ys - cy) ** 2) / (0.25 * (w * w + h * h)), 0, 1)
        if "thermal_crossover" in attrs:
            ring = (m < 0.01) & (np.abs(xs - cx) < w) & (np.abs(ys - cy) < h)
            heat = np.full_like(heat, bg_tir[ring].mean() if ring.any() else bg_tir.mean())
        therm = bg_tir * (1 - m) + heat * m

        if "occlusion" in attrs and occ_lo <= i < occ_hi:
            om = _shape_mask(size, cx + 0.3 * w, cy, 0.7 * w, 1.3 * h, "rect")
            frame = frame * (1 - om[..., None]) + occ_col * om[..., None]
            therm = therm * (1 - om) + 80.0 * om

        if "low_illumination_rgb" in attrs:
            frame = frame * 0.05 + 4.0
        elif "high_illumination_rgb" in attrs:
            frame = 255.0 - (255.0 - frame) * 0.12

        frame = frame + rng.normal(0.0, 3.0 if "low_illumination_rgb" not in attrs else 1.0, frame.shape)
        therm = therm + rng.normal(0.0, 2.0, therm.shape)
        rgb[i] = np.clip(np.rint(frame), 0, 255).astype(np.uint8)
        tir[i] = np.clip(np.rint(therm), 0, 255).astype(np.uint8)
    return rgb, tir, gt


def _hsv(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def generate(spec, out_dir):
    """Render ``spec`` and write it to ``out_dir``; returns the directory."""
    rgb, tir, gt = render(spec)
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "tir").mkdir(parents=True, exist_ok=True)
    for i in range(spec.num_frames):
        write_pnm(out / "rgb" / f"{i + 1:06d}.ppm", rgb[i])
        write_pnm(out / "tir" / f"{i + 1:06d}.pgm", tir[i])
    write_boxes(out / "groundtruth.txt", gt)
    meta = {
        "seed": spec.seed,
        "frames": spec.num_frames,
        "frame_size": spec.frame_size,
        "shape": spec.shape,
        "attributes": ",".join(sorted(spec.attributes)),
        "clutter": spec.clutter,
        "speed": spec.speed,
    }
    (out / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    return out


def suite_specs(suite, count, seed, num_frames=30, frame_size=256):
    """Deterministic specs for a named suite; ``mixed`` cycles clean/low-light/crossover."""
    if suite not in SUITES and suite != "mixed":
        raise ConfigError(f"unknown suite {suite!r}; known: {sorted(SUITES) + ['mixed']}")
    specs = []
    suite_id = sorted(list(SUITES) + ["mixed"]).index(suite)
    for i in range(count):
        ss = np.random.SeedSequence([int(seed), suite_id, i])
        s = int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
        rng = np.random.Generator(np.random.Philox(s))
        name = MIXED_POOL[i % len(MIXED_POOL)] if suite == "mixed" else suite
        specs.append(SceneSpec(
            seed=s, num_frames=num_frames, frame_size=frame_size,
            shape="rect" if rng.random() < 0.5 else "ellipse",
            size_range=tuple(float(v) for v in np.array([26.0, 44.0]) * frame_size / 256),
            speed=float(rng.uniform(1.0, 3.0)) * frame_size / 256,
            attributes=frozenset(SUITES[name]),
            clutter=float(rng.uniform(0.3, 0.7)),
        ))
    return specs


# -- sequences on disk -----------------------------------------------------

class Sequence:
    def __init__(self, path):
        self.path = Path(path)
        self.name = self.path.name
        gt_file = self.path / "groundtruth.txt"
        if not gt_file.exists():
            raise DataError(f"{self.path}: missing groundtruth.txt")
        self.gt = read_boxes(gt_file)
        self.rgb_files = sorted((self.path / "rgb").glob("*.ppm"))
        self.tir_files = sorted((self.path / "tir").glob("*.pgm"))
        if not (len(self.rgb_files) == len(self.tir_files) == len(self.gt)):
            raise DataError(
                f"{self.path}: frame counts differ (rgb={len(self.rgb_files)}, "
                f"tir={len(self.tir_files)}, gt={len(self.gt)})")
        self.meta = {}
        meta_file = self.path / "meta.txt"
        if meta_file.exists():
            for line in meta_file.read_text().splitlines():
                if "=" in line:
                    k, v = line.split("=", 1)
                    self.meta[k.strip()] = v.strip()

    def __len__(self):
        return len(self.gt)

    def frame(self, i):
        return read_pnm(self.rgb_files[i]), read_pnm(self.tir_files[i])


def find_sequences(root):
    """Every directory under ``root`` holding a groundtruth.txt, sorted by path."""
    root = Path(root)
    if not root.exists():
        raise DataError(f"no such directory: {root}")
    dirs = sorted({p.parent for p in root.rglob("groundtruth.txt")})
    return [Sequence(d) for d in dirs]


# -- evaluation ------------------------------------------------------------

SR_THRESHOLDS = np.linspace(0.0, 1.0, 21)


def iou_xywh(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    x1 = np.maximum(a[..., 0], b[..., 0])
    y1 = np.maximum(a[..., 1], b[..., 1])
    x2 = np.minimum(a[..., 0] + a[..., 2], b[..., 0] + b[..., 2])
    y2 = np.minimum(a[..., 1] + a[..., 3], b[..., 1] + b[..., 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def centre_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    ca = a[..., :2] + a[..., 2:] / 2
    cb = b[..., :2] + b[..., 2:] / 2
    return np.hypot(*(ca - cb).T)


def success_curve(ious):
    """Fraction of frames with overlap above each threshold.

    Zero overlap never counts as a success, so t=0 uses IoU > 0; the other
    thresholds use IoU >= t so an exact match counts at t=1.
    """
    ious = np.asarray(ious)
    return np.array([np.mean(ious > 0) if t == 0 else np.mean(ious >= t - 1e-12)
                     for t in SR_THRESHOLDS])


def sequence_metrics(results, gt, pr_px=20.0, npr_thr=0.1):
    results, gt = np.asarray(results), np.asarray(gt)
    if results.shape != gt.shape:
        raise DataError(f"result/ground-truth frame counts differ: {len(results)} vs {len(gt)}")
    ious = iou_xywh(results, gt)
    err = centre_error(results, gt)
    diag = np.hypot(gt[:, 2], gt[:, 3])
    return {
        "SR": float(success_curve(ious).mean()),
        "PR": float(np.mean(err <= pr_px)),
        "NPR": float(np.mean(err / diag <= npr_thr)),
        "mIoU": float(ious.mean()),
    }


@dataclass
class MetricsReport:
    rows: list  # (sequence, metrics dict)

    @property
    def overall(self):
        keys = ("SR", "PR", "NPR", "mIoU")
        if not self.rows:
            return {k: 0.0 for k in keys}
        return {k: float(np.mean([m[k] for _, m in self.rows])) for k in keys}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sequence", "SR", "PR", "NPR", "mIoU"])
        for name, m in self.rows + [("overall", self.overall)]:
            w.writerow([name] + [f"{m[k]:.6f}" for k in ("SR", "PR", "NPR", "mIoU")])
        return buf.getvalue()

    def to_table(self):
        rows = self.rows + [("overall", self.overall)]
        width = max([len("sequence")] + [len(n) for n, _ in rows])
        lines = [f"{'sequence':<{width}}  {'SR':>7}  {'PR':>7}  {'NPR':>7}  {'mIoU':>7}"]
        for name, m in rows:
            lines.append(f"{name:<{width}}  {m['SR']:7.4f}  {m['PR']:7.4f}  {m['NPR']:7.4f}"
                         f"  {m['mIoU']:7.4f}")
        return "\n".join(lines) + "\n"


def evaluate(results_dir, sequences, pr_px=20.0, npr_thr=0.1):
    """Score ``<results_dir>/<sequence name>.txt`` against each sequence's ground truth."""
    rows = []
    for seq in sequences:
        res_file = Path(results_dir) / f"{seq.name}.txt"
        if not res_file.exists():
            raise DataError(f"missing result file {res_file}")
        rows.append((seq.name, sequence_metrics(read_boxes(res_file), seq.gt, pr_px, npr_thr)))
    return MetricsReport(rows)


def write_report(report, out_dir, stem="metrics"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.csv").write_text(report.to_csv())
    (out / f"{stem}.txt").write_text(report.to_table())
    return out / f"{stem}.csv"

