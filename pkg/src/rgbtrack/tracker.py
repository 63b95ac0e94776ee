"""Per-sequence inference loop with a score-gated dynamic template.

Boxes in frame coordinates are ``(x, y, w, h)`` pixels, top-left origin.
Boxes inside a crop are ``(cx, cy, w, h)`` normalised to the crop side.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class CropWindow:
    """A square window of the frame: centre and side length in pixels."""

    cx: float
    cy: float
    side: float

    def to_crop(self, box):
        """Frame ``(x, y, w, h)`` -> normalised ``(cx, cy, w, h)`` inside this window."""
        x, y, w, h = (float(v) for v in box)
        x0, y0 = self.cx - self.side / 2, self.cy - self.side / 2
        return np.array([(x + w / 2 - x0) / self.side, (y + h / 2 - y0) / self.side,
                         w / self.side, h / self.side])

    def to_frame(self, box):
        """Inverse of :meth:`to_crop`."""
        cx, cy, w, h = (float(v) for v in box)
        x0, y0 = self.cx - self.side / 2, self.cy - self.side / 2
        fw, fh = w * self.side, h * self.side
        return np.array([x0 + cx * self.side - fw / 2, y0 + cy * self.side - fh / 2, fw, fh])


def window_around(box, factor):
    x, y, w, h = (float(v) for v in box)
    return CropWindow(x + w / 2, y + h / 2, factor * math.sqrt(w * h))


def crop_square(image, window, out_size):
    """Resample ``window`` of ``image`` to ``out_size`` pixels square.

    Pixel centres sit at half-integer continuous coordinates in both the frame
    and the crop. Area outside the frame takes the per-channel image mean.
    """
    image = np.asarray(image)
    s = out_size / window.side
    # continuous: u = (x - x0) * s; cv2 works in integer-centre coordinates
    x0, y0 = window.cx - window.side / 2, window.cy - window.side / 2
    m = np.array([[s, 0.0, (0.5 - x0) * s - 0.5],
                  [0.0, s, (0.5 - y0) * s - 0.5]])
    if image.ndim == 3:
        fill = tuple(float(v) for v in image.reshape(-1, image.shape[-1]).mean(axis=0))
    else:
        fill = float(image.mean())
    flags = cv2.INTER_LINEAR if s >= 1 else cv2.INTER_AREA
    return cv2.warpAffine(image, m, (out_size, out_size), flags=flags,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=fill)


def clamp_box(box, width, height, min_size=1.0):
    """Keep the centre inside the frame and the extent in ``[min_size, frame]``."""
    x, y, w, h = (float(v) for v in box)
    if not np.all(np.isfinite([x, y, w, h])):
        x, y, w, h = width / 2 - min_size, height / 2 - min_size, 2 * min_size, 2 * min_size
    w = min(max(w, min_size), float(width))
    h = min(max(h, min_size), float(height))
    cx = min(max(x + w / 2, 0.0), float(width))
    cy = min(max(y + h / 2, 0.0), float(height))
    return np.array([cx - w / 2, cy - h / 2, w, h])


@dataclass
class TrackerState:
    static_rgb: np.ndarray
    static_tir: np.ndarray
    dynamic_rgb: np.ndarray
    dynamic_tir: np.ndarray
    last_box: np.ndarray
    frame_idx: int = 0
    last_score: float = float("nan")


class Tracker:
    """Wraps anything with ``predict(rgb_triplet, tir_triplet) -> (box, score)``.

    ``rgb_triplet`` is (static, dynamic, search) crops; the returned box is
    normalised to the search crop.
    """

    def __init__(self, model, template_size=128, search_size=256, template_factor=2.0,
                 search_factor=4.0, update_threshold=0.65):
        self.model = model
        self.template_size = template_size
        self.search_size = search_size
        self.template_factor = template_factor
        self.search_factor = search_factor
        self.update_threshold = update_threshold

    @classmethod
    def from_model(cls, model):
        c = model.cfg
        return cls(model, c.template_size, c.search_size, c.template_factor,
                   c.search_factor, c.update_threshold)

    def _templates(self, rgb, tir, box):
        win = window_around(box, self.template_factor)
        return crop_square(rgb, win, self.template_size), crop_square(tir, win, self.template_size)

    def init(self, frame_rgb, frame_tir, box):
        box = np.asarray(box, dtype=np.float64)
        h, w = frame_rgb.shape[:2]
        x, y, bw, bh = box
        if (box.shape != (4,) or not np.all(np.isfinite(box)) or bw <= 0 or bh <= 0
                or x < 0 or y < 0 or x + bw > w or y + bh > h):
            raise DataError(f"initial box {box.tolist()} is not inside the {w}x{h} frame")
        z_rgb, z_tir = self._templates(frame_rgb, frame_tir, box)
        return TrackerState(z_rgb, z_tir, z_rgb.copy(), z_tir.copy(), box.copy())

    def track(self, state, frame_rgb, frame_tir):
        """Advance one frame; mutates ``state`` and returns ``(box, score)``."""
        win = window_around(state.last_box, self.search_factor)
        x_rgb = crop_square(frame_rgb, win, self.search_size)
        x_tir = crop_square(frame_tir, win, self.search_size)
        rel, score = self.model.predict((state.static_rgb, state.dynamic_rgb, x_rgb),
                                        (state.static_tir, state.dynamic_tir, x_tir))
        h, w = frame_rgb.shape[:2]
        box = clamp_box(win.to_frame(rel), w, h)
        state.last_box = box
        state.last_score = float(score)
        state.frame_idx += 1
        if score >= self.update_threshold:
            state.dynamic_rgb, state.dynamic_tir = self._templates(frame_rgb, frame_tir, box)
        return box.copy(), float(score)

    def run(self, sequence):
        """Track a whole :class:`~rgbtrack.synth.Sequence`; frame 0 gets the gt box."""
        rgb, tir = sequence.frame(0)
        state = self.init(rgb, tir, sequence.gt[0])
        boxes = [sequence.gt[0].copy()]
        for i in range(1, len(sequence)):
            rgb, tir = sequence.frame(i)
            boxes.append(self.track(state, rgb, tir)[0])
        return np.array(boxes)
