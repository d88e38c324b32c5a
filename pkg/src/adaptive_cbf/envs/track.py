"""Closed race tracks: centerline geometry and Frenet projection.

The centerline is a periodic cubic spline through the samples, parameterised
by the samples' arc length. Using a smooth curve (rather than the raw
polyline) keeps the Frenet map invertible inside the track strip, so
``project(to_cartesian(s, e)) == (s, e)`` to solver precision.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

CSV_HEADER = ("s", "x", "y", "psi_c", "k_c", "half_width")


class Track:
    def __init__(self, x, y, half_width, s=None):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.shape != y.shape or x.ndim != 1 or x.size < 4:
            raise ValueError("need at least four centerline samples")
        if s is None:
            seg = np.hypot(np.diff(np.append(x, x[0])), np.diff(np.append(y, y[0])))
            s = np.concatenate([[0.0], np.cumsum(seg[:-1])])
            length = float(np.sum(seg))
        else:
            s = np.asarray(s, dtype=np.float64)
            closing = float(np.hypot(x[0] - x[-1], y[0] - y[-1]))
            length = float(s[-1] + closing)
        if np.any(np.diff(s) <= 0):
            raise ValueError("arc-length samples must be strictly increasing")
        self.s = s
        self.length = length
        self.half_widths = np.broadcast_to(np.asarray(half_width, dtype=np.float64), s.shape).copy()
        knots = np.append(s, length)
        pts = np.stack([np.append(x, x[0]), np.append(y, y[0])], axis=1)
        self._spline = CubicSpline(knots, pts, bc_type="periodic")
        self._d1 = self._spline.derivative(1)
        self._d2 = self._spline.derivative(2)
        self._hw_knots = knots
        self._hw_vals = np.append(self.half_widths, self.half_widths[0])
        self.x, self.y = x, y
        self.psi_c = self.heading(s)
        self.k_c = self.curvature(s)
        # dense lookup for the coarse projection search
        n_dense = max(int(np.ceil(length / 0.05)), 8 * s.size)
        self._dense_s = np.linspace(0.0, length, n_dense, endpoint=False)
        self._dense_xy = self._spline(self._dense_s)

    # --- constructors -------------------------------------------------

    @classmethod
    def oval(cls, straight: float = 30.0, radius: float = 8.0, half_width: float = 2.0, ds: float = 0.25):
        """Stadium track: two straights joined by semicircles, counter-clockwise."""
        length = 2 * straight + 2 * np.pi * radius
        n = int(np.ceil(length / ds))
        s = np.linspace(0.0, length, n, endpoint=False)
        x = np.empty(n)
        y = np.empty(n)
        arc = np.pi * radius
        for i, si in enumerate(s):
            if si < straight:
                x[i], y[i] = si, -radius
            elif si < straight + arc:
                th = -np.pi / 2 + (si - straight) / radius
                x[i], y[i] = straight + radius * np.cos(th), radius * np.sin(th)
            elif si < 2 * straight + arc:
                x[i], y[i] = straight - (si - straight - arc), radius
            else:
                th = np.pi / 2 + (si - 2 * straight - arc) / radius
                x[i], y[i] = radius * np.cos(th), radius * np.sin(th)
        return cls(x, y, half_width)

    @classmethod
    def circle(cls, radius: float, half_width: float = 2.0, ds: float = 0.1):
        n = int(np.ceil(2 * np.pi * radius / ds))
        th = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        return cls(radius * np.cos(th), radius * np.sin(th), half_width, s=radius * th)

    @classmethod
    def straight(cls, length: float = 200.0, half_width: float = 2.0, ds: float = 0.5):
        """A long, thin closed loop whose first half is the x-axis (for tests)."""
        return cls.oval(straight=length, radius=50.0, half_width=half_width, ds=ds)

    @classmethod
    def from_csv(cls, path) -> "Track":
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            missing = set(CSV_HEADER) - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"track CSV lacks columns {sorted(missing)}")
            rows = [{k: float(r[k]) for k in CSV_HEADER} for r in reader]
        arr = {k: np.array([r[k] for r in rows]) for k in CSV_HEADER}
        return cls(arr["x"], arr["y"], arr["half_width"], s=arr["s"])

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_HEADER)
            for row in zip(self.s, self.x, self.y, self.psi_c, self.k_c, self.half_widths):
                w.writerow([repr(float(v)) for v in row])

    # --- geometry -----------------------------------------------------

    def wrap(self, s):
        return np.mod(s, self.length)

    def position(self, s) -> np.ndarray:
        return self._spline(self.wrap(s))

    def heading(self, s):
        d = self._d1(self.wrap(s))
        return np.arctan2(d[..., 1], d[..., 0])

    def curvature(self, s):
        s = self.wrap(s)
        d1 = self._d1(s)
        d2 = self._d2(s)
        num = d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]
        return num / np.power(d1[..., 0] ** 2 + d1[..., 1] ** 2, 1.5)

    def half_width(self, s):
        return np.interp(self.wrap(s), self._hw_knots, self._hw_vals)

    def normal(self, s) -> np.ndarray:
        d = self._d1(self.wrap(s))
        n = np.stack([-d[..., 1], d[..., 0]], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def to_cartesian(self, s, e) -> np.ndarray:
        return self.position(s) + np.asarray(e)[..., None] * self.normal(s)

    def project(self, x: float, y: float, s_guess: float | None = None, iters: int = 8):
        """Nearest centerline point ``(s, e)``; ``e`` is positive to the left."""
        pt = np.array([x, y], dtype=np.float64)
        if s_guess is None:
            d2 = np.sum((self._dense_xy - pt) ** 2, axis=1)
            s = float(self._dense_s[int(np.argmin(d2))])
        else:
            s = float(self.wrap(s_guess))
        for _ in range(iters):
            p = self._spline(s)
            d1 = self._d1(s)
            d2 = self._d2(s)
            r = p - pt
            f = float(r @ d1)
            fp = float(d1 @ d1 + r @ d2)
            if fp <= 0:
                break
            step = f / fp
            s = float(self.wrap(s - step))
            if abs(step) < 1e-13:
                break
        if s_guess is not None:
            # guard against converging to a far branch from a poor guess
            p = self._spline(s)
            if np.hypot(*(p - pt)) > 2.0 * float(self.half_width(s)) + 1.0:
                return self.project(x, y, None, iters)
        d1 = self._d1(s)
        r = pt - self._spline(s)
        e = float((d1[0] * r[1] - d1[1] * r[0]) / np.hypot(d1[0], d1[1]))
        return s, e
