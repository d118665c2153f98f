"""Difference heatmaps and fidelity tables in analysis-grade formats.

Heatmaps are written as one CSV and one binary PGM per channel; signed
values map linearly onto 0..255 with zero at mid-gray 128.  Every emitted
file is a deterministic function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quantum import ProcessMatrix, fmt17


@dataclass
class Heatmap:
    re: np.ndarray
    im: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.re = np.asarray(self.re, dtype=float)
        self.im = np.asarray(self.im, dtype=float)
        if self.re.shape != self.im.shape:
            raise ValueError("channel shapes differ")
        if not (np.all(np.isfinite(self.re)) and np.all(np.isfinite(self.im))):
            raise ValueError("heatmap values must be finite")

    @property
    def value_range(self) -> tuple:
        lo = min(self.re.min(), self.im.min())
        hi = max(self.re.max(), self.im.max())
        return (float(lo), float(hi))

    def channels(self):
        return (("re", self.re), ("im", self.im))


def _as_chi(x) -> np.ndarray:
    return x.chi if isinstance(x, ProcessMatrix) else np.asarray(x, dtype=complex)


def diff_heatmap(a, b) -> Heatmap:
    """Channel-wise difference a - b, split into real and imaginary grids."""
    diff = _as_chi(a) - _as_chi(b)
    label_a = a.label if isinstance(a, ProcessMatrix) else "matrix"
    label_b = b.label if isinstance(b, ProcessMatrix) else "matrix"
    return Heatmap(re=diff.real, im=diff.imag, source=f"{label_a}-{label_b}")


def difference_symmetry_errors(a, b) -> tuple:
    """Max deviation of Re(a-b) from symmetry and Im(a-b) from antisymmetry.

    Both vanish whenever a and b are Hermitian; tomography tests assert
    this on every generated record.
    """
    h = diff_heatmap(a, b)
    sym = float(np.max(np.abs(h.re - h.re.T)))
    antisym = float(np.max(np.abs(h.im + h.im.T)))
    return sym, antisym


def _pgm_bytes(grid: np.ndarray) -> bytes:
    h, w = grid.shape
    vmax = float(np.max(np.abs(grid)))
    if vmax == 0.0:
        pixels = np.full(grid.shape, 128, dtype=np.uint8)
    else:
        pixels = np.clip(np.rint(255.0 * (grid + vmax) / (2.0 * vmax)), 0, 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_heatmap(h: Heatmap, stem) -> list:
    """Write ``{stem}_{re,im}.csv`` and ``{stem}_{re,im}.pgm``; returns the paths."""
    paths = []
    for name, grid in h.channels():
        csv_path = f"{stem}_{name}.csv"
        with open(csv_path, "w") as fh:
            for row in grid:
                fh.write(",".join(fmt17(v) for v in row) + "\n")
        paths.append(csv_path)
        pgm_path = f"{stem}_{name}.pgm"
        with open(pgm_path, "wb") as fh:
            fh.write(_pgm_bytes(grid))
        paths.append(pgm_path)
    return paths


def read_heatmap_csv(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])


# ---------------------------------------------------------------------------
# fidelity tables

@dataclass
class FidelityTable:
    phis: list  # radians, sorted
    methods: tuple
    mean: np.ndarray  # (len(phis), len(methods))
    std: np.ndarray
    count: np.ndarray

    def cell(self, phi: float, method: str) -> tuple:
        i = self.phis.index(phi)
        j = self.methods.index(method) if isinstance(self.methods, list) else list(self.methods).index(method)
        return float(self.mean[i, j]), float(self.std[i, j])

    def render_text(self) -> str:
        width = 19
        header = "phi_deg".ljust(9) + "".join(m.ljust(width) for m in self.methods)
        lines = [header]
        for i, phi in enumerate(self.phis):
            cells = "".join(
                f"{self.mean[i, j]:.3f} +- {self.std[i, j]:.3f}".ljust(width) for j in range(len(self.methods))
            )
            lines.append(f"{np.degrees(phi):7.1f}  " + cells)
        return "\n".join(lines) + "\n"

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            cols = ["phi_radians", "phi_degrees"]
            for m in self.methods:
                cols += [f"{m}_mean", f"{m}_std", f"{m}_n"]
            fh.write(",".join(cols) + "\n")
            for i, phi in enumerate(self.phis):
                cells = [fmt17(phi), fmt17(np.degrees(phi))]
                for j in range(len(self.methods)):
                    cells += [fmt17(self.mean[i, j]), fmt17(self.std[i, j]), str(int(self.count[i, j]))]
                fh.write(",".join(cells) + "\n")


def fidelity_table(entries, methods=("noisy", "mle", "denoised")) -> FidelityTable:
    """Aggregate (phi, method, fidelity) samples into mean +- sample std cells.

    Raises if any requested (phi, method) cell has no samples.
    """
    methods = tuple(methods)
    cells: dict = {}
    for phi, method, value in entries:
        if method in methods:
            cells.setdefault((float(phi), method), []).append(float(value))
    phis = sorted({phi for phi, _ in cells})
    if not phis:
        raise ValueError("no samples provided")
    mean = np.zeros((len(phis), len(methods)))
    std = np.zeros_like(mean)
    count = np.zeros_like(mean, dtype=int)
    for i, phi in enumerate(phis):
        for j, method in enumerate(methods):
            vals = cells.get((phi, method))
            if not vals:
                raise ValueError(f"empty cell phi={phi:.6g} method={method}")
            mean[i, j] = np.mean(vals)
            std[i, j] = np.std(vals, ddof=1) if len(vals) > 1 else 0.0
            count[i, j] = len(vals)
    return FidelityTable(phis=phis, methods=methods, mean=mean, std=std, count=count)
