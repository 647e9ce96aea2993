"""Metrics and report containers for sampled futures.

Prediction arrays are ``(B, N, H, C)``; a single case may be passed as
``(N, H, C)`` with truth ``(H, C)``.  Errors are mean squared errors over the
feature coordinates.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics

EPS = 1e-8


def _batched(preds, truth):
    preds = np.asarray(preds, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    single = preds.ndim == 3
    if single:
        preds, truth = preds[None], truth[None]
    if preds.ndim != 4 or truth.ndim != 3 or preds.shape[0] != truth.shape[0] \
            or preds.shape[2:] != truth.shape[1:]:
        raise ValueError(f"prediction shape {preds.shape} does not match truth {truth.shape}")
    return preds, truth


def step_errors(preds, truth) -> np.ndarray:
    """Per-sample per-step MSE, (B, N, H)."""
    preds, truth = _batched(preds, truth)
    return np.mean((preds - truth[:, None]) ** 2, axis=-1)


def per_step_error(preds, truth, reduce: str = "best_of") -> np.ndarray:
    """H per-step errors averaged over cases.

    ``best_of`` picks, per case, the sample with the lowest whole-sequence MSE
    and reports that sample's per-step errors; ``mean`` averages all samples.
    """
    err = step_errors(preds, truth)
    if reduce == "mean":
        return err.mean(axis=(0, 1))
    if reduce != "best_of":
        raise ValueError(f"unknown reduce {reduce!r}")
    j = np.argmin(err.mean(axis=2), axis=1)
    return err[np.arange(len(err)), j].mean(axis=0)


def psnr_analog(mse) -> np.ndarray:
    return -10.0 * np.log10(np.maximum(np.asarray(mse, dtype=np.float64), 1e-300))


def best_of_p_curve(preds, truth, P_list, trials: int = 4, seed: int = 0) -> dict:
    """Mean best-of-P sequence error from one pool of max(P) samples.

    Each trial shuffles the pool and scores every cyclic rotation of the
    shuffled order; the best-of-P subset is the first P entries.  Subsets are
    nested within a rotation, so the curve is exactly non-increasing, and
    averaging over rotations makes the P=1 point the mean single-sample error.
    """
    seq = step_errors(preds, truth).mean(axis=2)  # (B, N)
    B, n = seq.shape
    P_list = sorted(int(p) for p in P_list)
    if P_list[0] < 1 or P_list[-1] > n:
        raise ValueError(f"P values must lie in [1, {n}]")
    rng = np.random.default_rng([int(seed), 51])
    acc = {p: 0.0 for p in P_list}
    for _ in range(trials):
        perm = rng.permutation(n)
        for r in range(n):
            order = np.roll(perm, -r)
            run = np.minimum.accumulate(seq[:, order], axis=1)  # (B, n)
            for p in P_list:
                acc[p] += run[:, p - 1].mean()
    return {p: acc[p] / (trials * n) for p in P_list}


def case_covered(labels, reachable) -> bool:
    return set(reachable) <= set(int(x) for x in labels)


def mode_coverage(preds, anchors, reachable, M: int, H: int, n_modes: int,
                  margin: float | None = None) -> float:
    """Fraction of cases whose samples hit every reachable mode.

    ``preds`` are (B, N, H, 2) future positions, ``anchors`` (B, 2) the last
    context positions, ``reachable`` a list of mode tuples per case.
    """
    preds = np.asarray(preds, dtype=np.float64)
    if len(preds) == 0:
        raise ValueError("mode_coverage needs at least one case")
    hits = 0
    for P, a, modes in zip(preds, anchors, reachable):
        if any(m < 0 or m >= n_modes for m in modes):
            raise ValueError(f"unknown template in reachable set {modes}")
        tpl = dynamics.mode_templates(a, M, H, n_modes)
        labels = [dynamics.classify_template(p[:, :2], tpl, margin) for p in P]
        hits += case_covered(labels, modes)
    return hits / len(preds)


def mode_consistency(preds, anchors, labels, M: int, H: int, n_modes: int,
                     margin: float | None = None) -> float:
    """Fraction of all samples classified as the case's true mode."""
    preds = np.asarray(preds, dtype=np.float64)
    good = total = 0
    for P, a, lab in zip(preds, anchors, labels):
        tpl = dynamics.mode_templates(a, M, H, n_modes)
        good += sum(dynamics.classify_template(p[:, :2], tpl, margin) == lab for p in P)
        total += len(P)
    return good / total


def variance_match(preds, examples) -> float:
    """Mean over steps of ||V(preds_t) - V(ex_t)|| / (||V(ex_t)|| + eps), averaged over cases.

    ``preds`` (B, N, H, C) or (N, H, C); ``examples`` (B, K, H, C) or (K, H, C).
    """
    preds = np.asarray(preds, dtype=np.float64)
    examples = np.asarray(examples, dtype=np.float64)
    if preds.ndim == 3:
        preds, examples = preds[None], examples[None]
    if preds.shape[1] < 2 or examples.shape[1] < 2:
        raise ValueError("variance_match needs N, K >= 2")
    vp = preds.var(axis=1)
    ve = examples.var(axis=1)
    num = np.linalg.norm(vp - ve, axis=-1)
    den = np.linalg.norm(ve, axis=-1) + EPS
    return float(np.mean(num / den))


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    method: str
    per_step: list
    best_of_p: dict = field(default_factory=dict)
    mode_coverage: float | None = None
    variance_match: float | None = None
    config_hash: str = ""
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.per_step = [float(x) for x in self.per_step]
        self.best_of_p = {int(k): float(v) for k, v in self.best_of_p.items()}

    def to_json(self) -> str:
        d = asdict(self)
        d["best_of_p"] = {str(k): v for k, v in sorted(self.best_of_p.items())}
        return json.dumps(d, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "EvalReport":
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"missing artifact: {p}")
        return cls.from_json(p.read_text())


def curves_csv(reports: list[EvalReport]) -> str:
    """Per-step and best-of-P curves of several reports in long format."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "curve", "x", "error"])
    for r in reports:
        for t, e in enumerate(r.per_step, start=1):
            w.writerow([r.method, "per_step", t, repr(e)])
        for p, e in sorted(r.best_of_p.items()):
            w.writerow([r.method, "best_of_p", p, repr(e)])
    return buf.getvalue()


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_lines(series: dict, title: str = "", width: int = 420, height: int = 280,
              xlabel: str = "", ylabel: str = "") -> str:
    """Minimal SVG line plot of ``{name: (xs, ys)}``."""
    pad = 40
    xs = np.concatenate([np.asarray(v[0], float) for v in series.values()])
    ys = np.concatenate([np.asarray(v[1], float) for v in series.values()])
    x0, x1 = xs.min(), xs.max() if xs.max() > xs.min() else xs.min() + 1
    y0, y1 = 0.0, ys.max() * 1.05 if ys.max() > 0 else 1.0

    def px(x, y):
        return (pad + (x - x0) / (x1 - x0) * (width - 2 * pad),
                height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<text x="{width / 2}" y="16" text-anchor="middle" font-size="12">{title}</text>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="11">{xlabel}</text>',
           f'<text x="12" y="{height / 2}" font-size="11" transform="rotate(-90 12 {height / 2})" '
           f'text-anchor="middle">{ylabel}</text>',
           f'<text x="{pad - 4}" y="{pad}" text-anchor="end" font-size="9">{y1:.3g}</text>']
    for i, (name, (sx, sy)) in enumerate(series.items()):
        c = _COLORS[i % len(_COLORS)]
        pts = " ".join("%.1f,%.1f" % px(x, y) for x, y in zip(sx, sy))
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{width - pad}" y="{pad + 14 * i}" text-anchor="end" '
                   f'font-size="10" fill="{c}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
