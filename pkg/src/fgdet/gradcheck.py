"""Finite-difference checks for the analytic activation and box-loss gradients."""

import math
from dataclasses import dataclass, field

import numpy as np

from fgdet import activations, boxes
from fgdet.activations import ActivationKind
from fgdet.boxes import BoundingBox

ACTIVATION_KINDS = (
    ActivationKind("leaky_relu", 0.1),
    ActivationKind("swish"),
    ActivationKind("mish"),
    ActivationKind("hard_swish"),
)
BOX_LOSSES = ("giou", "diou", "ciou")

KINKS = {"leaky_relu": (0.0,), "hard_swish": (-3.0, 3.0)}


def central_difference(f, x, h):
    """Central difference gradient of scalar ``f`` at vector ``x``; ``h`` per coordinate."""
    x = np.asarray(x, dtype=np.float64)
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), x.shape)
    grad = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        grad[i] = (f(xp) - f(xm)) / (xp[i] - xm[i])
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    """``|a - n| / max(|a|, |n|, floor)``, element-wise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def random_box_pair(rng, margin):
    """Draw a (pred, gt) pair with no predicted edge within ``margin`` of a gt edge.

    Edges that nearly coincide put the finite-difference stencil across a kink
    of the min/max in the intersection and hull, so those draws are rejected.
    """
    while True:
        gt = BoundingBox(*rng.uniform(-2, 2, 2), *rng.uniform(0.2, 4, 2))
        pred = BoundingBox(*rng.uniform(-2, 2, 2), *rng.uniform(0.2, 4, 2))
        px = (pred.x1, pred.x2)
        gx = (gt.x1, gt.x2)
        py = (pred.y1, pred.y2)
        gy = (gt.y1, gt.y2)
        near = any(abs(a - b) < margin for a in px for b in gx) or any(
            abs(a - b) < margin for a in py for b in gy
        )
        if not near:
            return pred, gt


@dataclass
class CheckResult:
    name: str
    samples: int
    max_rel_err: float
    tolerance: float
    worst_input: object = None

    @property
    def passed(self):
        return self.samples > 0 and self.max_rel_err <= self.tolerance


def check_box_loss(kind, samples, rng, tol=1e-4, step=1e-5):
    """Compare ``boxes.GRADS[kind]`` with central differences on random pairs.

    The step is relative to the coordinate scale (1 for cx, cy; the extent for w, h).
    CIoU is differenced with alpha frozen at the base point, matching the analytic
    convention.
    """
    grad_fn = boxes.GRADS[kind]
    worst, worst_in = 0.0, None
    for _ in range(samples):
        pred, gt = random_box_pair(rng, margin=100 * step * 4)
        x0 = np.array([pred.cx, pred.cy, pred.w, pred.h])
        if kind == "ciou":
            alpha = boxes.ciou_alpha(pred, gt)

            def f(x):
                return boxes.ciou_loss(BoundingBox(*x), gt, alpha=alpha)

        else:
            loss = boxes.LOSSES[kind]

            def f(x):
                return loss(BoundingBox(*x), gt)

        h = step * np.array([1.0, 1.0, max(pred.w, 1.0), max(pred.h, 1.0)])
        num = central_difference(f, x0, h)
        err = float(relative_error(grad_fn(pred, gt), num, floor=1e-6).max())
        if err > worst:
            worst, worst_in = err, (pred, gt)
    return CheckResult(f"{kind}_loss", samples, worst, tol, worst_in)


def check_activation(kind, samples, rng, tol=1e-4, step=1e-5):
    """Compare ``activate_grad`` with central differences at points in [-10, 10]."""
    kind = ActivationKind.parse(kind)
    kinks = KINKS.get(kind.name, ())
    xs = []
    while len(xs) < samples:
        x = rng.uniform(-10, 10)
        if all(abs(x - k) > 10 * step for k in kinks):
            xs.append(x)
    xs = np.array(xs)
    num = (activations.activate(kind, xs + step) - activations.activate(kind, xs - step)) / (
        2 * step
    )
    err = relative_error(activations.activate_grad(kind, xs), num, floor=1e-6)
    i = int(np.argmax(err)) if samples else 0
    worst = float(err[i]) if samples else 0.0
    return CheckResult(str(kind), samples, worst, tol, float(xs[i]) if samples else None)


@dataclass
class GradcheckReport:
    seed: int
    samples: int
    results: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    @property
    def max_rel_err(self):
        return max((r.max_rel_err for r in self.results), default=0.0)

    def to_dict(self):
        return {
            "seed": self.seed,
            "samples": self.samples,
            "passed": self.passed,
            "max_rel_err": self.max_rel_err,
            "checks": [
                {
                    "name": r.name,
                    "samples": r.samples,
                    "max_rel_err": r.max_rel_err,
                    "tolerance": r.tolerance,
                    "passed": r.passed,
                }
                for r in self.results
            ],
        }

    def to_text(self):
        lines = [f"gradcheck seed={self.seed} samples={self.samples}"]
        for r in self.results:
            flag = "PASS" if r.passed else "FAIL"
            lines.append(f"  {flag}  {r.name:<18} max rel err {r.max_rel_err:.3e} (tol {r.tolerance:g})")
        lines.append(f"worst relative error: {self.max_rel_err:.3e}")
        return "\n".join(lines)


def run_gradcheck(samples=1000, seed=0, tol=1e-4):
    """Run every activation and box-loss check with ``samples`` draws each."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if not math.isfinite(tol) or tol <= 0:
        raise ValueError("tolerance must be positive")
    rng = np.random.default_rng(seed)
    report = GradcheckReport(seed, samples)
    for kind in ACTIVATION_KINDS:
        report.results.append(check_activation(kind, samples, rng, tol))
    for kind in BOX_LOSSES:
        report.results.append(check_box_loss(kind, samples, rng, tol))
    return report
