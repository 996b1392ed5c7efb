"""Element-wise activations and their analytic derivatives.

All functions accept Python scalars or numpy arrays. Scalars in, floats out.
"""

import math
from dataclasses import dataclass

import numpy as np

KINDS = ("leaky_relu", "swish", "mish", "hard_swish", "linear")

_ALIASES = {
    "leaky": "leaky_relu",
    "leakyrelu": "leaky_relu",
    "leaky_relu": "leaky_relu",
    "swish": "swish",
    "silu": "swish",
    "mish": "mish",
    "hswish": "hard_swish",
    "hardswish": "hard_swish",
    "hard_swish": "hard_swish",
    "h-swish": "hard_swish",
    "linear": "linear",
    "identity": "linear",
}


@dataclass(frozen=True)
class ActivationKind:
    """Which activation to apply. ``slope`` only matters for leaky ReLU."""

    name: str
    slope: float = 0.1

    def __post_init__(self):
        key = _ALIASES.get(self.name.lower().replace(" ", ""))
        if key is None:
            raise ValueError(f"unknown activation {self.name!r}; expected one of {KINDS}")
        object.__setattr__(self, "name", key)
        if key == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ValueError(f"leaky ReLU slope must lie in (0, 1), got {self.slope}")

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        if isinstance(value, dict):
            return cls(**value)
        return cls(str(value))

    def __str__(self):
        if self.name == "leaky_relu":
            return f"leaky_relu({self.slope:g})"
        return self.name


LEAKY = ActivationKind("leaky_relu")
SWISH = ActivationKind("swish")
MISH = ActivationKind("mish")
HARD_SWISH = ActivationKind("hard_swish")
LINEAR = ActivationKind("linear")


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise ValueError("activation input must be finite")


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _out(x, scalar):
    return float(x) if scalar else x


def activate(kind, x):
    """Apply ``kind`` element-wise. Raises ``ValueError`` on non-finite input."""
    kind = ActivationKind.parse(kind)
    scalar = np.ndim(x) == 0
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    name = kind.name
    if name == "linear":
        y = x.copy()
    elif name == "leaky_relu":
        y = np.where(x >= 0, x, kind.slope * x)
    elif name == "swish":
        y = x * _sigmoid(x)
    elif name == "mish":
        y = x * np.tanh(_softplus(x))
    else:
        y = x * np.clip(x + 3.0, 0.0, 6.0) / 6.0
    return _out(y, scalar)


def activate_grad(kind, x):
    """Analytic derivative of ``activate(kind, x)``.

    At kinks (0 for leaky ReLU, -3 and 3 for hard swish) the right-hand limit is
    returned.
    """
    kind = ActivationKind.parse(kind)
    scalar = np.ndim(x) == 0
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    name = kind.name
    if name == "linear":
        g = np.ones_like(x)
    elif name == "leaky_relu":
        g = np.where(x >= 0, 1.0, kind.slope)
    elif name == "swish":
        s = _sigmoid(x)
        g = s + x * s * (1.0 - s)
    elif name == "mish":
        t = np.tanh(_softplus(x))
        g = t + x * (1.0 - t * t) * _sigmoid(x)
    else:
        g = np.where(x < -3.0, 0.0, np.where(x >= 3.0, 1.0, (2.0 * x + 3.0) / 6.0))
    return _out(g, scalar)


def sigmoid(x):
    """Numerically stable logistic function."""
    if np.ndim(x) == 0:
        x = float(x)
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        e = math.exp(x)
        return e / (1.0 + e)
    return _sigmoid(np.asarray(x, dtype=np.float64))
