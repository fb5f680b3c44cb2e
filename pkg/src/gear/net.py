"""Dense MLP layers with SiLU, quadratic and linear activations."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor_core import ShapeError, SpecError, contract, namespace


class ActivationKind(str, enum.Enum):
    SILU = "silu"
    QUADRATIC = "quadratic"
    LINEAR = "linear"


def logistic_terms(u):
    """Return ``(sigma, E)`` with ``sigma = 1/(1+exp(-u))`` and ``E = exp(-u)``.

    ``E`` is the diagonal of the exponential matrix used in the SiLU derivative
    blocks; it is returned as a vector.
    """
    xp = namespace(u)
    return _sigmoid(u, xp), xp.exp(-u)


def _sigmoid(u, xp):
    # tanh form never overflows
    return 0.5 * (1.0 + xp.tanh(0.5 * u))


def activation_eval(act: ActivationKind, u, order: int = 0):
    """Entrywise activation value or derivative of order 0..3 at ``u``.

    SiLU derivatives are written in the logistic ``sigma`` and ``E = exp(-u)``:

        f'   = sigma + u E sigma^2
        f''  = 2 E sigma^2 - u E sigma^2 + 2 u E^2 sigma^3
        f''' = -3 E sigma^2 + 6 E^2 sigma^3 + u E sigma^2 - 6 u E^2 sigma^3
               + 6 u E^3 sigma^4

    Products ``E^k sigma^(k+1)`` are evaluated as ``(1 - sigma)^k sigma`` since
    ``E sigma == 1 - sigma``; this keeps large negative ``u`` finite.
    """
    if order not in (0, 1, 2, 3):
        raise SpecError(f"activation order must be 0..3, got {order}")
    xp = namespace(u)
    act = ActivationKind(act)
    if act is ActivationKind.LINEAR:
        if order == 0:
            return u
        return xp.ones_like(u) if order == 1 else xp.zeros_like(u)
    if act is ActivationKind.QUADRATIC:
        return (u * u, 2.0 * u, 2.0 * xp.ones_like(u), xp.zeros_like(u))[order]

    sigma = _sigmoid(u, xp)
    if order == 0:
        return u * sigma
    e_s = 1.0 - sigma  # E * sigma
    es2 = e_s * sigma  # E sigma^2
    if order == 1:
        return sigma + u * es2
    e2s3 = e_s * es2  # E^2 sigma^3
    if order == 2:
        return 2.0 * es2 - u * es2 + 2.0 * u * e2s3
    e3s4 = e_s * e2s3  # E^3 sigma^4
    return -3.0 * es2 + 6.0 * e2s3 + u * es2 - 6.0 * u * e2s3 + 6.0 * u * e3s4


@dataclass
class DenseLayer:
    W: np.ndarray
    b: np.ndarray
    act: ActivationKind = ActivationKind.SILU

    def __post_init__(self):
        self.act = ActivationKind(self.act)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"layer W {self.W.shape} inconsistent with b {self.b.shape}")

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]


@dataclass
class Mlp:
    layers: list[DenseLayer] = field(default_factory=list)

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.n_out != nxt.n_in:
                raise ShapeError(f"layer widths do not compose: {prev.n_out} -> {nxt.n_in}")

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @property
    def n_params(self) -> int:
        return sum(l.W.size + l.b.size for l in self.layers)

    def __call__(self, x, masks=None):
        return forward(self, x, masks).output


@dataclass
class ForwardTrace:
    x: np.ndarray
    pre: list  # u^(n) = W^(n) x^(n-1) + b^(n)
    post: list  # x^(n) = f(u^(n))

    @property
    def output(self):
        return self.post[-1] if self.post else self.x


def forward(mlp: Mlp, x, masks: Sequence | None = None) -> ForwardTrace:
    """Evaluate ``mlp`` at ``x`` (a vector or a batch of row vectors).

    ``masks`` optionally holds one multiplicative dropout mask per layer
    (``None`` entries skip a layer); it is applied after the activation.
    """
    if x.shape[-1] != mlp.n_in:
        raise ShapeError(f"input width {x.shape[-1]} != first layer input {mlp.n_in}")
    pre, post = [], []
    h = x
    for n, layer in enumerate(mlp.layers):
        spec = "ij,j->i" if h.ndim == 1 else "ij,bj->bi"
        u = contract(spec, layer.W, h) + layer.b
        h = activation_eval(layer.act, u, 0)
        if masks is not None and masks[n] is not None:
            h = h * masks[n]
        pre.append(u)
        post.append(h)
    return ForwardTrace(x, pre, post)


def init_params(
    sizes: Sequence[int],
    act: ActivationKind | str = ActivationKind.SILU,
    seed: int | np.random.Generator = 0,
    final_act: ActivationKind | str = ActivationKind.LINEAR,
) -> Mlp:
    """Glorot-uniform weights, zero biases; hidden layers use ``act``.

    ``sizes`` lists widths from input to output, so ``[2, 3, 1]`` gives layers
    of shape (3x2) and (1x3).
    """
    sizes = list(sizes)
    if len(sizes) < 2:
        raise SpecError("need at least an input and an output size")
    if any(int(s) <= 0 for s in sizes):
        raise SpecError(f"layer sizes must be positive: {sizes}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        kind = final_act if k == len(sizes) - 2 else act
        layers.append(DenseLayer(W, np.zeros(fan_out), ActivationKind(kind)))
    return Mlp(layers)


def mlp_to_dict(mlp: Mlp) -> dict:
    return {
        "layers": [
            {"w": np.asarray(l.W).tolist(), "b": np.asarray(l.b).tolist(), "act": l.act.value}
            for l in mlp.layers
        ]
    }


def mlp_from_dict(doc: dict) -> Mlp:
    try:
        layers = [
            DenseLayer(
                np.array(d["w"], dtype=np.float64),
                np.array(d["b"], dtype=np.float64),
                ActivationKind(d["act"]),
            )
            for d in doc["layers"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecError(f"bad MLP document: {exc}") from exc
    return Mlp(layers)


def dumps(mlp: Mlp) -> str:
    # json writes floats with repr(), which round-trips float64 exactly
    return json.dumps(mlp_to_dict(mlp))


def loads(text: str) -> Mlp:
    return mlp_from_dict(json.loads(text))


def init_conditioned(
    width: int,
    n_layers: int,
    seed: int | np.random.Generator = 0,
    act: ActivationKind | str = ActivationKind.SILU,
    singular_range: tuple[float, float] = (0.6, 1.4),
    bias_scale: float = 0.3,
) -> Mlp:
    """Constant-width module with random orthogonal factors and bounded singular values.

    Keeps the pulled-back metric well conditioned, which exact-inverse checks
    need; biases are drawn N(0, bias_scale^2). The last layer uses ``act`` too.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for _ in range(n_layers):
        q1, _r = np.linalg.qr(rng.normal(size=(width, width)))
        q2, _r = np.linalg.qr(rng.normal(size=(width, width)))
        s = rng.uniform(*singular_range, size=width)
        W = (q1 * s) @ q2.T
        layers.append(DenseLayer(W, bias_scale * rng.normal(size=width), ActivationKind(act)))
    return Mlp(layers)


def init_orthogonal(
    width: int,
    n_layers: int,
    seed: int | np.random.Generator = 0,
    act: ActivationKind | str = ActivationKind.SILU,
    final_act: ActivationKind | str = ActivationKind.LINEAR,
    gain: float = 1.0,
) -> tuple[Mlp, Mlp]:
    """Constant-width module and a mirrored partner, both random orthogonal.

    The partner uses the transposed factors in reverse order, so near the
    origin it undoes the first module to first order (exactly so with linear
    layers). ``gain`` multiplies the weights of the non-final layers.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    qs = []
    for _ in range(n_layers):
        q, r = np.linalg.qr(rng.normal(size=(width, width)))
        qs.append(q * np.sign(np.diag(r)))

    def build(factors):
        layers = []
        for k, q in enumerate(factors):
            last = k == n_layers - 1
            kind = ActivationKind(final_act if last else act)
            layers.append(DenseLayer((1.0 if last else gain) * q, np.zeros(width), kind))
        return Mlp(layers)

    return build(qs), build([q.T for q in reversed(qs)])
