"""Dense float64 tensors with label-based index contraction.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 (row-major).
The same helpers also accept JAX arrays so that geometry code can be traced
for reverse-mode gradients; :func:`namespace` picks the matching array module.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand extents do not agree."""


class SpecError(ValueError):
    """A contraction string or tensor description is malformed."""


class SingularMatrixError(np.linalg.LinAlgError):
    """Matrix is numerically singular even after ridge regularization."""

    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition


def namespace(*arrays):
    """Return ``jax.numpy`` if any operand is a JAX array/tracer, else numpy."""
    jax = sys.modules.get("jax")
    if jax is not None:
        for a in arrays:
            if isinstance(a, jax.Array):
                import jax.numpy as jnp

                return jnp
    return np


def tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Build a float64 tensor from nested literals or a flat buffer.

    Raises ``SpecError`` on non-finite entries or an inconsistent shape.
    """
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise SpecError(f"extents must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise SpecError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise SpecError("tensor literal contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class ContractionSpec:
    """Parsed ``"ab,bc->ac"`` style contraction.

    Labels repeated across the inputs and absent from the output are summed.
    A label may occur at most twice over all inputs (Einstein convention).
    """

    inputs: tuple[str, ...]
    output: str

    @classmethod
    def parse(cls, text: str) -> "ContractionSpec":
        return _parse_spec(text)

    def __str__(self) -> str:
        return ",".join(self.inputs) + "->" + self.output


@lru_cache(maxsize=1024)
def _parse_spec(text: str) -> ContractionSpec:
    if text.count("->") != 1:
        raise SpecError(f"contraction {text!r} needs exactly one '->'")
    lhs, out = text.replace(" ", "").split("->")
    inputs = tuple(lhs.split(","))
    if not 1 <= len(inputs) <= 2:
        raise SpecError(f"contraction {text!r} must have one or two operands")
    for labels in inputs + (out,):
        if not all(c.isalpha() for c in labels):
            raise SpecError(f"contraction {text!r} has a non-letter label")
    counts: dict[str, int] = {}
    for labels in inputs:
        for c in labels:
            counts[c] = counts.get(c, 0) + 1
    for c, n in counts.items():
        if n > 2:
            raise SpecError(f"label {c!r} appears {n} times in {text!r}")
    if len(set(out)) != len(out):
        raise SpecError(f"repeated output label in {text!r}")
    for c in out:
        if c not in counts:
            raise SpecError(f"output label {c!r} missing from inputs of {text!r}")
    return ContractionSpec(inputs, out)


def contract(spec: str | ContractionSpec, a, b=None):
    """Contract one or two tensors according to ``spec``.

    >>> contract("ik,kj->ij", tensor([[1, 2], [3, 4]]), tensor([[5, 6], [7, 8]]))
    array([[19., 22.],
           [43., 50.]])
    """
    if isinstance(spec, str):
        spec = _parse_spec(spec)
    operands = (a,) if b is None else (a, b)
    if len(operands) != len(spec.inputs):
        raise SpecError(f"{spec} expects {len(spec.inputs)} operand(s), got {len(operands)}")
    extents: dict[str, int] = {}
    for labels, op in zip(spec.inputs, operands):
        if len(labels) != op.ndim:
            raise ShapeError(f"{spec}: operand of rank {op.ndim} given labels {labels!r}")
        for c, n in zip(labels, op.shape):
            if extents.setdefault(c, n) != n:
                raise ShapeError(f"{spec}: label {c!r} has extents {extents[c]} and {n}")
    xp = namespace(*operands)
    return xp.einsum(str(spec), *operands)


_ELEMENTWISE = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "pow": lambda a, b: a**b,
}


def elementwise(a, b, op: str):
    """Entrywise ``add``/``sub``/``mul``/``pow``; ``b`` is a same-shape tensor or a scalar."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise SpecError(f"unknown elementwise op {op!r}") from None
    if np.ndim(b) != 0 and tuple(np.shape(b)) != tuple(np.shape(a)):
        raise ShapeError(f"elementwise {op}: shapes {np.shape(a)} and {np.shape(b)} differ")
    return fn(a, b)


def invert_matrix(g, ridge: float = 0.0, max_condition: float = 1e13):
    """Invert ``g + ridge*I``.

    For numpy input a ``SingularMatrixError`` carrying the condition estimate is
    raised when the regularized matrix is numerically singular. Traced (JAX)
    input is inverted without the check.
    """
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapeError(f"invert_matrix needs a square matrix, got {g.shape}")
    if ridge < 0:
        raise SpecError("ridge must be nonnegative")
    xp = namespace(g)
    n = g.shape[0]
    m = g + ridge * xp.eye(n) if ridge else g
    if xp is not np:
        return xp.linalg.inv(m)
    cond = np.linalg.cond(m)
    if not np.isfinite(cond) or cond > max_condition:
        raise SingularMatrixError(f"matrix is singular (condition {cond:.3g})", float(cond))
    inv = np.linalg.inv(m)
    if np.array_equal(m, m.T):
        inv = 0.5 * (inv + inv.T)
    return inv
