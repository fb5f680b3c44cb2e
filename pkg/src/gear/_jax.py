"""JAX setup: float64 and pytree registration of the model containers."""
from __future__ import annotations

import jax

jax.config.update("jax_enable_x64", True)

from jax import tree_util  # noqa: E402

from .model import GearModel, TaskPipeline  # noqa: E402
from .net import DenseLayer, Mlp  # noqa: E402


def _bare(cls, **attrs):
    # unflattening may see tracers or placeholder leaves, so skip __post_init__ checks
    obj = object.__new__(cls)
    for k, v in attrs.items():
        object.__setattr__(obj, k, v)
    return obj


tree_util.register_pytree_node(
    DenseLayer,
    lambda l: ((l.W, l.b), l.act),
    lambda act, ch: _bare(DenseLayer, W=ch[0], b=ch[1], act=act),
)
tree_util.register_pytree_node(
    Mlp,
    lambda m: ((list(m.layers),), None),
    lambda _, ch: _bare(Mlp, layers=list(ch[0])),
)
tree_util.register_pytree_node(
    TaskPipeline,
    lambda p: ((p.embed, p.encoder, p.transfer, p.inverse, p.head), None),
    lambda _, ch: _bare(TaskPipeline, embed=ch[0], encoder=ch[1], transfer=ch[2], inverse=ch[3], head=ch[4]),
)
tree_util.register_pytree_node(
    GearModel,
    lambda g: ((g.source, g.target), g.weights),
    lambda w, ch: _bare(GearModel, source=ch[0], target=ch[1], weights=w),
)


def to_numpy(tree):
    import numpy as np

    return tree_util.tree_map(lambda a: np.array(a, dtype=np.float64), tree)
