"""Key/value-split attention with capture and override hooks.

The conditioning deliberately carries two embeddings: the key embedding
feeds the key projection and pins where attention lands, the value
embedding feeds the value projection and decides what gets painted there.
Keeping the two independently settable is what makes value-only inversion
and key/value swap experiments possible.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Field
from .errors import DimensionError, InjectionError

COND = "cond"
UNCOND = "uncond"
SELF = "self"
CROSS = "cross"


@dataclass
class Conditioning:
    """Paired (key, value) embeddings of identical extents (L, d_e)."""

    key_embedding: Field
    value_embedding: Field

    def __post_init__(self):
        if self.key_embedding.shape != self.value_embedding.shape:
            raise DimensionError(
                f"conditioning embeddings differ: {self.key_embedding.shape} "
                f"vs {self.value_embedding.shape}"
            )

    @property
    def length(self):
        return self.key_embedding.shape[0]


class AttentionTape:
    """Captured attention maps keyed by (layer, timestep, branch, kind).

    Every stored map is (heads, queries, keys) and row-stochastic along the
    last axis within float tolerance.
    """

    def __init__(self):
        self.maps = {}

    def put(self, layer, t, branch, kind, map_field):
        self.maps[(layer, int(t), branch, kind)] = map_field

    def get(self, layer, t, branch, kind):
        return self.maps.get((layer, int(t), branch, kind))

    def maps_at(self, t, branch=COND, kind=CROSS):
        """Layer -> map for one (timestep, branch, kind) slice, layer-sorted."""
        t = int(t)
        out = {}
        for (layer, tt, br, kd), m in self.maps.items():
            if tt == t and br == branch and kd == kind:
                out[layer] = m
        return dict(sorted(out.items()))

    def timesteps(self):
        return sorted({t for (_, t, _, _) in self.maps})

    def __len__(self):
        return len(self.maps)


@dataclass
class InjectionPlan:
    """Step-fraction thresholds controlling what gets replaced, and when.

    Fractions are of the total step count; a threshold tau keeps the
    corresponding replacement active for the first ceil(tau * T) sampling
    steps, counting down from t = T.
    """

    replace_cross_until: float = 0.0
    replace_self_cond_until: float = 0.0
    replace_self_uncond_until: float = 0.0
    reweight: tuple = None  # (token index, scale)
    refine_alignment: dict = None  # target slot -> source slot, for refinement

    def __post_init__(self):
        for name in ("replace_cross_until", "replace_self_cond_until",
                     "replace_self_uncond_until"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InjectionError(f"{name} must be in [0, 1], got {v}")
        if self.reweight is not None and not np.isfinite(self.reweight[1]):
            raise InjectionError("reweight scale must be finite")


def steps_active(tau, total):
    """Number of leading sampling steps a threshold keeps active: ceil(tau*T).

    The epsilon guards against float noise in tau*T landing a hair above an
    integer (e.g. 0.6 * 30).
    """
    if tau <= 0.0:
        return 0
    import math

    return min(total, math.ceil(tau * total - 1e-9))


class AttentionLayer:
    """One scaled-dot-product site: q from image features, k/v from a Conditioning.

    d is the shared q/k projection width; per-head width is d // heads and
    sets the softmax temperature. Self-attention sites reuse this class with
    the token features as both embeddings.
    """

    def __init__(self, name, query_dim, embed_dim, d, heads, value_dim, rng=None,
                 dtype=np.float32):
        if d % heads or value_dim % heads:
            raise DimensionError(f"{name}: widths {d}/{value_dim} not divisible by {heads} heads")
        self.name = name
        self.d = d
        self.heads = heads
        self.value_dim = value_dim
        if rng is None:
            rng = np.random.default_rng(0)

        def init(fan_in, fan_out):
            std = np.sqrt(2.0 / (fan_in + fan_out))
            return Field(rng.normal(0.0, std, (fan_in, fan_out)).astype(dtype),
                         requires_grad=True, dtype=dtype)

        self.wq = init(query_dim, d)
        self.wk = init(embed_dim, d)
        self.wv = init(embed_dim, value_dim)

    def parameters(self):
        return [self.wq, self.wk, self.wv]


def _split_heads(x, heads):
    n, d = x.shape
    return ad.transpose(ad.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def attend(f, cond, layer, map_transform=None, sink=None):
    """Scaled dot-product attention; returns (output (N, value_dim), map).

    map = softmax(q k^T / sqrt(per-head width)); output = map @ v. When
    map_transform is given it replaces or rewrites the map before the
    map @ v product (the injection mechanism); the returned and recorded
    map is the one actually used.
    """
    if f.ndim != 2 or f.shape[1] != layer.wq.shape[0]:
        raise DimensionError(f"attend[{layer.name}]: features {f.shape} vs Psi_Q {layer.wq.shape}")
    if cond.key_embedding.shape[1] != layer.wk.shape[0]:
        raise DimensionError(
            f"attend[{layer.name}]: embedding width {cond.key_embedding.shape[1]} "
            f"vs Psi_K {layer.wk.shape}")
    heads = layer.heads
    q = _split_heads(ad.linear(f, layer.wq), heads)            # (h, N, dh)
    k = _split_heads(ad.linear(cond.key_embedding, layer.wk), heads)
    v = _split_heads(ad.linear(cond.value_embedding, layer.wv), heads)
    dh = layer.d // heads
    logits = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / float(np.sqrt(dh)))
    amap = ad.softmax(logits)                                  # (h, N, L)
    if map_transform is not None:
        amap = _apply_transform(amap, map_transform, layer.name)
    if sink is not None:
        sink(amap)
    out = ad.matmul(amap, v)                                   # (h, N, dv/h)
    n = f.shape[0]
    out = ad.reshape(ad.transpose(out, (1, 0, 2)), (n, layer.value_dim))
    return out, amap


def _apply_transform(amap, transform, name):
    if callable(transform):
        new = transform(amap)
    else:
        new = transform
    if isinstance(new, np.ndarray):
        new = Field(new, dtype=amap.dtype)
    if new.shape != amap.shape:
        raise InjectionError(
            f"override for {name}: shape {new.shape} does not match map {amap.shape}")
    return new
