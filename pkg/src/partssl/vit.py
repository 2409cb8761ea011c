"""Small vision transformer with a [CLS] token and one learnable token per
local area, plus projection heads on every special token.

Views of different resolutions share the patch projection and positional
embeddings; positions for a non-canonical grid are bilinearly interpolated
from the canonical grid. Special tokens carry no separate positional
embedding (the token vector itself is learned, so an extra additive learned
vector would be redundant).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class LayoutError(ValueError):
    pass


@dataclass
class BackboneConfig:
    image_h: int = 64
    image_w: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    num_parts: int = 3
    proj_dim: int = 256
    mlp_ratio: int = 4
    head_hidden: int = 0      # 0 -> 4 * embed_dim
    head_bottleneck: int = 0  # 0 -> embed_dim
    separate_part_heads: bool = False
    # special tokens must stay distinguishable after residual mixing with the
    # (roughly unit-scale) patch stream, or every part collapses onto the same
    # behavior; 0.3 keeps identities alive without swamping content
    token_init: float = 0.3

    def validate(self):
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ConfigError(
                "image %dx%d not divisible by patch size %d"
                % (self.image_h, self.image_w, self.patch_size))
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim %d not divisible by heads %d" % (self.embed_dim, self.heads))
        if self.num_parts < 1:
            raise ConfigError("num_parts must be >= 1")
        if self.proj_dim < 2:
            raise ConfigError("proj_dim must be >= 2")
        return self

    @property
    def grid(self):
        return (self.image_h // self.patch_size, self.image_w // self.patch_size)

    @property
    def hidden(self):
        return self.head_hidden or 4 * self.embed_dim

    @property
    def bottleneck(self):
        return self.head_bottleneck or self.embed_dim


@dataclass(frozen=True)
class TokenLayout:
    """Which special tokens a view carries; part indices are 1-based."""

    include_cls: bool = True
    part_indices: tuple = ()

    def validate(self, num_parts):
        for i in self.part_indices:
            if not 1 <= i <= num_parts:
                raise LayoutError("part index %d outside 1..%d" % (i, num_parts))
        return self

    @property
    def num_special(self):
        return int(self.include_cls) + len(self.part_indices)


def global_layout(num_parts):
    return TokenLayout(include_cls=True, part_indices=tuple(range(1, num_parts + 1)))


def local_layout(area_index):
    return TokenLayout(include_cls=True, part_indices=(area_index,))


def head_names(cfg):
    if cfg.separate_part_heads:
        return ["head_cls"] + ["head_part%d" % i for i in range(1, cfg.num_parts + 1)]
    return ["head_cls", "head_part"]


def part_head_name(cfg, area_index):
    return "head_part%d" % area_index if cfg.separate_part_heads else "head_part"


class NetworkParams:
    """All learnable weights of one network, addressable by name.

    Iteration order is fixed by construction, so two networks built from the
    same config zip together parameter-by-parameter.
    """

    def __init__(self, cfg, tensors):
        self.cfg = cfg
        self._p = tensors

    @classmethod
    def init(cls, cfg, rng, requires_grad=True):
        cfg.validate()
        C, L = cfg.embed_dim, cfg.num_parts
        gh, gw = cfg.grid
        p = {}

        def add(name, arr):
            p[name] = Tensor(arr, requires_grad=requires_grad)

        def normal(fan_in, fan_out):
            # fan-in scaling keeps activations input-dependent at desk scale,
            # where the usual 0.02 init would let biases drown the signal
            return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

        def token(*shape):
            return rng.normal(0.0, 0.02, size=shape)

        add("patch_proj.w", normal(cfg.patch_size * cfg.patch_size * 3, C))
        add("patch_proj.b", np.zeros(C))
        add("pos_embed", token(gh * gw, C))
        add("cls_token", cfg.token_init * rng.normal(0.0, 1.0, (1, C)))
        add("part_tokens", cfg.token_init * rng.normal(0.0, 1.0, (L, C)))
        for d in range(cfg.depth):
            pre = "blocks.%d." % d
            add(pre + "ln1.g", np.ones(C))
            add(pre + "ln1.b", np.zeros(C))
            for nm in ("wq", "wk", "wv", "wo"):
                add(pre + "attn." + nm, normal(C, C))
            for nm in ("bq", "bk", "bv", "bo"):
                add(pre + "attn." + nm, np.zeros(C))
            add(pre + "ln2.g", np.ones(C))
            add(pre + "ln2.b", np.zeros(C))
            add(pre + "mlp.w1", normal(C, cfg.mlp_ratio * C))
            add(pre + "mlp.b1", np.zeros(cfg.mlp_ratio * C))
            add(pre + "mlp.w2", normal(cfg.mlp_ratio * C, C))
            add(pre + "mlp.b2", np.zeros(C))
        add("final_ln.g", np.ones(C))
        add("final_ln.b", np.zeros(C))
        for head in head_names(cfg):
            pre = head + "."
            add(pre + "w1", normal(C, cfg.hidden))
            add(pre + "b1", np.zeros(cfg.hidden))
            add(pre + "w2", normal(cfg.hidden, cfg.hidden))
            add(pre + "b2", np.zeros(cfg.hidden))
            add(pre + "w3", normal(cfg.hidden, cfg.bottleneck))
            add(pre + "b3", np.zeros(cfg.bottleneck))
            # small last layer keeps initial logits mild under sharp teacher
            # temperatures (the bottleneck feeding it is unit-norm)
            add(pre + "w4", 0.1 * normal(cfg.bottleneck, cfg.proj_dim))
            add(pre + "b4", np.zeros(cfg.proj_dim))
        return cls(cfg, p)

    def __getitem__(self, name):
        return self._p[name]

    def __contains__(self, name):
        return name in self._p

    def names(self):
        return list(self._p)

    def items(self):
        return self._p.items()

    def tensors(self):
        return list(self._p.values())

    def clone(self, requires_grad=False):
        """Deep copy; used to spawn the momentum-tracked twin network."""
        return NetworkParams(
            self.cfg,
            {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in self._p.items()},
        )

    def state(self):
        return {k: v.data.copy() for k, v in self._p.items()}

    def load_state(self, state):
        for k, v in self._p.items():
            if k not in state:
                raise KeyError("missing parameter %r in state" % k)
            arr = np.asarray(state[k], dtype=T.DTYPE)
            if arr.shape != v.shape:
                raise T.ShapeError("load_state: %s expects %s, got %s" % (k, v.shape, arr.shape))
            v.data = arr.copy()
        return self

    def num_params(self):
        return sum(v.size for v in self._p.values())


# ---------------------------------------------------------------------------
# forward pieces


def patch_grid(h, w, patch_size):
    if h % patch_size or w % patch_size:
        raise ConfigError("view %dx%d not divisible by patch size %d" % (h, w, patch_size))
    return h // patch_size, w // patch_size


def extract_patches(images, patch_size):
    """(B,H,W,3) pixels -> (B, P, patch_size^2*3) row-major patch vectors."""
    images = np.asarray(images, dtype=T.DTYPE)
    if images.ndim == 3:
        images = images[None]
    B, H, W, Ch = images.shape
    gh, gw = patch_grid(H, W, patch_size)
    x = images.reshape(B, gh, patch_size, gw, patch_size, Ch)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, gh * gw, patch_size * patch_size * Ch)


def _interp_weights(src, dst, lo_frac=0.0, hi_frac=1.0, mirror=False):
    """1-D bilinear interpolation matrix (dst, src), pixel-center aligned.

    ``lo_frac``/``hi_frac`` restrict the source to a sub-interval (crop-aware
    positions); ``mirror`` reverses the target traversal (horizontal flip).
    """
    m = np.zeros((dst, src))
    if src == 1:
        m[:, 0] = 1.0
        return m
    span = (hi_frac - lo_frac) * src
    pos = lo_frac * src + (np.arange(dst) + 0.5) * (span / dst) - 0.5
    if mirror:
        pos = pos[::-1]
    pos = np.clip(pos, 0.0, src - 1.0)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    w = pos - lo
    m[np.arange(dst), lo] += 1.0 - w
    m[np.arange(dst), hi] += w
    return m


def pos_embed_matrix(cfg, view_gh, view_gw, rect=None, mirror=False):
    """Interpolation from the canonical pos-embed grid to a view grid.

    ``rect`` = (top, left, height, width) fractions of the source image maps
    the view onto the matching sub-rectangle of the canonical grid instead of
    stretching it over the whole grid.
    """
    gh, gw = cfg.grid
    top, left, h, w = rect if rect is not None else (0.0, 0.0, 1.0, 1.0)
    my = _interp_weights(gh, view_gh, top, top + h)
    mx = _interp_weights(gw, view_gw, left, left + w, mirror=mirror)
    return np.kron(my, mx)  # (view_gh*view_gw, gh*gw)


def patchify(images, cfg, params, rects=None, mirrors=None):
    """Project patches to embeddings and add (interpolated) positions.

    With ``rects`` (per-view source rectangles as (top, left, h, w) fractions)
    positions are crop-aware: each view gets the sub-grid it was cut from.
    Without it, views are treated as whole images (stretch interpolation),
    which is exact (identity) at the canonical resolution.
    """
    images = np.asarray(images, dtype=T.DTYPE)
    if images.ndim == 3:
        images = images[None]
    B, H, W, _ = images.shape
    vg = patch_grid(H, W, cfg.patch_size)
    patches = Tensor(extract_patches(images, cfg.patch_size))
    emb = patches @ params["patch_proj.w"] + params["patch_proj.b"]
    if rects is not None:
        mirrors = mirrors if mirrors is not None else [False] * B
        mats = np.stack([pos_embed_matrix(cfg, *vg, rect=rects[i], mirror=mirrors[i])
                         for i in range(B)])
        pos = Tensor(mats) @ params["pos_embed"]
    elif vg == cfg.grid:
        pos = params["pos_embed"]  # exact identity at canonical resolution
    else:
        pos = Tensor(pos_embed_matrix(cfg, *vg)) @ params["pos_embed"]
    return emb + pos


def assemble(patches, layout, params):
    """[CLS]? ++ selected part tokens ++ patch embeddings, for a whole batch."""
    cfg = params.cfg
    layout.validate(cfg.num_parts)
    B = patches.shape[0]
    rows = []
    if layout.include_cls:
        rows.append(params["cls_token"])
    if layout.part_indices:
        idx = np.asarray(layout.part_indices) - 1
        rows.append(T.gather(params["part_tokens"], idx))
    if not rows:
        return patches
    special = T.concatenate(rows, axis=0)
    special = T.broadcast_to(T.reshape(special, (1,) + special.shape), (B,) + special.shape)
    return T.concatenate([special, patches], axis=1)


def assemble_per_view(patches, part_index_per_view, params, include_cls=True):
    """Per-view single part token (1-based indices), vectorized over the batch."""
    cfg = params.cfg
    idx = np.asarray(part_index_per_view, dtype=np.int64)
    if idx.size and (idx.min() < 1 or idx.max() > cfg.num_parts):
        raise LayoutError("part index outside 1..%d" % cfg.num_parts)
    B = patches.shape[0]
    if idx.shape != (B,):
        raise T.ShapeError("assemble_per_view: need one part index per view")
    part = T.reshape(T.gather(params["part_tokens"], idx - 1), (B, 1, -1))
    if include_cls:
        cls = T.broadcast_to(T.reshape(params["cls_token"], (1, 1, -1)), (B, 1, patches.shape[2]))
        return T.concatenate([cls, part, patches], axis=1)
    return T.concatenate([part, patches], axis=1)


def _attention(x, params, pre, cfg, cache):
    B, S, C = x.shape
    h = cfg.heads
    dh = C // h
    q = x @ params[pre + "attn.wq"] + params[pre + "attn.bq"]
    k = x @ params[pre + "attn.wk"] + params[pre + "attn.bk"]
    v = x @ params[pre + "attn.wv"] + params[pre + "attn.bv"]
    q = T.transpose(T.reshape(q, (B, S, h, dh)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(k, (B, S, h, dh)), (0, 2, 1, 3))
    v = T.transpose(T.reshape(v, (B, S, h, dh)), (0, 2, 1, 3))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    if cache is not None:
        cache.append(np.array(attn.data))
    out = T.matmul(attn, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, S, C))
    return out @ params[pre + "attn.wo"] + params[pre + "attn.bo"]


def encode(x, params, attn_cache=None):
    """Pre-norm transformer blocks; preserves sequence length and channels.

    depth=0 is the identity (the final norm is skipped too).
    """
    cfg = params.cfg
    if cfg.depth == 0:
        return x
    for d in range(cfg.depth):
        pre = "blocks.%d." % d
        hn = T.layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        x = x + _attention(hn, params, pre, cfg, attn_cache)
        hn = T.layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        hid = T.gelu(hn @ params[pre + "mlp.w1"] + params[pre + "mlp.b1"])
        x = x + (hid @ params[pre + "mlp.w2"] + params[pre + "mlp.b2"])
    return T.layer_norm(x, params["final_ln.g"], params["final_ln.b"])


def project(x, params, head):
    """Projection head: 3-layer MLP, L2 normalization, final linear to K."""
    pre = head + "."
    hid = T.gelu(x @ params[pre + "w1"] + params[pre + "b1"])
    hid = T.gelu(hid @ params[pre + "w2"] + params[pre + "b2"])
    hid = hid @ params[pre + "w3"] + params[pre + "b3"]
    hid = T.l2_normalize(hid, axis=-1)
    return hid @ params[pre + "w4"] + params[pre + "b4"]


def forward_tokens(images, layout, params, attn_cache=None, rects=None, mirrors=None):
    """Full encoder pass; returns ([CLS] outputs, part outputs) per view.

    Part outputs are ordered as in ``layout.part_indices``.
    """
    cfg = params.cfg
    patches = patchify(images, cfg, params, rects=rects, mirrors=mirrors)
    seq = assemble(patches, layout, params)
    out = encode(seq, params, attn_cache=attn_cache)
    n_cls = int(layout.include_cls)
    cls_out = out[:, 0, :] if layout.include_cls else None
    part_out = out[:, n_cls:n_cls + len(layout.part_indices), :] if layout.part_indices else None
    return cls_out, part_out


@dataclass
class AttentionMap:
    token: object            # "cls" or 1-based part index
    layer: int
    weights: np.ndarray      # (S,) over all key positions, sums to 1
    patch_weights: np.ndarray  # (gh, gw) slice of `weights` over patches
    grid: tuple


def attention_map(image, token, layer, params):
    """Last-axis attention of one special token's query, averaged over heads."""
    cfg = params.cfg
    if not 0 <= layer < cfg.depth:
        raise LayoutError("layer %d outside 0..%d" % (layer, cfg.depth - 1))
    layout = global_layout(cfg.num_parts)
    if token == "cls":
        row = 0
    else:
        idx = int(token)
        if not 1 <= idx <= cfg.num_parts:
            raise LayoutError("part index %d outside 1..%d" % (idx, cfg.num_parts))
        row = idx  # position after [CLS]
    cache = []
    with T.no_grad():
        img = np.asarray(image, dtype=T.DTYPE)
        forward_tokens(img[None], layout, params, attn_cache=cache)
    attn = cache[layer][0]  # (heads, S, S)
    weights = attn[:, row, :].mean(axis=0)
    n_special = 1 + cfg.num_parts
    gh, gw = patch_grid(img.shape[0], img.shape[1], cfg.patch_size)
    return AttentionMap(
        token=token,
        layer=layer,
        weights=weights,
        patch_weights=weights[n_special:].reshape(gh, gw),
        grid=(gh, gw),
    )
