"""Network building blocks on top of the tensor core.

Token sequences are [N, L, C] with a known 2-D layout.  The bridge runs the
same blocks over a mixed sequence made of several scales at once, so the
attention / FFN internals take a list of ``Segment``s describing how each
contiguous token run folds back onto its source grid; the public single-grid
entry points wrap that with one segment.

No layer carries positional state: locality enters only through the depthwise
convolution inside the FFN and the overlapped patch embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bfseg import tensor as T
from bfseg.tensor import ConfigError, ShapeError, Tensor

TRUNC_STD = 0.02  # weight init scale, truncated at +-2 std


@dataclass
class LinearParams:
    weight: Tensor  # [Cin, Cout]
    bias: Tensor  # [Cout]


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class ConvParams:
    weight: Tensor  # [O, C/groups, kh, kw]
    bias: Tensor  # [O]


@dataclass
class AttentionParams:
    wq: LinearParams
    wk: LinearParams
    wv: LinearParams
    wo: LinearParams
    heads: int
    ratio: int
    reduce: ConvParams | None = None  # stride-``ratio`` conv feeding K/V when ratio > 1
    reduce_norm: NormParams | None = None


@dataclass
class MixFFNParams:
    expand: LinearParams  # [C, e*C]
    dw: ConvParams  # [e*C, 1, 3, 3], depthwise
    inner_norm: NormParams  # over e*C
    project: LinearParams  # [e*C, C]
    expansion: int


@dataclass
class BlockParams:
    norm1: NormParams
    norm2: NormParams
    attn: AttentionParams
    ffn: MixFFNParams


@dataclass(frozen=True)
class Segment:
    """A token run backed by a height x width grid.

    ``folds`` > 1 means each grid position contributes that many consecutive
    width-C tokens (a wider feature re-viewed at shared channel depth), so the
    run holds height * width * folds tokens.
    """

    height: int
    width: int
    folds: int = 1

    @property
    def tokens(self):
        return self.height * self.width * self.folds


# -- parameter factories ------------------------------------------------------


def trunc_normal(rng, shape, std=TRUNC_STD, dtype=np.float64):
    """Normal(0, std) truncated at +-2 std, drawn deterministically from rng."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def init_linear(rng, cin, cout, dtype=np.float64):
    return LinearParams(
        weight=Tensor(trunc_normal(rng, (cin, cout), dtype=dtype), requires_grad=True),
        bias=Tensor(np.zeros(cout, dtype=dtype), requires_grad=True),
    )


def init_norm(c, dtype=np.float64):
    return NormParams(
        gamma=Tensor(np.ones(c, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
    )


def init_conv(rng, out_ch, ch_per_group, kh, kw, dtype=np.float64):
    return ConvParams(
        weight=Tensor(trunc_normal(rng, (out_ch, ch_per_group, kh, kw), dtype=dtype), requires_grad=True),
        bias=Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True),
    )


def init_attention(rng, c, heads, ratio, token_axis_reduce=False, dtype=np.float64):
    if c % heads:
        raise ConfigError(f"channel dim {c} not divisible by {heads} heads")
    if ratio < 1:
        raise ConfigError(f"reduction ratio must be >= 1, got {ratio}")
    reduce = reduce_norm = None
    if ratio > 1:
        kh, kw = (1, ratio) if token_axis_reduce else (ratio, ratio)
        reduce = init_conv(rng, c, c, kh, kw, dtype=dtype)
        reduce_norm = init_norm(c, dtype=dtype)
    return AttentionParams(
        wq=init_linear(rng, c, c, dtype=dtype),
        wk=init_linear(rng, c, c, dtype=dtype),
        wv=init_linear(rng, c, c, dtype=dtype),
        wo=init_linear(rng, c, c, dtype=dtype),
        heads=heads,
        ratio=ratio,
        reduce=reduce,
        reduce_norm=reduce_norm,
    )


def init_mix_ffn(rng, c, expansion, dtype=np.float64):
    e = expansion * c
    return MixFFNParams(
        expand=init_linear(rng, c, e, dtype=dtype),
        dw=init_conv(rng, e, 1, 3, 3, dtype=dtype),
        inner_norm=init_norm(e, dtype=dtype),
        project=init_linear(rng, e, c, dtype=dtype),
        expansion=expansion,
    )


def init_block(rng, c, heads, ratio, expansion, token_axis_reduce=False, dtype=np.float64):
    return BlockParams(
        norm1=init_norm(c, dtype=dtype),
        norm2=init_norm(c, dtype=dtype),
        attn=init_attention(rng, c, heads, ratio, token_axis_reduce, dtype=dtype),
        ffn=init_mix_ffn(rng, c, expansion, dtype=dtype),
    )


# -- primitives over token sequences -------------------------------------------


def linear(x, p):
    return T.matmul(x, p.weight) + p.bias


def norm(x, p, eps=1e-6):
    return T.layernorm(x, p.gamma, p.beta, eps=eps)


def tokens_to_grid(x, h, w):
    """[N, h*w, C] -> [N, C, h, w]."""
    n, l, c = x.shape
    if l != h * w:
        raise ShapeError(f"{l} tokens do not fill a {h}x{w} grid")
    return T.transpose(T.reshape(x, (n, h, w, c)), (0, 3, 1, 2))


def grid_to_tokens(x):
    """[N, C, h, w] -> [N, h*w, C]."""
    n, c, h, w = x.shape
    return T.transpose(T.reshape(x, (n, c, h * w)), (0, 2, 1))


def _check_segments(x, segments):
    total = sum(s.tokens for s in segments)
    if total != x.shape[1]:
        raise ShapeError(
            f"sequence has {x.shape[1]} tokens but segments describe {total}"
        )


# -- attention ----------------------------------------------------------------


def _reduce_source(x, segments, p):
    """Down-sample the K/V source by the stride-r convolution plus layernorm."""
    r = p.ratio
    n, l, c = x.shape
    if len(segments) == 1 and segments[0].folds == 1:
        h, w = segments[0].height, segments[0].width
        if h % r or w % r:
            raise ConfigError(f"reduction ratio {r} does not divide grid {h}x{w}")
        grid = tokens_to_grid(x, h, w)
        red = T.conv2d(grid, p.reduce.weight, p.reduce.bias, stride=r, padding=0)
        src = grid_to_tokens(red)
    else:
        # Mixed multi-scale sequence: no single 2-D layout, reduce along the
        # token axis with a length-r stride-r kernel.
        if l % r:
            raise ConfigError(f"reduction ratio {r} does not divide sequence length {l}")
        row = T.reshape(T.transpose(x, (0, 2, 1)), (n, c, 1, l))
        red = T.conv2d(row, p.reduce.weight, p.reduce.bias, stride=r, padding=0)
        src = T.transpose(T.reshape(red, (n, c, l // r)), (0, 2, 1))
    return norm(src, p.reduce_norm)


def _heads(x, h):
    n, l, c = x.shape
    return T.transpose(T.reshape(x, (n, l, h, c // h)), (0, 2, 1, 3))


def attention_mixed(x, segments, p, return_weights=False):
    """Multi-head scaled dot-product attention with spatially reduced K/V."""
    _check_segments(x, segments)
    n, l, c = x.shape
    if c % p.heads:
        raise ConfigError(f"channel dim {c} not divisible by {p.heads} heads")
    src = _reduce_source(x, segments, p) if p.ratio > 1 else x
    q = _heads(linear(x, p.wq), p.heads)
    k = _heads(linear(src, p.wk), p.heads)
    v = _heads(linear(src, p.wv), p.heads)
    scale = float(1.0 / np.sqrt(c / p.heads))
    attn = T.softmax(T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale, axis=-1)
    out = T.matmul(attn, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (n, l, c))
    out = linear(out, p.wo)
    return (out, attn) if return_weights else out


def efficient_self_attention(x, h, w, p, return_weights=False):
    """Attention over one h x w token grid; cost L * (L / ratio^2)."""
    return attention_mixed(x, [Segment(h, w)], p, return_weights=return_weights)


# -- feed-forward ---------------------------------------------------------------


def _depthwise_by_segment(u, segments, p):
    """Run the 3x3 depthwise conv on each segment's native grid."""
    n, _, e = u.shape
    parts = T.split(u, [s.tokens for s in segments], axis=1) if len(segments) > 1 else [u]
    outs = []
    for seg, part in zip(segments, parts):
        h, w, f = seg.height, seg.width, seg.folds
        # [N, h*w*f, e] -> [N*f, e, h, w]: folds become batch entries so every
        # channel group is convolved on the same grid with the same kernels.
        g = T.reshape(part, (n, h, w, f, e))
        g = T.reshape(T.transpose(g, (0, 3, 4, 1, 2)), (n * f, e, h, w))
        g = T.conv2d(g, p.dw.weight, p.dw.bias, stride=1, padding=1, groups=e)
        g = T.transpose(T.reshape(g, (n, f, e, h, w)), (0, 3, 4, 1, 2))
        outs.append(T.reshape(g, (n, seg.tokens, e)))
    return outs[0] if len(outs) == 1 else T.concat(outs, axis=1)


def mix_ffn_mixed(x, segments, p):
    """Expand, add a depthwise local branch with skip, normalize, project."""
    _check_segments(x, segments)
    u = linear(x, p.expand)
    s = _depthwise_by_segment(u, segments, p)
    u2 = norm(s + u, p.inner_norm)
    return linear(T.gelu(u2), p.project)


def mix_ffn(x, h, w, p):
    return mix_ffn_mixed(x, [Segment(h, w)], p)


# -- transformer block ------------------------------------------------------------


def transformer_block_mixed(x, segments, p):
    """Pre-norm residual: x + Attn(LN(x)), then + FFN(LN(.))."""
    x = x + attention_mixed(norm(x, p.norm1), segments, p.attn)
    return x + mix_ffn_mixed(norm(x, p.norm2), segments, p.ffn)


def transformer_block(x, h, w, p):
    return transformer_block_mixed(x, [Segment(h, w)], p)


# -- patch embedding / merging / expanding ----------------------------------------


@dataclass
class EmbedParams:
    conv: ConvParams
    norm: NormParams


@dataclass
class ExpandParams:
    proj: LinearParams  # C -> factor^2 * C_out
    norm: NormParams  # over C_out
    factor: int


def init_embed(rng, cin, cout, kernel, dtype=np.float64):
    return EmbedParams(
        conv=init_conv(rng, cout, cin, kernel, kernel, dtype=dtype),
        norm=init_norm(cout, dtype=dtype),
    )


def init_expand(rng, c, factor, dtype=np.float64):
    if factor == 2:
        if c % 2:
            raise ConfigError(f"patch expand by 2 needs an even channel dim, got {c}")
        cout = c // 2
    elif factor == 4:
        cout = c
    else:
        raise ConfigError(f"patch expand factor must be 2 or 4, got {factor}")
    return ExpandParams(
        proj=init_linear(rng, c, factor * factor * cout, dtype=dtype),
        norm=init_norm(cout, dtype=dtype),
        factor=factor,
    )


def overlap_patch_embed(img, p, stride=4, padding=3):
    """Embed overlapping patches: strided conv, flatten to tokens, layernorm.

    Returns (tokens [N, H'*W', Cout], H', W').
    """
    out = T.conv2d(img, p.conv.weight, p.conv.bias, stride=stride, padding=padding)
    _, _, h, w = out.shape
    return norm(grid_to_tokens(out), p.norm), h, w


def patch_merge(x, h, w, p):
    """Halve the grid with a k3 s2 p1 conv to the next channel width.

    Returns (tokens [N, h*w/4, Cnext], h/2, w/2).
    """
    if h % 2 or w % 2:
        raise ShapeError(f"patch merge needs even grid dims, got {h}x{w}")
    grid = tokens_to_grid(x, h, w)
    out = T.conv2d(grid, p.conv.weight, p.conv.bias, stride=2, padding=1)
    return norm(grid_to_tokens(out), p.norm), h // 2, w // 2


def patch_expand(x, h, w, p):
    """Up-sample by rearranging projected channels into spatial blocks.

    Factor 2 halves the channel dim; the final factor-4 stage keeps it.
    Returns (tokens [N, L*factor^2, C'], h*factor, w*factor).
    """
    n, l, c = x.shape
    if l != h * w:
        raise ShapeError(f"{l} tokens do not fill a {h}x{w} grid")
    f = p.factor
    cout = c // 2 if f == 2 else c
    u = linear(x, p.proj)  # [N, L, f*f*cout]
    u = T.reshape(u, (n, h, w, f, f, cout))
    u = T.transpose(u, (0, 1, 3, 2, 4, 5))  # [N, h, f, w, f, cout]
    u = T.reshape(u, (n, h * f * w * f, cout))
    return norm(u, p.norm), h * f, w * f
