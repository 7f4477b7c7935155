"""Three-image fusion model: patch encoder, deformable vessel-token
extraction, and the three metric-specific attention branches.

The encoder is deliberately small: non-overlapping patches are linearly
embedded and passed through a single self-attention layer with a residual
connection. Tokens live as (n, d) row matrices; for convolutions they are
reshaped to a (d, g, g) grid in row-major patch order.

Vessel tokens are the difference between deformably-aligned contrast tokens
and mask tokens. The VMC branch queries generated tokens with globally
self-attended vessel tokens; the VBD branch queries with locally convolved
vessel tokens; the OQ branch mixes the generated image's own attention map
with the two branch maps through a learned convex combination. Keys and
values are shared across branches so the three attention maps index the
same token set and can be added.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DomainError, ShapeError, UsageError

__all__ = [
    "ModelConfig",
    "TokenGrid",
    "SelfAttentionParams",
    "PatchEncoderParams",
    "DeformableConvParams",
    "BranchParams",
    "MustParams",
    "BranchOutput",
    "init_must_params",
    "init_patch_encoder",
    "image_to_patches",
    "encode",
    "self_attention",
    "deformable_align",
    "vessel_tokens",
    "vmc_branch",
    "vbd_branch",
    "oq_branch",
    "fusion_weights",
    "must_forward",
    "to_grid",
    "from_grid",
    "save_params",
    "load_params",
]

CHECKPOINT_FORMAT = "angioqa-params"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 32

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ShapeError(
                f"image_size {self.image_size} not divisible by patch {self.patch_size}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid


@dataclass
class TokenGrid:
    """(n, d) token matrix laid out as a row-major g x g spatial grid."""

    tokens: Tensor
    grid: int
    source: str  # mask | contrast | generated | vessel

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.grid * self.grid:
            raise ShapeError(
                f"token matrix {self.tokens.shape} does not match grid {self.grid}")


@dataclass
class SelfAttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k)
                for k in ("wq", "wk", "wv", "bq", "bk", "bv")}


@dataclass
class PatchEncoderParams:
    """Shared by the three input images.

    The residual token-wise MLP provides the per-token nonlinearity needed
    to discriminate ridge depth bands; a linear encoder cannot separate
    defect classes that differ only in intensity.
    """

    embed: Tensor       # (patch^2, d)
    embed_bias: Tensor  # (1, d)
    attn: SelfAttentionParams
    mlp_w1: Tensor      # (d, 2d)
    mlp_b1: Tensor      # (1, 2d), kept <= 0 at init so zero tokens stay zero
    mlp_w2: Tensor      # (2d, d)

    def named(self, prefix: str = "encoder") -> dict[str, Tensor]:
        out = {f"{prefix}.embed": self.embed, f"{prefix}.embed_bias": self.embed_bias,
               f"{prefix}.mlp_w1": self.mlp_w1, f"{prefix}.mlp_b1": self.mlp_b1,
               f"{prefix}.mlp_w2": self.mlp_w2}
        out.update(self.attn.named(f"{prefix}.attn"))
        return out


@dataclass
class DeformableConvParams:
    offset_kernel: Tensor  # (18, d, 3, 3): (dy, dx) per tap, tap-major pairs
    offset_bias: Tensor    # (18, 1, 1)
    main_kernel: Tensor    # (d, d, 3, 3)

    def named(self, prefix: str = "dconv") -> dict[str, Tensor]:
        return {
            f"{prefix}.offset_kernel": self.offset_kernel,
            f"{prefix}.offset_bias": self.offset_bias,
            f"{prefix}.main_kernel": self.main_kernel,
        }


@dataclass
class BranchParams:
    vmc_attn: SelfAttentionParams
    vmc_wq: Tensor
    vbd_conv1: Tensor  # (d, d, 3, 3)
    vbd_conv2: Tensor
    vbd_wq: Tensor
    wk: Tensor         # shared keys/values across VMC/VBD/OQ
    wv: Tensor
    oq_wq: Tensor
    fusion_logits: Tensor  # (1, 3) -> softmax -> (alpha, beta, gamma)

    def named(self, prefix: str = "branches") -> dict[str, Tensor]:
        out = self.vmc_attn.named(f"{prefix}.vmc_attn")
        for k in ("vmc_wq", "vbd_conv1", "vbd_conv2", "vbd_wq",
                  "wk", "wv", "oq_wq", "fusion_logits"):
            out[f"{prefix}.{k}"] = getattr(self, k)
        return out


@dataclass
class MustParams:
    config: ModelConfig
    encoder: PatchEncoderParams
    dconv: DeformableConvParams
    branches: BranchParams

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.encoder.named("encoder")
        out.update(self.dconv.named("dconv"))
        out.update(self.branches.named("branches"))
        return out


@dataclass
class BranchOutput:
    f_vmc: Tensor
    f_vbd: Tensor
    f_oq: Tensor
    a_vmc: Tensor
    a_vbd: Tensor
    a_g: Tensor
    a_fused: Tensor
    weights: tuple[float, float, float]  # (alpha, beta, gamma) values


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _attn_params(dim: int, rng: np.random.Generator) -> SelfAttentionParams:
    # 1/sqrt(d) keeps dot-product scores near unit spread for unit-variance
    # tokens
    sd = 1.0 / math.sqrt(dim)
    qk = sd
    return SelfAttentionParams(
        wq=ag.parameter(rng.normal(0.0, qk, (dim, dim))),
        wk=ag.parameter(rng.normal(0.0, qk, (dim, dim))),
        wv=ag.parameter(rng.normal(0.0, sd, (dim, dim))),
        bq=ag.parameter(np.zeros((1, dim))),
        bk=ag.parameter(np.zeros((1, dim))),
        bv=ag.parameter(np.zeros((1, dim))),
    )


def init_patch_encoder(config: ModelConfig, rng: np.random.Generator) -> PatchEncoderParams:
    p2 = config.patch_size ** 2
    # tokens start as gain * E^T (patch - 0.7): the bias cancels the typical
    # background level while E itself stays sensitive to absolute intensity,
    # which carries the ridge-depth information downstream heads rely on
    embed = rng.normal(0.0, 6.0 / math.sqrt(p2), (p2, config.dim))
    d = config.dim
    return PatchEncoderParams(
        embed=ag.parameter(embed),
        embed_bias=ag.parameter(-0.7 * embed.sum(axis=0, keepdims=True)),
        attn=_attn_params(config.dim, rng),
        mlp_w1=ag.parameter(rng.normal(0.0, 1.0 / math.sqrt(d), (d, 2 * d))),
        mlp_b1=ag.parameter(rng.uniform(-0.8, 0.0, (1, 2 * d))),
        mlp_w2=ag.parameter(rng.normal(0.0, 0.5 / math.sqrt(2 * d), (2 * d, d))),
    )


def init_must_params(config: ModelConfig, rng: np.random.Generator) -> MustParams:
    d = config.dim
    sd = 1.0 / math.sqrt(d)
    qk = sd
    conv_sd = 1.0 / math.sqrt(d * 9)
    # offsets start at zero so alignment begins as a plain conv; the main
    # kernel starts near identity so vessel tokens are meaningful at init
    main = np.zeros((d, d, 3, 3))
    main[np.arange(d), np.arange(d), 1, 1] = 1.0
    main += rng.normal(0.0, 0.02, main.shape)
    dconv = DeformableConvParams(
        offset_kernel=ag.parameter(np.zeros((18, d, 3, 3))),
        offset_bias=ag.parameter(np.zeros((18, 1, 1))),
        main_kernel=ag.parameter(main),
    )
    branches = BranchParams(
        vmc_attn=_attn_params(d, rng),
        vmc_wq=ag.parameter(rng.normal(0.0, qk, (d, d))),
        vbd_conv1=ag.parameter(rng.normal(0.0, conv_sd * 3, (d, d, 3, 3))),
        vbd_conv2=ag.parameter(rng.normal(0.0, conv_sd * 3, (d, d, 3, 3))),
        vbd_wq=ag.parameter(rng.normal(0.0, qk, (d, d))),
        wk=ag.parameter(rng.normal(0.0, qk, (d, d))),
        wv=ag.parameter(rng.normal(0.0, sd, (d, d))),
        oq_wq=ag.parameter(rng.normal(0.0, qk, (d, d))),
        fusion_logits=ag.parameter(np.zeros((1, 3))),
    )
    return MustParams(config, init_patch_encoder(config, rng), dconv, branches)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def image_to_patches(image: np.ndarray, patch: int) -> np.ndarray:
    """Non-overlapping patches flattened row-major: (n, patch^2)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ShapeError(f"expected a square 2-D image, got {image.shape}")
    size = image.shape[0]
    if size % patch != 0:
        raise ShapeError(f"image size {size} not divisible by patch {patch}")
    g = size // patch
    return (image.reshape(g, patch, g, patch)
            .transpose(0, 2, 1, 3)
            .reshape(g * g, patch * patch))


def self_attention(x: Tensor, p: SelfAttentionParams, dim: int) -> Tensor:
    """Single-head scaled dot-product self-attention with residual."""
    q = ag.add(ag.matmul(x, p.wq), p.bq)
    k = ag.add(ag.matmul(x, p.wk), p.bk)
    v = ag.add(ag.matmul(x, p.wv), p.bv)
    a = ag.softmax_rows(ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / math.sqrt(dim)))
    return ag.add(x, ag.matmul(a, v))


def encode(image, params: PatchEncoderParams, config: ModelConfig,
           source: str) -> TokenGrid:
    """Embed patches and contextualize them with one self-attention layer."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (config.image_size, config.image_size):
        raise ShapeError(f"expected {config.image_size}x{config.image_size} image, "
                         f"got {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise DomainError("pixel values must lie in [0, 1]")
    patches = ag.constant(image_to_patches(image, config.patch_size))
    x = ag.add(ag.matmul(patches, params.embed), params.embed_bias)
    x = self_attention(x, params.attn, config.dim)
    hidden = ag.relu(ag.add(ag.matmul(x, params.mlp_w1), params.mlp_b1))
    x = ag.add(x, ag.matmul(hidden, params.mlp_w2))
    return TokenGrid(x, config.grid, source)


def to_grid(tokens: Tensor, g: int) -> Tensor:
    """(n, d) -> (d, g, g) channel-first spatial layout."""
    return ag.reshape(ag.transpose(tokens), (tokens.shape[1], g, g))


def from_grid(grid_tensor: Tensor) -> Tensor:
    """(d, g, g) -> (n, d)."""
    d, g, _ = grid_tensor.shape
    return ag.transpose(ag.reshape(grid_tensor, (d, g * g)))


# ---------------------------------------------------------------------------
# deformable alignment and vessel tokens
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _base_tap_coords(g: int) -> np.ndarray:
    """(9*g*g, 2) base sample positions: tap-major, then row-major grid."""
    coords = np.empty((9 * g * g, 2))
    idx = 0
    for dy, dx in ag.CONV_TAPS:
        for i in range(g):
            for j in range(g):
                coords[idx, 0] = i + dy
                coords[idx, 1] = j + dx
                idx += 1
    return coords


def deformable_align(f_c: TokenGrid, params: DeformableConvParams,
                     config: ModelConfig) -> TokenGrid:
    """Deformable 3x3 convolution over the contrast token grid.

    A plain conv predicts per-tap (dy, dx) offsets (18 channels); each
    output token is the main kernel applied to bilinear samples at the
    offset tap positions. With zero offset weights this reduces exactly to
    an ordinary zero-padded conv.
    """
    if f_c.source != "contrast":
        raise UsageError(f"deformable_align expects contrast tokens, got {f_c.source!r}")
    g, d = config.grid, config.dim
    grid_t = to_grid(f_c.tokens, g)

    offsets = ag.add(ag.conv2d(grid_t, params.offset_kernel), params.offset_bias)
    offsets = ag.reshape(offsets, (9, 2, g, g))
    offsets = ag.transpose_axes(offsets, (0, 2, 3, 1))
    offsets = ag.reshape(offsets, (9 * g * g, 2))
    coords = ag.add(ag.constant(_base_tap_coords(g)), offsets)

    samples = ag.bilinear_sample(grid_t, coords)          # (d, 9*g*g)
    samples = ag.reshape(samples, (d, 9, g * g))
    samples = ag.reshape(samples, (d * 9, g * g))         # rows: channel-major taps
    out = ag.matmul(ag.reshape(params.main_kernel, (d, d * 9)), samples)
    return TokenGrid(ag.transpose(out), g, "contrast")


def vessel_tokens(f_c: TokenGrid, f_m: TokenGrid, params: MustParams) -> TokenGrid:
    """Aligned contrast tokens minus mask tokens."""
    if f_c.source != "contrast" or f_m.source != "mask":
        raise UsageError(
            f"vessel_tokens expects (contrast, mask), got ({f_c.source!r}, {f_m.source!r})")
    if f_c.tokens.shape != f_m.tokens.shape:
        raise ShapeError("contrast and mask token grids differ in shape")
    aligned = deformable_align(f_c, params.dconv, params.config)
    return TokenGrid(ag.sub(aligned.tokens, f_m.tokens), f_c.grid, "vessel")


# ---------------------------------------------------------------------------
# branches
# ---------------------------------------------------------------------------

def _cross_attention(q: Tensor, f_g: TokenGrid, branches: BranchParams,
                     dim: int) -> tuple[Tensor, Tensor]:
    k = ag.matmul(f_g.tokens, branches.wk)
    v = ag.matmul(f_g.tokens, branches.wv)
    a = ag.softmax_rows(ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / math.sqrt(dim)))
    return a, ag.matmul(a, v)


def vmc_branch(f_v: TokenGrid, f_g: TokenGrid, branches: BranchParams,
               dim: int) -> tuple[Tensor, Tensor]:
    """Globally self-attended vessel tokens query the generated tokens."""
    s = self_attention(f_v.tokens, branches.vmc_attn, dim)
    q = ag.matmul(s, branches.vmc_wq)
    return _cross_attention(q, f_g, branches, dim)


def vbd_branch(f_v: TokenGrid, f_g: TokenGrid, branches: BranchParams,
               config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Locally convolved vessel tokens query the generated tokens."""
    grid_t = to_grid(f_v.tokens, config.grid)
    h = ag.conv2d(grid_t, branches.vbd_conv1)
    h = ag.relu(h)
    h = ag.conv2d(h, branches.vbd_conv2)
    q = ag.matmul(from_grid(h), branches.vbd_wq)
    return _cross_attention(q, f_g, branches, config.dim)


def fusion_weights(branches: BranchParams) -> tuple[Tensor, Tensor, Tensor]:
    """(alpha, beta, gamma) as (1, 1) tensors.

    alpha and beta come from the softmax of the three logits; gamma is
    computed as 1 - alpha - beta so the left-to-right float sum
    alpha + beta + gamma is exactly 1.
    """
    probs = ag.softmax_rows(branches.fusion_logits)
    alpha = ag.slice_cols(probs, 0, 1)
    beta = ag.slice_cols(probs, 1, 2)
    gamma = ag.sub(ag.constant([[1.0]]), ag.add(alpha, beta))
    return alpha, beta, gamma


def oq_branch(f_g: TokenGrid, a_vmc: Tensor, a_vbd: Tensor,
              branches: BranchParams, dim: int):
    """Convex mix of the generated image's own attention map with the VMC
    and VBD maps, applied to the shared values."""
    q_g = ag.matmul(f_g.tokens, branches.oq_wq)
    k_g = ag.matmul(f_g.tokens, branches.wk)
    v_g = ag.matmul(f_g.tokens, branches.wv)
    a_g = ag.softmax_rows(ag.scale(ag.matmul(q_g, ag.transpose(k_g)), 1.0 / math.sqrt(dim)))
    alpha, beta, gamma = fusion_weights(branches)
    a_fused = ag.add(ag.add(ag.mul(alpha, a_g), ag.mul(beta, a_vmc)),
                     ag.mul(gamma, a_vbd))
    f_oq = ag.matmul(a_fused, v_g)
    return f_oq, a_g, a_fused, (alpha.item(), beta.item(), gamma.item())


def must_forward(mask, contrast, generated, params: MustParams) -> BranchOutput:
    """Full forward pass: encode the three images, extract vessel tokens,
    and run the three branches. Deterministic given params."""
    cfg = params.config
    f_m = encode(mask, params.encoder, cfg, "mask")
    f_c = encode(contrast, params.encoder, cfg, "contrast")
    f_g = encode(generated, params.encoder, cfg, "generated")
    f_v = vessel_tokens(f_c, f_m, params)
    a_vmc, f_vmc = vmc_branch(f_v, f_g, params.branches, cfg.dim)
    a_vbd, f_vbd = vbd_branch(f_v, f_g, params.branches, cfg)
    f_oq, a_g, a_fused, weights = oq_branch(f_g, a_vmc, a_vbd, params.branches, cfg.dim)
    return BranchOutput(f_vmc, f_vbd, f_oq, a_vmc, a_vbd, a_g, a_fused, weights)


# ---------------------------------------------------------------------------
# parameter checkpoints
# ---------------------------------------------------------------------------

def save_params(path, params: dict[str, Tensor], meta: dict | None = None) -> None:
    """Versioned JSON checkpoint mapping names to shape + flat float64 data.

    Floats are serialized with repr so values round-trip bit-exactly.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise UsageError(f"not a parameter checkpoint: {path}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise UsageError(f"unsupported checkpoint version {payload.get('version')}")
    arrays = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    return arrays, payload.get("meta", {})
