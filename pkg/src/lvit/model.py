"""The Double-U LViT network: a U-shaped CNN branch and a U-shaped ViT branch
that merges text tokens, exchanging features at every level."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import BatchNorm, Conv2d, ConvBNReLU, LayerNorm, Linear, Module, Parameter
from .seeding import stream
from .tensor import Tensor
from .text import PAD_ID, VOCAB, embed_tokens

MODEL_SIZES = {"T": 1, "S": 4, "B": 6}


class ConfigError(ValueError):
    pass


@dataclass
class LViTConfig:
    in_channels: int = 1
    image_size: int = 64
    levels: int = 4
    channels_per_level: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    patch_size: int = 2
    heads: int = 4
    vit_layers_per_module: int = 1
    text_embed_dim: int = 32
    max_tokens: int = 16
    num_classes: int = 1
    mlp_activation: str = "gelu"
    pos_embed: bool = True
    vocab_size: int = len(VOCAB)

    def __post_init__(self):
        self.channels_per_level = list(self.channels_per_level)
        self.validate()

    def validate(self) -> None:
        ch = self.channels_per_level
        if self.levels < 1 or len(ch) != self.levels:
            raise ConfigError(f"channels_per_level has {len(ch)} entries for {self.levels} levels")
        if any(b <= a for a, b in zip(ch, ch[1:])):
            raise ConfigError(f"channels_per_level must be strictly increasing: {ch}")
        if self.image_size % (2**self.levels):
            raise ConfigError(f"image_size {self.image_size} not divisible by 2^{self.levels}")
        deepest = self.image_size >> (self.levels - 1)
        if deepest % self.patch_size:
            raise ConfigError(f"deepest feature size {deepest} not divisible by patch_size {self.patch_size}")
        for c in ch:
            if c % self.heads:
                raise ConfigError(f"dim {c} not divisible by {self.heads} heads")
        if self.vit_layers_per_module < 1:
            raise ConfigError("vit_layers_per_module must be ≥ 1")
        if self.mlp_activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown mlp_activation {self.mlp_activation!r}")

    @classmethod
    def for_size(cls, size: str, **overrides) -> "LViTConfig":
        if size not in MODEL_SIZES:
            raise ConfigError(f"model size must be one of {sorted(MODEL_SIZES)}, got {size!r}")
        return cls(vit_layers_per_module=MODEL_SIZES[size], **overrides)

    @classmethod
    def mini(cls, **overrides) -> "LViTConfig":
        """16×16 input, 2 levels, channels [4, 8], 1 ViT layer, 2 heads."""
        base = dict(image_size=16, levels=2, channels_per_level=[4, 8], heads=2, vit_layers_per_module=1,
                    text_embed_dim=8)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def grid(self, level: int) -> int:
        """Token-grid side length at ``level``."""
        return (self.image_size >> level) // self.patch_size


# -- token-grid helpers ---------------------------------------------------


def tokens_to_grid(x: Tensor, side: int) -> Tensor:
    """(N, side², D) → (N, D, side, side)."""
    n, t, d = x.shape
    if t != side * side:
        raise T.ShapeError(f"{t} tokens do not form a {side}x{side} grid")
    return T.transpose(T.reshape(x, (n, side, side, d)), (0, 3, 1, 2))


def grid_pool2(x: Tensor) -> Tensor:
    """2×2 average pooling over the token grid: (N, T, D) → (N, T/4, D)."""
    n, t, d = x.shape
    side = int(round(np.sqrt(t)))
    if side * side != t or side % 2:
        raise T.ShapeError(f"cannot 2x2-pool a token grid of {t} tokens")
    h = side // 2
    g = T.reshape(x, (n, h, 2, h, 2, d))
    return T.reshape(T.mean(g, (2, 4)), (n, h * h, d))


def grid_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbour ×2 upsampling of the token grid: (N, T, D) → (N, 4T, D)."""
    n, t, d = x.shape
    side = int(round(np.sqrt(t)))
    if side * side != t:
        raise T.ShapeError(f"{t} tokens are not a square grid")
    idx = np.arange(2 * side) // 2
    g = T.reshape(x, (n, side, side, d))
    g = T.take(T.take(g, idx, axis=1), idx, axis=2)
    return T.reshape(g, (n, 4 * t, d))


def patchify(x: Tensor, size: int) -> Tensor:
    """(N, C, H, W) → (N, (H/S)(W/S), C·S·S), row-major over the patch grid."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise T.ShapeError(f"extent {h}x{w} not divisible by patch size {size}")
    g = T.reshape(x, (n, c, h // size, size, w // size, size))
    g = T.transpose(g, (0, 2, 4, 1, 3, 5))
    return T.reshape(g, (n, (h // size) * (w // size), c * size * size))


def unpatchify(x: Tensor, size: int, channels: int, side: int) -> Tensor:
    n = x.shape[0]
    g = T.reshape(x, (n, side, side, channels, size, size))
    g = T.transpose(g, (0, 3, 1, 4, 2, 5))
    return T.reshape(g, (n, channels, side * size, side * size))


# -- building blocks ------------------------------------------------------


class ConvBlock(Module):
    """Two Conv3×3 → BN → ReLU units."""

    def __init__(self, c_in: int, c_out: int, rng):
        self.c_in = c_in
        self.unit1 = ConvBNReLU(c_in, c_out, rng)
        self.unit2 = ConvBNReLU(c_out, c_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.c_in:
            raise T.ShapeError(f"conv block expects {self.c_in} channels, got {x.shape[1]}")
        return self.unit2(self.unit1(x))


class PatchEmbed(Module):
    def __init__(self, channels: int, dim: int, size: int, tokens: int, rng, pos_embed: bool):
        self.size = size
        self.proj = Linear(channels * size * size, dim, rng)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(tokens, dim))) if pos_embed else None

    def forward(self, x: Tensor) -> Tensor:
        out = self.proj(patchify(x, self.size))
        return out + self.pos if self.pos is not None else out


class MHSA(Module):
    def __init__(self, dim: int, heads: int, rng):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        # a key bias only shifts each query's logits uniformly, which softmax cancels
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        n, t, d = x.shape
        return T.transpose(T.reshape(x, (n, t, self.heads, d // self.heads)), (0, 2, 1, 3))

    def forward(self, x: Tensor) -> Tensor:
        n, t, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        o = T.attention(q, k, v, 1.0 / np.sqrt(d // self.heads))
        o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (n, t, d))
        return self.out(o)


class ViTBlock(Module):
    """Pre-norm residual MHSA followed by a pre-norm residual MLP (hidden 4D)."""

    def __init__(self, dim: int, heads: int, rng, activation: str = "gelu"):
        self.norm1 = LayerNorm(dim)
        self.attn = MHSA(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, 4 * dim, rng)
        self.fc2 = Linear(4 * dim, dim, rng)
        self._act = T.gelu if activation == "gelu" else T.relu

    def forward(self, x: Tensor) -> Tensor:
        x = self.attn(self.norm1(x)) + x
        return self.fc2(self._act(self.fc1(self.norm2(x)))) + x


class ViTStack(Module):
    def __init__(self, dim: int, heads: int, layers: int, rng, activation: str):
        self.blocks = [ViTBlock(dim, heads, rng, activation) for _ in range(layers)]

    def forward(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


class DownViT(Module):
    """Pool the upper level's tokens 2×2, project D→D', add this level's image
    tokens and run the transformer stack."""

    def __init__(self, d_prev: int, dim: int, heads: int, layers: int, rng, activation: str):
        self.proj = Linear(d_prev, dim, rng)
        self.vit = ViTStack(dim, heads, layers, rng, activation)

    def forward(self, y_prev: Tensor, x_img: Tensor) -> Tensor:
        if y_prev.shape[1] != 4 * x_img.shape[1]:
            raise T.ShapeError(f"levels not adjacent: {y_prev.shape[1]} tokens above, {x_img.shape[1]} here")
        return self.vit(self.proj(grid_pool2(y_prev)) + x_img)


class UpViT(Module):
    """Nearest ×2 token upsampling, projection D'→D, skip add, transformer stack."""

    def __init__(self, d_deep: int, dim: int, heads: int, layers: int, rng, activation: str):
        self.proj = Linear(d_deep, dim, rng)
        self.vit = ViTStack(dim, heads, layers, rng, activation)

    def forward(self, y_deep: Tensor, skip: Tensor) -> Tensor:
        if 4 * y_deep.shape[1] != skip.shape[1]:
            raise T.ShapeError(f"level mismatch: {y_deep.shape[1]} deep tokens vs {skip.shape[1]} skip tokens")
        return self.vit(self.proj(grid_nearest2(y_deep)) + skip)


class CTBN(Module):
    """Text tokens → 1×1 projection (Dt→D) → BatchNorm → ReLU → linear resampling
    of the token axis from the report length to the image-token count."""

    def __init__(self, text_dim: int, dim: int, rng):
        self.proj = Linear(text_dim, dim, rng, bias=False)
        self.bn = BatchNorm(dim, channel_axis=2)

    def forward(self, text_embed: Tensor, lengths, target_tokens: int) -> Tensor:
        lengths = np.asarray(lengths, dtype=int)
        if np.any(lengths < 1):
            raise ValueError("empty token sequence")
        n, m, _ = text_embed.shape
        mask = (np.arange(m)[None, :] < lengths[:, None])[..., None]
        h = T.relu(self.bn(self.proj(text_embed), mask=mask))
        resample = np.zeros((n, target_tokens, m), dtype=h.dtype)
        for i, length in enumerate(lengths):
            resample[i, :, :length] = T.interp_matrix(int(length), target_tokens, h.dtype)
        return Tensor(resample) @ h


class Interaction(Module):
    """Tokens → grid → bilinear ×S → Conv1×1 (bias) → ReLU, residual onto the CNN map.

    No normalisation here: a batch norm would cancel any per-channel offset the
    ViT branch produces, leaving its final output bias without gradient.
    """

    def __init__(self, dim: int, channels: int, patch: int, rng):
        self.patch = patch
        self.fuse = Conv2d(dim, channels, 1, rng, bias=True)

    def forward(self, tokens: Tensor, cnn_feat: Tensor) -> Tensor:
        n, c, h, w = cnn_feat.shape
        side = h // self.patch
        if tokens.shape[1] != side * (w // self.patch) or tokens.shape[2] != self.fuse.weight.shape[1]:
            raise T.ShapeError(f"token grid {tokens.shape} does not match feature map {cnn_feat.shape}")
        g = T.upsample_bilinear(tokens_to_grid(tokens, side), self.patch)
        return T.relu(self.fuse(g)) + cnn_feat


class PLAM(Module):
    """Pixel-level attention: channel attention from parallel GAP/GMP branches
    (concatenated and added), then spatial attention from channel mean/max."""

    def __init__(self, channels: int, rng):
        hidden = max(channels // 4, 1)
        self.cat1 = Linear(2 * channels, hidden, rng)
        self.cat2 = Linear(hidden, channels, rng)
        self.add1 = Linear(channels, hidden, rng)
        self.add2 = Linear(hidden, channels, rng)
        # edge padding keeps the map of a spatially uniform input uniform
        self.spatial = Conv2d(2, 1, 3, rng, padding=1, bias=True, mode="edge")
        # gate logits start small so both sigmoids begin near 0.5, not saturated
        for layer in (self.cat2, self.add2, self.spatial):
            layer.weight.data *= 0.1
        self._last_channel: np.ndarray | None = None
        self._last_spatial: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        gap = T.mean(x, (2, 3))
        gmp = T.amax(T.reshape(x, (n, c, h * w)), axis=-1)
        a_cat = self.cat2(T.relu(self.cat1(T.concat([gap, gmp], axis=1))))
        a_add = self.add2(T.relu(self.add1(gap + gmp)))
        ch = T.sigmoid(a_cat + a_add)
        x = x * T.reshape(ch, (n, c, 1, 1))
        desc = T.concat([T.mean(x, 1, keepdims=True), T.amax(x, axis=1, keepdims=True)], axis=1)
        sp = T.sigmoid(self.spatial(desc))
        self._last_channel, self._last_spatial = ch.data, sp.data
        return x * sp


# -- the network ------------------------------------------------------------


class LViT(Module):
    """Double-U segmentation network.

    ``forward(image, text_tokens)`` returns per-pixel foreground probabilities;
    ``text_tokens`` is an int array (N, max_tokens) of vocabulary ids or None.
    """

    SALIENCY_LAYERS = ("down_cnn", "down_vit")

    def __init__(self, config: LViTConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = stream(seed, "init")
        cfg = config
        ch, L, S = cfg.channels_per_level, cfg.levels, cfg.patch_size
        act = cfg.mlp_activation
        layers = cfg.vit_layers_per_module

        self.down_cnn = [ConvBlock(cfg.in_channels if i == 0 else ch[i - 1], ch[i], rng) for i in range(L)]
        self.patch_embed = [PatchEmbed(ch[i], ch[i], S, cfg.grid(i) ** 2, rng, cfg.pos_embed) for i in range(L)]
        table = rng.normal(0.0, 0.02, size=(cfg.vocab_size, cfg.text_embed_dim))
        table[PAD_ID] = 0.0
        self.text_embedding = Parameter(table)
        self.ctbn = CTBN(cfg.text_embed_dim, ch[0], rng)
        self.down_vit = [ViTStack(ch[0], cfg.heads, layers, rng, act)]
        self.down_vit += [DownViT(ch[i - 1], ch[i], cfg.heads, layers, rng, act) for i in range(1, L)]
        self.up_vit = [UpViT(ch[i + 1], ch[i], cfg.heads, layers, rng, act) for i in range(L - 1)]
        self.interact = [Interaction(ch[i], ch[i], S, rng) for i in range(L)]
        self.plam = [PLAM(ch[i], rng) for i in range(L)]
        self.up_cnn = [ConvBlock(ch[i] + ch[i + 1], ch[i], rng) for i in range(L - 1)]
        self.head = Conv2d(ch[0], cfg.num_classes, 1, rng, bias=True)
        self.activations: dict[str, Tensor] = {}

    # individual stages, exposed for testing ------------------------------
    def down_cnn_step(self, y: Tensor, level: int) -> Tensor:
        """Conv block of ``level`` followed by 2×2 max pooling."""
        return T.maxpool2d(self.down_cnn[level](y), 2)

    def embed_text(self, text_tokens) -> tuple[Tensor, np.ndarray]:
        ids = np.asarray(text_tokens, dtype=np.intp)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] > self.config.max_tokens:
            raise ValueError(f"{ids.shape[1]} tokens exceed max_tokens={self.config.max_tokens}")
        lengths = (ids != PAD_ID).sum(axis=1)
        return embed_tokens(ids, self.text_embedding), lengths

    def forward_logits(self, image: Tensor, text_tokens=None) -> Tensor:
        cfg = self.config
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image), dtype=self.dtype)
        if image.ndim != 4 or image.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ConfigError(
                f"image shape {image.shape} does not match config "
                f"(N, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size})"
            )
        if image.dtype != self.dtype:
            image = Tensor(image.data.astype(self.dtype))
        L = cfg.levels
        acts: dict[str, Tensor] = {}

        feats = []
        h = image
        for i in range(L):
            if i:
                h = T.maxpool2d(h, 2)
            h = self.down_cnn[i](h)
            feats.append(h)
            acts[f"down_cnn.{i + 1}"] = h

        img_tokens = [self.patch_embed[i](feats[i]) for i in range(L)]
        x0 = img_tokens[0]
        if text_tokens is not None:
            emb, lengths = self.embed_text(text_tokens)
            if emb.shape[0] != image.shape[0]:
                raise ConfigError(f"{emb.shape[0]} text rows for {image.shape[0]} images")
            x0 = x0 + self.ctbn(emb, lengths, x0.shape[1])
        down = [self.down_vit[0](x0)]
        for i in range(1, L):
            down.append(self.down_vit[i](down[-1], img_tokens[i]))
        for i, y in enumerate(down):
            acts[f"down_vit.{i + 1}"] = y

        ups = [None] * L
        ups[L - 1] = down[L - 1]
        for i in range(L - 2, -1, -1):
            ups[i] = self.up_vit[i](ups[i + 1], down[i])

        skips = [self.plam[i](self.interact[i](ups[i], feats[i])) for i in range(L)]
        d = skips[L - 1]
        for i in range(L - 2, -1, -1):
            d = self.up_cnn[i](T.concat([skips[i], T.upsample_bilinear(d, 2)], axis=1))
        self.activations = acts
        return self.head(d)

    def forward(self, image: Tensor, text_tokens=None) -> Tensor:
        return T.sigmoid(self.forward_logits(image, text_tokens))

    def set_bn_update(self, enabled: bool) -> None:
        for m in self.modules():
            if isinstance(m, BatchNorm):
                m.update_stats = enabled

    # saliency -----------------------------------------------------------
    def saliency_layers(self) -> list[str]:
        return [f"down_cnn.{i + 1}" for i in range(self.config.levels)] + ["down_vit.1"]

    def saliency(self, image: Tensor, text_tokens=None, layer_name: str = "down_cnn.1") -> np.ndarray:
        """Gradient-weighted activation map of ``layer_name`` for one image, in [0, 1].

        The foreground-logit sum is differentiated w.r.t. the layer's activation,
        channel weights are the spatial mean of that gradient, and the ReLU of the
        weighted channel sum is bilinearly resized to the input and min-max
        normalised (a constant map becomes all zeros).
        """
        valid = self.saliency_layers()
        if layer_name not in valid:
            raise KeyError(f"unknown layer {layer_name!r}; valid layers: {', '.join(valid)}")
        if image.shape[0] != 1:
            raise ValueError("saliency expects a single image")
        was_training = self.training
        self.eval()
        try:
            logits = self.forward_logits(image, text_tokens)
            act = self.activations[layer_name]
            grads = T.backward(T.sum(logits[:, 0]), retain=[act])
        finally:
            self.zero_grad()
            self.train(was_training)
        a = act.data[0].astype(np.float64)
        g = grads.get(act, np.zeros_like(act.data))[0].astype(np.float64)
        if a.ndim == 2:  # tokens (T, D) → (D, side, side)
            side = int(round(np.sqrt(a.shape[0])))
            a = a.T.reshape(-1, side, side)
            g = g.T.reshape(-1, side, side)
        weights = g.mean(axis=(1, 2))
        cam = np.maximum(np.tensordot(weights, a, axes=1), 0.0)
        size = self.config.image_size
        cam = T.resize_bilinear(Tensor(cam[None, None], dtype=np.float64), size, size).data[0, 0]
        lo, hi = cam.min(), cam.max()
        if hi - lo <= 1e-12 * max(1.0, abs(hi)):
            return np.zeros((size, size))
        return (cam - lo) / (hi - lo)
