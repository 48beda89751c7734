"""Overlapping-patch transformer backbone.

Pipeline: image -> overlapping P x P windows (stride P - m) -> linear embedding
-> class token + learned positional encoding -> pre-LN transformer encoder ->
patch tokens re-laid onto a g x g grid -> residual conv blocks.

Patch order is row-major over the patch grid: patch ``i`` has grid row
``i // g`` and column ``i % g`` and its top-left pixel at
``(row * stride, col * stride)``. Inside a patch, values are flattened as
(pixel row, pixel column, channel).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .module import Module, he_conv, ones_param, trunc_normal, zeros_param
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    """A configuration violates a structural constraint."""


@dataclass(frozen=True)
class PatchConfig:
    image_height: int
    image_width: int
    channels: int
    patch_size: int
    overlap: int

    def __post_init__(self):
        H, W, P, m = self.image_height, self.image_width, self.patch_size, self.overlap
        if min(H, W, self.channels, P) < 1:
            raise ConfigError(f"image dims, channels and patch size must be positive (H={H}, W={W}, P={P})")
        if not 0 <= m < P:
            raise ConfigError(f"overlap must satisfy 0 <= m < P (P={P}, m={m})")
        if P > min(H, W):
            raise ConfigError(f"patch size P={P} exceeds image (H={H}, W={W})")
        s = P - m
        if (H - P) % s or (W - P) % s:
            raise ConfigError(
                f"(H - P) and (W - P) must be divisible by the stride P - m = {s} (H={H}, W={W}, P={P}, m={m})"
            )
        if (H - P) // s != (W - P) // s:
            raise ConfigError(f"patch grid must be square (H={H}, W={W}, P={P}, m={m})")

    @property
    def stride(self) -> int:
        return self.patch_size - self.overlap

    @property
    def patches_per_side(self) -> int:
        return (self.image_height - self.patch_size) // self.stride + 1

    @property
    def num_patches(self) -> int:
        return self.patches_per_side**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.embed_dim < 1 or self.heads < 1:
            raise ConfigError("embed_dim and heads must be positive")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim={self.embed_dim} not divisible by heads={self.heads}")
        if self.depth < 0:
            raise ConfigError(f"depth must be non-negative, got {self.depth}")
        if self.dropout != 0.0:
            raise ConfigError("dropout is not supported; set it to 0")

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


@lru_cache(maxsize=32)
def _patch_index(cfg: PatchConfig) -> np.ndarray:
    H, W, C, P, s, g = (
        cfg.image_height, cfg.image_width, cfg.channels, cfg.patch_size, cfg.stride, cfg.patches_per_side,
    )
    flat = np.arange(H * W * C).reshape(H, W, C)
    idx = np.empty((g * g, P * P * C), dtype=np.intp)
    for r in range(g):
        for c in range(g):
            idx[r * g + c] = flat[r * s : r * s + P, c * s : c * s + P].reshape(-1)
    idx.setflags(write=False)
    return idx


def extract_patches(image: Tensor, cfg: PatchConfig) -> Tensor:
    """Cut ``image`` (H x W x C) into the n x (P*P*C) matrix of overlapping windows."""
    expected = (cfg.image_height, cfg.image_width, cfg.channels)
    if image.shape != expected:
        raise ShapeError(f"extract_patches: image shape {image.shape} != configured {expected}")
    flat = T.reshape(image, (-1,))
    return T.take(flat, _patch_index(cfg), axis=0)


def embed(patches: Tensor, w_embed: Tensor, cls_token: Tensor, pos_enc: Tensor) -> Tensor:
    """``concat(cls, patches @ w_embed) + pos_enc``; returns (n+1) x D tokens."""
    n = patches.shape[0]
    D = w_embed.shape[1]
    if cls_token.shape != (1, D):
        raise ShapeError(f"embed: class token must be (1, {D}), got {cls_token.shape}")
    if pos_enc.shape != (n + 1, D):
        raise ShapeError(f"embed: positional encoding must be ({n + 1}, {D}), got {pos_enc.shape}")
    tokens = T.concat([cls_token, T.matmul(patches, w_embed)], axis=0)
    return tokens + pos_enc


class EncoderLayer(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        D, F = cfg.embed_dim, cfg.mlp_dim
        self.heads = cfg.heads
        self.ln1_gamma, self.ln1_beta = ones_param(D), zeros_param(D)
        self.w_qkv, self.b_qkv = trunc_normal(rng, (D, 3 * D)), zeros_param(3 * D)
        self.w_out, self.b_out = trunc_normal(rng, (D, D)), zeros_param(D)
        self.ln2_gamma, self.ln2_beta = ones_param(D), zeros_param(D)
        self.w_fc1, self.b_fc1 = trunc_normal(rng, (D, F)), zeros_param(F)
        self.w_fc2, self.b_fc2 = trunc_normal(rng, (F, D)), zeros_param(D)

    def attention(self, x: Tensor, attn_log: list | None = None) -> Tensor:
        L, D = x.shape
        h = self.heads
        dh = D // h
        qkv = T.linear(x, self.w_qkv, self.b_qkv)
        qkv = T.transpose(T.reshape(qkv, (L, 3, h, dh)), (1, 2, 0, 3))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
        weights = T.softmax(scores, axis=-1)
        if attn_log is not None:
            attn_log.append(weights.data.copy())
        ctx = T.reshape(T.transpose(T.matmul(weights, v), (1, 0, 2)), (L, D))
        return T.linear(ctx, self.w_out, self.b_out)

    def mlp(self, x: Tensor) -> Tensor:
        return T.linear(T.gelu(T.linear(x, self.w_fc1, self.b_fc1)), self.w_fc2, self.b_fc2)

    def __call__(self, x: Tensor, attn_log: list | None = None) -> Tensor:
        x = x + self.attention(T.layernorm(x, self.ln1_gamma, self.ln1_beta), attn_log)
        return x + self.mlp(T.layernorm(x, self.ln2_gamma, self.ln2_beta))


def encoder_forward(tokens: Tensor, layers: list[EncoderLayer], attn_log: list | None = None) -> Tensor:
    """Run the pre-LN stack. ``attn_log`` collects each layer's (heads, L, L) attention weights."""
    for layer in layers:
        tokens = layer(tokens, attn_log)
    return tokens


def reassemble(tokens: Tensor) -> Tensor:
    """Drop the class token and lay patch token ``i`` at grid cell ``(i // g, i % g)``."""
    n = tokens.shape[0] - 1
    g = math.isqrt(n)
    if g * g != n:
        raise ConfigError(f"reassemble: {n} patch tokens do not form a square grid")
    return T.reshape(tokens[1:], (g, g, tokens.shape[1]))


class ResidualBlock(Module):
    """``y = relu(x + conv3x3(relu(conv3x3(x))))`` with channels preserved."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.w1, self.b1 = he_conv(rng, 3, channels, channels), zeros_param(channels)
        self.w2, self.b2 = he_conv(rng, 3, channels, channels), zeros_param(channels)

    def __call__(self, x: Tensor) -> Tensor:
        branch = T.conv2d(T.relu(T.conv2d(x, self.w1, self.b1)), self.w2, self.b2)
        return T.relu(x + branch)


def residual_stack(fmap: Tensor, blocks: list[ResidualBlock]) -> Tensor:
    for block in blocks:
        fmap = block(fmap)
    return fmap


class Backbone(Module):
    def __init__(
        self,
        patch_cfg: PatchConfig,
        enc_cfg: EncoderConfig,
        residual_blocks: int = 2,
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        if residual_blocks < 0:
            raise ConfigError(f"residual_blocks must be >= 0, got {residual_blocks}")
        self.patch_cfg = patch_cfg
        self.enc_cfg = enc_cfg
        D, n = enc_cfg.embed_dim, patch_cfg.num_patches
        self.w_embed = trunc_normal(rng, (patch_cfg.patch_dim, D))
        self.cls_token = trunc_normal(rng, (1, D))
        self.pos_enc = trunc_normal(rng, (n + 1, D))
        self.layers = [EncoderLayer(enc_cfg, rng) for _ in range(enc_cfg.depth)]
        self.blocks = [ResidualBlock(D, rng) for _ in range(residual_blocks)]

    @property
    def out_channels(self) -> int:
        return self.enc_cfg.embed_dim

    def tokens(self, image: Tensor, attn_log: list | None = None) -> Tensor:
        patches = extract_patches(image, self.patch_cfg)
        seq = embed(patches, self.w_embed, self.cls_token, self.pos_enc)
        return encoder_forward(seq, self.layers, attn_log)

    def __call__(self, image: Tensor) -> Tensor:
        return residual_stack(reassemble(self.tokens(image)), self.blocks)
