"""Token-set transformer: localized vector self-attention blocks and pooling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry
from .autodiff import Tensor
from .errors import ConfigError
from .geometry import OrientedPointSet
from .layers import BatchNorm, Linear, Module
from .tokenizer import RITokenizer, TokenizerConfig, TokenSet

ATTENTION_TYPES = ("vector", "none")


@dataclass
class TransformerConfig:
    block_k: list = field(default_factory=lambda: [4, 8])
    latent: int = 256
    attention: str = "vector"
    positional_encoding: bool = False

    @property
    def num_blocks(self):
        return len(self.block_k)

    def validate(self, token_count=None):
        if self.num_blocks < 1:
            raise ConfigError("transformer.block_k", "at least one block is required")
        if any(int(k) != k or k < 1 for k in self.block_k):
            raise ConfigError("transformer.block_k", f"neighbour counts must be positive integers, got {self.block_k}")
        if int(self.latent) != self.latent or self.latent < 1:
            raise ConfigError("transformer.latent", f"must be a positive integer, got {self.latent}")
        if self.attention not in ATTENTION_TYPES:
            raise ConfigError(
                "transformer.attention",
                f"{self.attention!r} is not supported (choose from {ATTENTION_TYPES})",
            )
        if token_count is not None:
            t = token_count
            for i, k in enumerate(self.block_k):
                if t % 2:
                    raise ConfigError(
                        "tokenizer.token_count",
                        f"{token_count} tokens cannot be halved {self.num_blocks} times",
                    )
                if k > t:
                    raise ConfigError("transformer.block_k", f"block {i} has k={k} > {t} input tokens")
                t //= 2
        return self


def _batched(tokens: TokenSet):
    pts = np.asarray(tokens.token_points, dtype=np.float64)
    feats = ad.as_tensor(tokens.token_feats)
    if pts.ndim == 2:
        return pts[None], ad.reshape(feats, (1,) + feats.shape), True
    return pts, feats, False


def select_survivors(points, k):
    """FPS halving and neighbour lookup for a batch of token point sets.

    points: (B, T, 3). FPS starts at the token nearest the centroid. Returns
    survivor indices (B, T/2) and neighbour indices into all T tokens (B, T/2, k).
    """
    B, T, _ = points.shape
    if T % 2:
        raise ValueError(f"sa_block: token count must be even, got {T}")
    if k > T:
        raise ValueError(f"sa_block: k={k} exceeds {T} input tokens")
    keep = np.empty((B, T // 2), dtype=np.int64)
    nbr = np.empty((B, T // 2, k), dtype=np.int64)
    for b in range(B):
        p = points[b]
        centroid = p.mean(axis=0)
        start = int(np.argmin(np.einsum("ij,ij->i", p - centroid, p - centroid)))
        keep[b] = geometry.fps(p, T // 2, start)
        nbr[b] = geometry.knn(p[keep[b]], p, k)
    return keep, nbr


class SABlock(Module):
    def __init__(self, width, k, rng, dtype=np.float64, attention="vector", positional_encoding=False):
        self.k = k
        self.attention = attention
        self.alpha = Linear(width, width, rng, dtype)
        self.beta = Linear(width, width, rng, dtype)
        self.gamma = Linear(width, width, rng, dtype)
        self.pos = Linear(3, width, rng, dtype) if positional_encoding else None
        self.bn = BatchNorm(width, dtype)
        self.fc1 = Linear(width, width, rng, dtype)
        self.fc2 = Linear(width, width, rng, dtype)

    def __call__(self, tokens: TokenSet, training=False) -> TokenSet:
        pts, x, single = _batched(tokens)
        B = pts.shape[0]
        keep, nbr = select_survivors(pts, self.k)
        bidx = np.arange(B)[:, None]
        xs = ad.gather(x, (bidx, keep))  # (B, To, D)
        values = ad.gather(self.gamma(x), (bidx[:, :, None], nbr))  # (B, To, k, D)
        if self.attention == "vector":
            q = self.alpha(xs)
            kf = ad.gather(self.beta(x), (bidx[:, :, None], nbr))
            scores = ad.reshape(q, q.shape[:2] + (1, q.shape[2])) - kf
            if self.pos is not None:
                rel = pts[bidx, keep][:, :, None, :] - pts[bidx[:, :, None], nbr]
                delta = self.pos(Tensor(rel.astype(x.dtype)))
                scores = scores + delta
                values = values + delta
            y = ad.sum(ad.softmax(scores, axis=2) * values, axis=2)
        else:
            y = ad.sum(values, axis=2)
        h = self.bn(y + xs, training)
        h = ad.relu(self.fc1(h))
        h = ad.relu(self.fc2(h))
        out_pts = pts[bidx, keep]
        if single:
            return TokenSet(out_pts[0], ad.reshape(h, h.shape[1:]))
        return TokenSet(out_pts, h)


def sa_block(tokens: TokenSet, block: SABlock, training=False) -> TokenSet:
    return block(tokens, training)


def aggregate(tokens: TokenSet, fc: Linear):
    """Average-pool token features, project, and L2-normalize."""
    _, x, single = _batched(tokens)
    z = ad.l2_normalize(fc(ad.mean(x, axis=1)), axis=-1)
    return ad.reshape(z, z.shape[1:]) if single else z


class RIPT(Module):
    """Tokenizer, self-attention blocks and aggregation into a unit latent."""

    def __init__(self, tok_cfg: TokenizerConfig, tr_cfg: TransformerConfig, rng, dtype=np.float64):
        tok_cfg.validate()
        tr_cfg.validate(tok_cfg.token_count)
        self.tok_cfg = tok_cfg
        self.tr_cfg = tr_cfg
        self.tokenizer = RITokenizer(tok_cfg, rng, dtype)
        self.blocks = [
            SABlock(tok_cfg.width, k, rng, dtype, tr_cfg.attention, tr_cfg.positional_encoding)
            for k in tr_cfg.block_k
        ]
        self.agg = Linear(tok_cfg.width, tr_cfg.latent, rng, dtype)

    @property
    def dtype(self):
        return self.agg.weight.dtype

    def describe(self, ps: OrientedPointSet, start=0):
        return self.tokenizer.describe(ps, start)

    def encode(self, descriptions, training=False):
        """Latents (B, latent) for a list of token descriptions."""
        pts = np.stack([d.token_points for d in descriptions])
        desc = np.stack([d.descriptors for d in descriptions])
        tokens = TokenSet(pts, self.tokenizer.project(desc))
        for block in self.blocks:
            tokens = block(tokens, training)
        return aggregate(tokens, self.agg)

    def __call__(self, sets, training=False, start=0):
        single = isinstance(sets, OrientedPointSet)
        sets = [sets] if single else list(sets)
        z = self.encode([self.describe(ps, start) for ps in sets], training)
        return ad.reshape(z, z.shape[1:]) if single else z


def ript_forward(ps, model: RIPT, mode="eval", start=0):
    """Latent vector(s) for one or several point sets as a numpy array."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    with ad.no_grad():
        return model(ps, training=(mode == "train"), start=start).data


class Projector(Module):
    """Three affine layers; GELU after the first two."""

    def __init__(self, latent, hidden, out_dim, rng, dtype=np.float64):
        h1, h2 = hidden
        self.fc1 = Linear(latent, h1, rng, dtype)
        self.fc2 = Linear(h1, h2, rng, dtype)
        self.fc3 = Linear(h2, out_dim, rng, dtype)

    def __call__(self, z):
        return self.fc3(ad.gelu(self.fc2(ad.gelu(self.fc1(z)))))


class Network(Module):
    """Encoder followed by the projector head (one student or teacher)."""

    def __init__(self, tok_cfg, tr_cfg, hidden, out_dim, rng, dtype=np.float64):
        self.encoder = RIPT(tok_cfg, tr_cfg, rng, dtype)
        self.head = Projector(tr_cfg.latent, hidden, out_dim, rng, dtype)

    def __call__(self, descriptions, training=False):
        return self.head(self.encoder.encode(descriptions, training))
