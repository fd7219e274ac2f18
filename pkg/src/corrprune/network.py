"""LeCoT forward pass: Up layer, spatial/channel transformer blocks, prediction
heads, sort-and-prune, and the two-stage pruning pipeline.

Tensors are batched as (B, N, C): B pairs, N correspondences, C channels.
Nothing in here looks at row order, so every per-row operation is
permutation-equivariant in N.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import geometry

BLOCK_VARIANTS = ("S-then-C", "C-then-S", "C-then-C", "S-then-S", "vanilla", "attention-only")
PREDICTOR_VARIANTS = ("prediction-block", "simple-projection")
NORM_EPS = 1e-5
MIN_SUPPORT = 8
FALLBACK_TOP = 16


class ShapeMismatchError(ValueError):
    pass


class UnknownVariantError(ValueError):
    pass


class EmptyResultError(ValueError):
    pass


@dataclass
class NetworkConfig:
    d: int = 128
    L: int = 5
    H: int = 4
    po: int = 2
    prune_rate: float = 0.5
    num_modules: int = 2
    block_variant: str = "S-then-C"
    predictor_variant: str = "prediction-block"
    ff_ratio: int = 2

    def check(self) -> None:
        if self.d < 4 or self.H < 1 or self.d % self.H:
            raise ValueError(f"d={self.d} must be >= 4 and divisible by H={self.H}")
        if self.L < 1 or not 1 <= self.po <= self.L:
            raise ValueError(f"need 1 <= po <= L (po={self.po}, L={self.L})")
        if not 0.0 < self.prune_rate < 1.0:
            raise ValueError("prune_rate must lie in (0, 1)")
        if self.num_modules < 1:
            raise ValueError("num_modules must be >= 1")
        if self.ff_ratio < 1:
            raise ValueError("ff_ratio must be >= 1")
        if self.block_variant not in BLOCK_VARIANTS:
            raise UnknownVariantError(f"unknown block variant {self.block_variant!r}")
        if self.predictor_variant not in PREDICTOR_VARIANTS:
            raise UnknownVariantError(f"unknown predictor variant {self.predictor_variant!r}")


def _check_channels(x: torch.Tensor, c: int) -> None:
    if x.dim() != 3 or x.shape[-1] != c:
        raise ShapeMismatchError(f"expected (B, N, {c}), got {tuple(x.shape)}")


class UpLayer(nn.Module):
    """Per-row MLP k -> d."""

    def __init__(self, k: int, d: int):
        super().__init__()
        self.k = k
        self.fc1 = nn.Linear(k, d)
        self.fc2 = nn.Linear(d, d)

    def forward(self, x):
        _check_channels(x, self.k)
        return self.fc2(F.gelu(self.fc1(x)))


class SpatialMSA(nn.Module):
    """Multi-head self-attention across the N rows; no positional encoding."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.d, self.heads = d, heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def _split(self, x):
        B, N, _ = x.shape
        return x.view(B, N, self.heads, self.d // self.heads).transpose(1, 2)  # B, H, N, c

    def attention(self, x):
        _check_channels(x, self.d)
        q, k = self._split(self.q(x)), self._split(self.k(x))
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d // self.heads), dim=-1)

    def forward(self, x):
        a = self.attention(x)
        h = a @ self._split(self.v(x))
        B, _, N, _ = h.shape
        return self.out(h.transpose(1, 2).reshape(B, N, self.d))


class ChannelMSA(nn.Module):
    """Self-attention among channels, one (d/H x d/H) map per contiguous channel group.

    With ``residual`` the input is added back after the output MLP.
    """

    def __init__(self, d: int, heads: int, residual: bool = True):
        super().__init__()
        self.d, self.heads, self.residual = d, heads, residual
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.mlp1 = nn.Linear(d, d)
        self.mlp2 = nn.Linear(d, d)

    def _split(self, x):
        B, N, _ = x.shape
        return x.view(B, N, self.heads, self.d // self.heads).transpose(1, 2)  # B, H, N, c

    def attention(self, x):
        _check_channels(x, self.d)
        q, k = self._split(self.q(x)), self._split(self.k(x))
        n = x.shape[1]
        return torch.softmax(q.transpose(-1, -2) @ k / math.sqrt(n), dim=-1)  # B, H, c, c

    def forward(self, x):
        a = self.attention(x)
        h = self._split(self.v(x)) @ a.transpose(-1, -2)  # B, H, N, c
        B, _, N, _ = h.shape
        y = self.mlp2(F.gelu(self.mlp1(h.transpose(1, 2).reshape(B, N, self.d))))
        return y + x if self.residual else y


class FeedForward(nn.Module):
    def __init__(self, d: int, ratio: int = 2):
        super().__init__()
        self.d = d
        self.fc1 = nn.Linear(d, ratio * d)
        self.fc2 = nn.Linear(ratio * d, d)

    def forward(self, x):
        _check_channels(x, self.d)
        return self.fc2(F.gelu(self.fc1(x)))


def _attention(kind: str, d: int, heads: int, residual: bool):
    if kind == "S":
        return SpatialMSA(d, heads)
    return ChannelMSA(d, heads, residual=residual)


class SACABlock(nn.Module):
    """Transformer block in one of the ablation variants.

    Default (``S-then-C``)::

        F1 = S_MSA(PN(F)) + F
        F2 = FF(C_MSA(PN(F1))) + F1

    The other attention-pair variants swap or duplicate the two attention
    kinds.  An attention in the second slot keeps its own skip (C-MSA's is
    part of its definition), one in the first slot relies on the outer
    residual.  ``vanilla`` has no second attention; ``attention-only`` is the
    vanilla block with PreNorm and FF removed, leaving ``S_MSA(F) + F``.
    """

    def __init__(self, d: int, heads: int, variant: str = "S-then-C", ff_ratio: int = 2):
        super().__init__()
        if variant not in BLOCK_VARIANTS:
            raise UnknownVariantError(f"unknown block variant {variant!r}")
        self.variant = variant
        self.d = d
        if variant == "attention-only":
            self.attn1 = SpatialMSA(d, heads)
            self.attn2 = None
            return
        self.norm1 = nn.LayerNorm(d, eps=NORM_EPS)
        self.norm2 = nn.LayerNorm(d, eps=NORM_EPS)
        self.ff = FeedForward(d, ff_ratio)
        if variant == "vanilla":
            self.attn1 = SpatialMSA(d, heads)
            self.attn2 = None
        else:
            first, second = variant[0], variant[-1]
            self.attn1 = _attention(first, d, heads, residual=False)
            self.attn2 = _attention(second, d, heads, residual=True)

    def attentions(self):
        return [m for m in (self.attn1, self.attn2) if m is not None]

    def forward(self, x):
        _check_channels(x, self.d)
        if self.variant == "attention-only":
            return self.attn1(x) + x
        x = self.attn1(self.norm1(x)) + x
        h = self.norm2(x)
        if self.attn2 is not None:
            h = self.attn2(h)
            if isinstance(self.attn2, SpatialMSA):
                h = h + self.norm2(x)
        return self.ff(h) + x


class InstanceNorm(nn.Module):
    """Normalize each channel over the N rows of each pair (no affine)."""

    def forward(self, x):
        mean = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, unbiased=False, keepdim=True)
        return (x - mean) / torch.sqrt(var + NORM_EPS)


class BatchNorm(nn.Module):
    """Per-channel normalization over all (pair, row) positions; running
    statistics are used outside training."""

    def __init__(self, c: int, momentum: float = 0.1):
        super().__init__()
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(c))
        self.bias = nn.Parameter(torch.zeros(c))
        self.register_buffer("running_mean", torch.zeros(c))
        self.register_buffer("running_var", torch.ones(c))

    def forward(self, x):
        if self.training:
            flat = x.reshape(-1, x.shape[-1])
            mean = flat.mean(0)
            var = flat.var(0, unbiased=False)
            with torch.no_grad():
                n = flat.shape[0]
                unbiased = var * n / max(n - 1, 1)
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean)
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * unbiased)
        else:
            mean, var = self.running_mean, self.running_var
        return (x - mean) / torch.sqrt(var + NORM_EPS) * self.weight + self.bias


class PredictionBlock(nn.Module):
    """Channel-reducing head d -> d/2 -> d/4 -> 1 emitting one logit per row."""

    def __init__(self, d: int, variant: str = "prediction-block"):
        super().__init__()
        if variant not in PREDICTOR_VARIANTS:
            raise UnknownVariantError(f"unknown predictor variant {variant!r}")
        self.d, self.variant = d, variant
        if variant == "simple-projection":
            self.proj = nn.Linear(d, 1)
            return
        self.fc1 = nn.Linear(d, d // 2)
        self.in1, self.bn1 = InstanceNorm(), BatchNorm(d // 2)
        self.fc2 = nn.Linear(d // 2, d // 4)
        self.in2, self.bn2 = InstanceNorm(), BatchNorm(d // 4)
        self.fc3 = nn.Linear(d // 4, 1)

    def forward(self, x):
        _check_channels(x, self.d)
        if self.variant == "simple-projection":
            return self.proj(x).squeeze(-1)
        h = F.relu(self.bn1(self.in1(self.fc1(x))))
        h = F.relu(self.bn2(self.in2(self.fc2(h))))
        return self.fc3(h).squeeze(-1)


def keep_count(n: int, rate: float) -> int:
    k = math.ceil(rate * n - 1e-9)
    if k < 1:
        raise EmptyResultError(f"pruning {n} rows at rate {rate} keeps nothing")
    return k


def topk_indices(logits: torch.Tensor, rate: float) -> torch.Tensor:
    """Indices of the ceil(rate * N) largest logits per row of a (B, N) tensor.

    Ties go to the smaller index; the result is sorted ascending so kept rows
    stay in their original relative order.
    """
    k = keep_count(logits.shape[-1], rate)
    order = torch.sort(logits.detach(), dim=-1, descending=True, stable=True).indices
    return torch.sort(order[..., :k], dim=-1).values


def gather_rows(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    if x.dim() == idx.dim():
        return torch.gather(x, 1, idx)
    return torch.gather(x, 1, idx.unsqueeze(-1).expand(*idx.shape, x.shape[-1]))


def sort_and_prune(corrs, logits, side_channels=(), rate: float = 0.5):
    """Keep the top ceil(rate * N) rows by logit.  Works on single sets
    ((N, 4) and (N,)) or batches ((B, N, 4) and (B, N)); numpy or torch."""
    as_numpy = isinstance(corrs, np.ndarray)
    c = torch.as_tensor(corrs)
    z = torch.as_tensor(logits)
    sides = [torch.as_tensor(s) for s in side_channels]
    single = z.dim() == 1
    if single:
        c, z, sides = c.unsqueeze(0), z.unsqueeze(0), [s.unsqueeze(0) for s in sides]
    for s in sides:
        if s.shape != z.shape:
            raise ShapeMismatchError("side channel length differs from logits")
    if c.shape[:2] != z.shape:
        raise ShapeMismatchError("logits and correspondences differ in length")
    idx = topk_indices(z, rate)
    out = [gather_rows(c, idx), [gather_rows(s, idx) for s in sides], idx]
    if single:
        out = [out[0][0], [s[0] for s in out[1]], out[2][0]]
    if as_numpy:
        out = [out[0].numpy(), [s.numpy() for s in out[1]], out[2].numpy()]
    return tuple(out)


class PruningModule(nn.Module):
    def __init__(self, k: int, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.up = UpLayer(k, cfg.d)
        self.blocks = nn.ModuleList(
            SACABlock(cfg.d, cfg.H, cfg.block_variant, cfg.ff_ratio) for _ in range(cfg.L)
        )
        self.guide_head = PredictionBlock(cfg.d, cfg.predictor_variant)
        self.head = PredictionBlock(cfg.d, cfg.predictor_variant)
        self.check_finite = False

    def features(self, x):
        """Up layer and all blocks; returns the per-block outputs."""
        f = self.up(x)
        outs = []
        for blk in self.blocks:
            f = blk(f)
            if self.check_finite and not torch.isfinite(f).all():
                raise FloatingPointError("non-finite features")
            outs.append(f)
        return outs

    def forward(self, x):
        """Guiding logits (tapped after block po) and module logits, both (B, N)."""
        outs = self.features(x)
        return self.guide_head(outs[self.cfg.po - 1]), self.head(outs[-1])


@dataclass
class ForwardOutput:
    coords: list = field(default_factory=list)  # module inputs, (B, N_i, 4)
    guide_logits: list = field(default_factory=list)  # (B, N_i)
    logits: list = field(default_factory=list)  # (B, N_i)
    kept: list = field(default_factory=list)  # indices into module-i rows, (B, N_{i+1})
    kept_global: list = field(default_factory=list)  # indices into the original rows
    pruned_guide: torch.Tensor | None = None  # module-1 guide logits carried to the end
    final_coords: torch.Tensor | None = None
    final_logits: torch.Tensor | None = None


class LeCoT(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.check()
        self.cfg = cfg
        self.stages = nn.ModuleList(
            PruningModule(4 if i == 0 else 6, cfg) for i in range(cfg.num_modules)
        )

    def forward(self, corrs: torch.Tensor, oracle: torch.Tensor | None = None) -> ForwardOutput:
        """``oracle`` (B, N), if given, replaces every learned logit with the
        oracle value of the same row (the network still runs)."""
        _check_channels(corrs, 4)
        out = ForwardOutput()
        coords = corrs
        glob = torch.arange(corrs.shape[1]).expand(corrs.shape[0], -1)
        carry_guide = prev_logits = None
        for i, stage in enumerate(self.stages):
            if i == 0:
                x = coords
            else:
                x = torch.cat([coords, carry_guide.unsqueeze(-1), prev_logits.unsqueeze(-1)], dim=-1)
            guide, logits = stage(x)
            if oracle is not None:
                o = torch.gather(oracle.to(logits.dtype), 1, glob)
                guide, logits = o, o.clone()
            carried = guide if i == 0 else carry_guide
            new_coords, (carried, pruned_logits), idx = sort_and_prune(
                coords, logits, [carried, logits], self.cfg.prune_rate
            )
            out.coords.append(coords)
            out.guide_logits.append(guide)
            out.logits.append(logits)
            out.kept.append(idx)
            glob = torch.gather(glob, 1, idx)
            out.kept_global.append(glob)
            coords, carry_guide, prev_logits = new_coords, carried, pruned_logits
        out.pruned_guide = carry_guide
        out.final_coords = coords
        out.final_logits = prev_logits
        return out


def init_parameters(model: nn.Module, seed: int = 0) -> nn.Module:
    """Xavier-uniform linear weights, zero biases, unit/zero norm affines."""
    g = torch.Generator().manual_seed(seed)
    for name, mod in sorted(model.named_modules(), key=lambda kv: kv[0]):
        if isinstance(mod, nn.Linear):
            with torch.no_grad():
                bound = math.sqrt(6.0 / (mod.in_features + mod.out_features))
                mod.weight.copy_(torch.rand(mod.weight.shape, generator=g) * 2 * bound - bound)
                mod.bias.zero_()
        elif isinstance(mod, (nn.LayerNorm, BatchNorm)):
            with torch.no_grad():
                mod.weight.fill_(1.0)
                mod.bias.zero_()
    return model


def build_model(cfg: NetworkConfig, seed: int = 0) -> LeCoT:
    return init_parameters(LeCoT(cfg), seed)


def param_store(model: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """Learnable tensors by name, in sorted name order."""
    return OrderedDict(sorted(model.named_parameters(), key=lambda kv: kv[0]))


def estimation_weights(logits: torch.Tensor) -> torch.Tensor:
    """relu(tanh(logit)); pairs with fewer than 8 positive weights fall back to
    uniform weight on their top-16 logits (no gradient through the fallback)."""
    w = F.relu(torch.tanh(logits))
    enough = (w > 0).sum(-1, keepdim=True) >= MIN_SUPPORT
    if bool(enough.all()):
        return w
    k = min(FALLBACK_TOP, logits.shape[-1])
    top = torch.sort(logits.detach(), dim=-1, descending=True, stable=True).indices[..., :k]
    fallback = torch.zeros_like(w).scatter(-1, top, 1.0)
    return torch.where(enough, w, fallback)


@dataclass
class LeCoTResult:
    guide_pruned: np.ndarray  # P_s after the first pruning, aligned with C1
    logits1: np.ndarray  # module-1 logits over C (pre-pruning)
    C1: np.ndarray
    logits2: np.ndarray  # last-module logits over its kept rows (aligned with C2)
    C2: np.ndarray
    E_hat: np.ndarray
    P: np.ndarray  # binary, over the full input set
    distances: np.ndarray  # symmetric epipolar distance of every input row under E_hat
    weights: np.ndarray
    kept1: np.ndarray
    kept2: np.ndarray


def lecot_forward(
    corrs,
    model: LeCoT,
    eps_verify: float = geometry.DEFAULT_EPS,
    oracle_logits=None,
) -> LeCoTResult:
    """Full pipeline for one correspondence set: prune, estimate E by weighted
    eight-point on the final subset, verify every original row."""
    C = geometry.as_correspondences(corrs)
    if len(C) < 32:
        raise ValueError("lecot_forward needs N >= 32")
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(C, dtype=dtype).unsqueeze(0)
    oracle = None if oracle_logits is None else torch.as_tensor(np.asarray(oracle_logits)).reshape(1, -1)
    with torch.no_grad():
        out = model(x, oracle=oracle)
        w = estimation_weights(out.final_logits)[0].double().numpy()
    first = out.kept_global[0][0].numpy()
    last = out.kept_global[-1][0].numpy()
    C1, C2 = C[first], C[last]
    E_hat = geometry.weighted_eight_point(C2, w)
    dist = geometry.symmetric_epipolar_distance(E_hat, C)
    P = (dist < eps_verify).astype(np.uint8)
    first_guide = out.guide_logits[0][0].double().numpy()[first]
    return LeCoTResult(
        guide_pruned=first_guide,
        logits1=out.logits[0][0].double().numpy(),
        C1=C1,
        logits2=out.final_logits[0].double().numpy(),
        C2=C2,
        E_hat=E_hat,
        P=P,
        distances=dist,
        weights=w,
        kept1=first,
        kept2=last,
    )
