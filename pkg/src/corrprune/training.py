"""Hybrid loss, differentiable weighted eight-point, Adam and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import geometry
from .geometry import CameraPose
from .network import LeCoT, NetworkConfig, build_model, estimation_weights, param_store
from .synthdata import ScenePair, project, shared_frustum_points

log = logging.getLogger(__name__)

EIGENGAP_EPS = 1e-10


class EigengapCollapseError(ArithmeticError):
    pass


@dataclass
class LossConfig:
    beta: float = 0.5
    geo_clamp: float = 0.5
    eps_label: float = geometry.DEFAULT_EPS
    ambiguity_factor: float = 10.0
    n_virtual: int = 100

    def check(self) -> None:
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.geo_clamp <= 0:
            raise ValueError("geo_clamp must be > 0")
        if self.ambiguity_factor <= 1:
            raise ValueError("ambiguity_factor must be > 1")
        if self.eps_label <= 0 or self.n_virtual < 1:
            raise ValueError("eps_label must be > 0 and n_virtual >= 1")


@dataclass
class LrSchedule:
    base: float = 1e-3
    warmup: int = 10_000
    decay_factor: float = 0.4
    decay_interval: int = 20_000

    def check(self) -> None:
        if self.base <= 0 or self.warmup < 1 or self.decay_interval < 1 or not 0 < self.decay_factor <= 1:
            raise ValueError("invalid learning-rate schedule")


def lr_at(it: int, schedule: LrSchedule = LrSchedule()) -> float:
    """Linear warmup to ``base`` at ``warmup``, then step decay.

    After warmup the exponent is floor((it - warmup) / interval + 1), so the
    first decay applies right after warmup and iteration 30001 of the default
    schedule sits two decays down (1.6e-4).
    """
    if it < 1:
        raise ValueError("iterations are counted from 1")
    if it <= schedule.warmup:
        return schedule.base * it / schedule.warmup
    k = math.floor((it - schedule.warmup) / schedule.decay_interval + 1)
    return schedule.base * schedule.decay_factor**k


# --- loss terms (numpy reference forms) -------------------------------------


def make_virtual_pairs(pose: CameraPose, n: int = 100, rng=None) -> np.ndarray:
    """n exact correspondences from random points in the shared frustum."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if geometry.rotation_error_deg(pose.R, np.eye(3)) > 120.0:
        raise ValueError("frustum is empty for rotations beyond 120 degrees")
    rng = np.random.default_rng(0) if rng is None else rng
    return project(shared_frustum_points(rng, pose, n), pose)


def geometric_loss(E_hat, virtual, clamp: float = 0.5) -> float:
    d = geometry.symmetric_epipolar_distance(E_hat, virtual)
    return float(np.mean(np.minimum(d, clamp)))


def adaptive_temperature(E_gt, corrs, eps_label: float = geometry.DEFAULT_EPS, factor: float = 10.0):
    """0 inside the ambiguous band (eps, factor * eps), 1 elsewhere."""
    if factor <= 1:
        raise ValueError("ambiguity factor must be > 1")
    d = geometry.symmetric_epipolar_distance(E_gt, corrs)
    return np.where((d > eps_label) & (d < factor * eps_label), 0.0, 1.0)


def classification_loss(logit_sets, label_sets, tau_sets) -> torch.Tensor:
    """Sum over sets of mean BCE(sigmoid(tau * logits), labels)."""
    total = 0.0
    for z, y, tau in zip(logit_sets, label_sets, tau_sets, strict=True):
        z, y, tau = (torch.as_tensor(a, dtype=torch.float64) if not torch.is_tensor(a) else a for a in (z, y, tau))
        if z.shape != y.shape or z.shape != tau.shape:
            raise ValueError(f"length mismatch: logits {tuple(z.shape)}, labels {tuple(y.shape)}, tau {tuple(tau.shape)}")
        total = total + F.binary_cross_entropy_with_logits(tau * z, y.to(z.dtype), reduction="mean")
    return total


def hybrid_loss(E_hat, virtual, logit_sets, label_sets, tau_sets, cfg: LossConfig = LossConfig()) -> float:
    lc = float(classification_loss(logit_sets, label_sets, tau_sets))
    return geometric_loss(E_hat, virtual, cfg.geo_clamp) + cfg.beta * lc


# --- differentiable eight-point ---------------------------------------------


class SmallestEigenvector(torch.autograd.Function):
    """Unit eigenvector of the smallest eigenvalue of a batch of symmetric matrices.

    Backward: de0 = sum_{j>0} e_j (e_j^T dG e0) / (lam0 - lam_j).
    """

    @staticmethod
    def forward(ctx, G):
        lam, V = torch.linalg.eigh(G)
        gap = lam[..., 1] - lam[..., 0]
        if bool((gap < EIGENGAP_EPS).any()):
            raise EigengapCollapseError(f"eigengap {float(gap.min()):.3g} below {EIGENGAP_EPS}")
        ctx.save_for_backward(lam, V)
        return V[..., 0]

    @staticmethod
    def backward(ctx, g):
        lam, V = ctx.saved_tensors
        e0 = V[..., 0]
        rest = V[..., 1:]
        coef = (rest.transpose(-1, -2) @ g.unsqueeze(-1)).squeeze(-1) / (lam[..., :1] - lam[..., 1:])
        de = (rest @ coef.unsqueeze(-1)).squeeze(-1)
        dG = de.unsqueeze(-1) * e0.unsqueeze(-2)
        return 0.5 * (dG + dG.transpose(-1, -2))


def eight_point_design(coords: torch.Tensor) -> torch.Tensor:
    x, y, u, v = coords.unbind(-1)
    return torch.stack([u * x, u * y, u, v * x, v * y, v, x, y, torch.ones_like(x)], dim=-1)


def weighted_eight_point_t(coords: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """(B, n, 4), (B, n) -> (B, 3, 3) unit-Frobenius eigenvector estimate (not enforced)."""
    Q = eight_point_design(coords.double())
    G = Q.transpose(-1, -2) @ (weights.double().unsqueeze(-1) * Q)
    return SmallestEigenvector.apply(G).reshape(*G.shape[:-2], 3, 3)


def sampson_t(E: torch.Tensor, corrs: torch.Tensor) -> torch.Tensor:
    """Symmetric epipolar distance, (B, 3, 3) x (B, n, 4) -> (B, n)."""
    ones = torch.ones_like(corrs[..., :1])
    p = torch.cat([corrs[..., :2], ones], -1)
    q = torch.cat([corrs[..., 2:], ones], -1)
    Ep = p @ E.transpose(-1, -2)
    Etq = q @ E
    num = (q * Ep).sum(-1) ** 2
    den = Ep[..., 0] ** 2 + Ep[..., 1] ** 2 + Etq[..., 0] ** 2 + Etq[..., 1] ** 2
    return num / den.clamp_min(geometry.DEN_EPS)


# --- batches and gradients ---------------------------------------------------


@dataclass
class PairTargets:
    """Per-pair training targets, precomputed once."""

    labels: np.ndarray
    tau: np.ndarray
    virtual: np.ndarray


def pair_targets(pair: ScenePair, cfg: LossConfig, rng) -> PairTargets:
    tau = adaptive_temperature(pair.E_gt, pair.corrs, cfg.eps_label, cfg.ambiguity_factor)
    return PairTargets(pair.labels.astype(np.float64), tau, make_virtual_pairs(pair.pose, cfg.n_virtual, rng))


@dataclass
class Batch:
    corrs: torch.Tensor  # (B, N, 4)
    labels: torch.Tensor  # (B, N)
    tau: torch.Tensor  # (B, N)
    virtual: torch.Tensor  # (B, n_virtual, 4), float64
    E_gt: list = field(default_factory=list)

    def __len__(self):
        return self.corrs.shape[0]


def make_batch(pairs, targets, dtype=torch.float32) -> Batch:
    return Batch(
        corrs=torch.as_tensor(np.stack([p.corrs for p in pairs]), dtype=dtype),
        labels=torch.as_tensor(np.stack([t.labels for t in targets]), dtype=dtype),
        tau=torch.as_tensor(np.stack([t.tau for t in targets]), dtype=dtype),
        virtual=torch.as_tensor(np.stack([t.virtual for t in targets]), dtype=torch.float64),
        E_gt=[p.E_gt for p in pairs],
    )


@dataclass
class LossParts:
    loss: torch.Tensor
    geo: torch.Tensor
    cls: torch.Tensor
    E_hat: torch.Tensor  # (B, 3, 3) float64
    out: object


def batch_loss(model: LeCoT, batch: Batch, cfg: LossConfig) -> LossParts:
    """Mean over the batch of L_e + beta * L_c."""
    out = model(batch.corrs)
    logit_sets, label_sets, tau_sets = [], [], []
    glob = None
    for i in range(len(out.logits)):
        y, tau = batch.labels, batch.tau
        if i > 0:
            glob = out.kept_global[i - 1]
            y, tau = torch.gather(y, 1, glob), torch.gather(tau, 1, glob)
        for z in (out.guide_logits[i], out.logits[i]):
            logit_sets.append(z)
            label_sets.append(y)
            tau_sets.append(tau)
    cls = classification_loss(logit_sets, label_sets, tau_sets)
    w = estimation_weights(out.final_logits)
    E = weighted_eight_point_t(out.final_coords, w)
    geo = sampson_t(E, batch.virtual).clamp(max=cfg.geo_clamp).mean()
    loss = geo + cfg.beta * cls.double()
    return LossParts(loss, geo, cls, E, out)


def compute_gradients(model: LeCoT, batch: Batch, cfg: LossConfig):
    """Gradient of the batch loss for every parameter, by name (sorted).

    Row selection inside sort-and-prune is piecewise constant and contributes
    no gradient.  Raises EigengapCollapseError when the eight-point eigenvector
    is ill-posed.
    """
    params = param_store(model)
    model.zero_grad(set_to_none=True)
    parts = batch_loss(model, batch, cfg)
    parts.loss.backward()
    grads = OrderedDict(
        (name, p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in params.items()
    )
    return grads, parts


# --- optimizer -----------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls(
            m=OrderedDict((k, torch.zeros_like(p.detach())) for k, p in params.items()),
            v=OrderedDict((k, torch.zeros_like(p.detach())) for k, p in params.items()),
        )


def adam_step(params, grads, state: OptimizerState, lr: float) -> OptimizerState:
    """In-place bias-corrected Adam update of ``params`` (name -> tensor)."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape or state.m[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: param {tuple(p.shape)}, grad {tuple(g.shape)}")
            m = state.m[name].mul_(b1).add_((1 - b1) * g)
            v = state.v[name].mul_(b2).add_((1 - b2) * g * g)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))
    return state


# --- training loop -------------------------------------------------------------


@dataclass
class TrainResult:
    model: LeCoT
    state: OptimizerState
    iteration: int
    log: list
    skipped: int = 0
    losses: list = field(default_factory=list)  # per iteration, NaN for skipped steps


LOG_FIELDS = ("iteration", "lr", "loss", "L_e", "L_c", "train_f")


def batch_f_score(parts: LossParts, batch: Batch, eps_verify: float) -> float:
    from .evaluation import prf

    pred, lab = [], []
    for b in range(len(batch)):
        try:
            E = geometry.enforce_essential(parts.E_hat[b].detach().numpy())
            pred.append(geometry.verify(E, batch.corrs[b].double().numpy(), eps_verify))
        except geometry.GeometryError:
            pred.append(np.zeros(batch.corrs.shape[1], np.uint8))
        lab.append(batch.labels[b].numpy().astype(np.uint8))
    return prf(np.concatenate(pred), np.concatenate(lab))[2]


def train(
    pairs,
    net_cfg: NetworkConfig,
    loss_cfg: LossConfig = LossConfig(),
    schedule: LrSchedule = LrSchedule(),
    iterations: int = 0,
    seed: int = 0,
    batch_size: int = 32,
    log_every: int = 50,
    eps_verify: float = geometry.DEFAULT_EPS,
    model: LeCoT | None = None,
    state: OptimizerState | None = None,
    start: int = 0,
    log_path=None,
    on_checkpoint=None,
    checkpoint_every: int = 0,
) -> TrainResult:
    """Seeded training loop.  Batches are drawn without replacement per step
    from a generator seeded with ``seed``; the model is initialized from the
    same seed unless given."""
    if not pairs:
        raise ValueError("empty dataset")
    loss_cfg.check()
    schedule.check()
    if len({p.n for p in pairs}) != 1:
        raise ValueError("all pairs in a training set must share N")
    model = build_model(net_cfg, seed) if model is None else model
    params = param_store(model)
    state = OptimizerState.zeros_like(params) if state is None else state
    target_rng = np.random.default_rng([seed, 1])
    targets = [pair_targets(p, loss_cfg, target_rng) for p in pairs]
    rng = np.random.default_rng([seed, 2])
    for _ in range(start):  # replay the sampler so resumed runs match uninterrupted ones
        rng.choice(len(pairs), size=min(batch_size, len(pairs)), replace=False)
    rows, losses, skipped = [], [], 0
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if fh.tell() == 0:
            writer.writerow(LOG_FIELDS)
    model.train()
    it = start
    try:
        for it in range(start + 1, start + iterations + 1):
            idx = rng.choice(len(pairs), size=min(batch_size, len(pairs)), replace=False)
            batch = make_batch([pairs[i] for i in idx], [targets[i] for i in idx])
            lr = lr_at(it, schedule)
            try:
                grads, parts = compute_gradients(model, batch, loss_cfg)
            except EigengapCollapseError as exc:
                skipped += 1
                losses.append(float("nan"))
                log.warning("iteration %d skipped: %s", it, exc)
                continue
            adam_step(params, grads, state, lr)
            losses.append(float(parts.loss.detach()))
            if log_every and (it % log_every == 0 or it == start + iterations):
                row = (it, lr, float(parts.loss.detach()), float(parts.geo.detach()), float(parts.cls.detach()),
                       batch_f_score(parts, batch, eps_verify))
                rows.append(row)
                if writer:
                    writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
                    fh.flush()
                log.info("it %d lr %.2e loss %.4f L_e %.4f L_c %.4f F %.3f", *row)
            if on_checkpoint and checkpoint_every and it % checkpoint_every == 0:
                on_checkpoint(model, state, it)
    except KeyboardInterrupt:
        if on_checkpoint:
            on_checkpoint(model, state, it)
        raise
    finally:
        if fh:
            fh.close()
    model.eval()
    return TrainResult(model, state, start + iterations, rows, skipped, losses)
