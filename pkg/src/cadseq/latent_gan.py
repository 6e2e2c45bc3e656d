"""Wasserstein latent-GAN with gradient penalty over frozen encoder latents."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from cadseq.checkpoint import load_tensors, save_tensors
from cadseq.model import logits_to_matrix

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    pass


class IncompatibleCheckpoints(ValueError):
    pass


@dataclass
class GanConfig:
    latent_dim: int = 256
    noise_dim: int = 64
    hidden_dim: int = 512
    layers: int = 4
    gp_coeff: float = 10.0
    critic_steps: int = 5
    lr: float = 1e-4
    betas: tuple = (0.5, 0.9)
    batch_size: int = 64
    iterations: int = 2000
    # decay both learning rates linearly to zero over the run
    linear_decay: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.layers != 4:
            raise ValueError("generator and critic use exactly four linear layers")
        self.betas = tuple(self.betas)


def mlp(d_in: int, hidden: int, d_out: int, layers: int = 4) -> nn.Sequential:
    dims = [d_in] + [hidden] * (layers - 1) + [d_out]
    mods = []
    for i in range(layers):
        mods.append(nn.Linear(dims[i], dims[i + 1]))
        if i < layers - 1:
            mods.append(nn.LeakyReLU(0.2))
    return nn.Sequential(*mods)


class Generator(nn.Module):
    def __init__(self, cfg: GanConfig):
        super().__init__()
        self.net = mlp(cfg.noise_dim, cfg.hidden_dim, cfg.latent_dim, cfg.layers)

    def forward(self, eps):
        return self.net(eps)


class Critic(nn.Module):
    def __init__(self, cfg: GanConfig):
        super().__init__()
        self.net = mlp(cfg.latent_dim, cfg.hidden_dim, 1, cfg.layers)

    def forward(self, z):
        return self.net(z).squeeze(-1)


def generator_loss(D, G, eps) -> torch.Tensor:
    """Mean critic score of generated latents; the generator ascends it."""
    return D(G(eps)).mean()


def gradient_penalty(D, real, fake, u) -> torch.Tensor:
    """``mean (||grad D(x_hat)|| - 1)^2`` at ``x_hat = u*real + (1-u)*fake``."""
    x_hat = (u.unsqueeze(-1) * real + (1 - u.unsqueeze(-1)) * fake).requires_grad_(True)
    out = D(x_hat)
    (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True)
    return ((grad.norm(dim=-1) - 1.0) ** 2).mean()


def discriminator_loss(D, G, z, eps, gp_coeff: float = 10.0, generator=None,
                       u: Optional[torch.Tensor] = None):
    """Return ``(loss, wasserstein_estimate)``.

    loss = mean D(G(eps)) - mean D(z) + gp_coeff * penalty
    """
    with torch.no_grad():
        fake = G(eps)
    if u is None:
        u = torch.rand(z.shape[0], generator=generator, dtype=z.dtype)
    d_real, d_fake = D(z).mean(), D(fake).mean()
    loss = d_fake - d_real
    if gp_coeff:
        loss = loss + gp_coeff * gradient_penalty(D, z, fake, u)
    return loss, (d_real - d_fake).item()


def _set_trainable(m: nn.Module, flag: bool) -> None:
    for p in m.parameters():
        p.requires_grad_(flag)


def gan_lr(cfg: GanConfig, it: int) -> float:
    if not cfg.linear_decay:
        return cfg.lr
    return cfg.lr * (1 - it / cfg.iterations)


def train_gan(latents, cfg: GanConfig, G: Optional[Generator] = None,
              D: Optional[Critic] = None, callback=None):
    """Alternate ``critic_steps`` critic updates with one generator update.

    Returns ``(G, D, history)`` where history holds the per-iteration
    Wasserstein estimate ``mean D(z) - mean D(G(eps))``.
    """
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    Z = torch.as_tensor(np.asarray(latents), dtype=torch.float32)
    if Z.shape[1] != cfg.latent_dim:
        raise IncompatibleCheckpoints(f"latents have dim {Z.shape[1]}, config {cfg.latent_dim}")
    G = G or Generator(cfg)
    D = D or Critic(cfg)
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.lr, betas=cfg.betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr, betas=cfg.betas)
    history = []
    n = len(Z)
    for it in range(cfg.iterations):
        for opt in (opt_g, opt_d):
            for g in opt.param_groups:
                g["lr"] = gan_lr(cfg, it)
        _set_trainable(G, False)
        _set_trainable(D, True)
        w = 0.0
        for _ in range(cfg.critic_steps):
            idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
            eps = torch.randn(cfg.batch_size, cfg.noise_dim, generator=gen)
            loss_d, w = discriminator_loss(D, G, Z[idx], eps, cfg.gp_coeff, gen)
            if not torch.isfinite(loss_d):
                raise NonFiniteLoss(f"critic loss at iteration {it}")
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()
        _set_trainable(D, False)
        _set_trainable(G, True)
        eps = torch.randn(cfg.batch_size, cfg.noise_dim, generator=gen)
        loss_g = -generator_loss(D, G, eps)
        if not torch.isfinite(loss_g):
            raise NonFiniteLoss(f"generator loss at iteration {it}")
        opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        opt_g.step()
        history.append(w)
        if callback is not None:
            callback(it, w, loss_d.item(), loss_g.item())
    _set_trainable(D, True)
    return G, D, history


def smoothed(values, window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v
    k = np.ones(window) / window
    return np.convolve(v, k, mode="valid")


@torch.no_grad()
def sample_latents(G: Generator, n: int, noise_dim: int, seed: int = 0) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(n, noise_dim, generator=gen)
    G.eval()
    return G(eps)


@torch.no_grad()
def generate_sequences(n: int, G: Generator, model, seed: int = 0, noise_dim: Optional[int] = None):
    """Decode ``n`` generated latents with the autoencoder's decoder.

    Returns a list of ``(token_matrix, valid)``.
    """
    from cadseq.metrics import check_valid

    if n == 0:
        return []
    out_dim = G.net[-1].out_features
    if out_dim != model.cfg.d_model:
        raise IncompatibleCheckpoints(
            f"generator emits {out_dim}-dim latents, decoder expects {model.cfg.d_model}")
    noise_dim = noise_dim or G.net[0].in_features
    z = sample_latents(G, n, noise_dim, seed)
    model.eval()
    mats = logits_to_matrix(*model.decode(z)).numpy()
    return [(m, check_valid(m, n_points=1)[0]) for m in mats]


def save_gan(path, G: Generator, D: Critic, cfg: GanConfig, extra: Optional[dict] = None):
    tensors = {f"G.{k}": v for k, v in G.state_dict().items()}
    tensors.update({f"D.{k}": v for k, v in D.state_dict().items()})
    meta = {"kind": "latent_gan", "gan": asdict(cfg)}
    meta["gan"]["betas"] = list(cfg.betas)
    if extra:
        meta.update(extra)
    return save_tensors(path, tensors, meta)


def load_gan(path):
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "latent_gan":
        raise IncompatibleCheckpoints(f"{path} is not a latent-GAN checkpoint")
    cfg = GanConfig(**meta["gan"])
    G, D = Generator(cfg), Critic(cfg)
    G.load_state_dict({k[2:]: v for k, v in tensors.items() if k.startswith("G.")})
    D.load_state_dict({k[2:]: v for k, v in tensors.items() if k.startswith("D.")})
    return G, D, cfg, meta
