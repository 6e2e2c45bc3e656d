"""Autoencoder training: the combined objective, warmup, clipping, Adam."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from cadseq.checkpoint import load_tensors, save_tensors
from cadseq.model import (
    SequenceAutoencoder, ModelConfig, contrastive_loss, logits_to_matrix, reconstruction_loss,
    total_loss,
)

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    warmup_steps: int = 2000
    grad_clip: float = 1.0
    epochs: int = 1000
    batch_size: int = 1024
    lam: float = 2.0       # parameter CE weight
    kappa: float = 2.0     # contrastive weight
    tau: float = 0.07
    eta: int = 3           # parameter accuracy tolerance
    seed: int = 0

    def __post_init__(self):
        for k in ("lr", "grad_clip", "tau"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.warmup_steps < 0 or self.kappa < 0 or self.lam < 0:
            raise ValueError("warmup_steps, kappa and lam must be non-negative")


def warmup_factor(step: int, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, step / warmup_steps)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``;
    return the norm before clipping."""
    return float(torch.nn.utils.clip_grad_norm_(list(params), max_norm))


@dataclass
class TrainState:
    model: SequenceAutoencoder
    optimizer: torch.optim.Optimizer
    step: int = 0
    generator: torch.Generator = field(default_factory=torch.Generator)

    @classmethod
    def create(cls, mcfg: ModelConfig, tcfg: TrainConfig) -> "TrainState":
        torch.manual_seed(tcfg.seed)
        model = SequenceAutoencoder(mcfg)
        opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr)
        gen = torch.Generator().manual_seed(tcfg.seed + 1)
        return cls(model, opt, 0, gen)


def train_step(batch, cfg: TrainConfig, state: TrainState) -> dict:
    """One optimization step on a ``(B, N, 17)`` batch of token matrices."""
    model = state.model
    model.train()
    target = torch.as_tensor(np.asarray(batch), dtype=torch.long)
    z = model.encode(target)
    cmd_logits, param_logits = model.decode(z)
    l_rec, ce_cmd, ce_par = reconstruction_loss(cmd_logits, param_logits, target, cfg.lam)
    if cfg.kappa > 0:
        d_i, d_j = model.project_and_mask(z, generator=state.generator)
        l_cont = contrastive_loss(d_i, d_j, cfg.tau)
    else:
        l_cont = torch.zeros(())
    loss = total_loss(l_rec, l_cont, cfg.kappa)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(
            f"step {state.step}: l_rec={l_rec.item()} l_cont={l_cont.item()}")

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    gnorm = clip_grad_norm(model.parameters(), cfg.grad_clip)
    state.step += 1
    lr = cfg.lr * warmup_factor(state.step, cfg.warmup_steps)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    state.optimizer.step()
    out = {"step": state.step, "loss": loss.item(), "l_rec": l_rec.item(),
           "ce_cmd": ce_cmd.item(), "ce_param": ce_par.item(), "grad_norm": gnorm, "lr": lr}
    if cfg.kappa > 0:
        out["l_cont"] = l_cont.item()
    return out


@torch.no_grad()
def reconstruct(model: SequenceAutoencoder, matrices, batch_size: int = 256) -> np.ndarray:
    """Eval-mode encode + greedy decode."""
    model.eval()
    m = np.asarray(matrices)
    outs = []
    for s in range(0, len(m), batch_size):
        z = model.encode(torch.as_tensor(m[s:s + batch_size]))
        outs.append(logits_to_matrix(*model.decode(z)).numpy())
    return np.concatenate(outs) if outs else np.zeros((0,) + m.shape[1:], dtype=np.int64)


@torch.no_grad()
def encode_all(model: SequenceAutoencoder, matrices, batch_size: int = 256) -> np.ndarray:
    model.eval()
    m = np.asarray(matrices)
    zs = [model.encode(torch.as_tensor(m[s:s + batch_size])).numpy()
          for s in range(0, len(m), batch_size)]
    return np.concatenate(zs) if zs else np.zeros((0, model.cfg.d_model), dtype=np.float32)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: TrainState, tcfg: TrainConfig, extra: Optional[dict] = None):
    tensors = {f"model.{k}": v for k, v in state.model.state_dict().items()}
    opt = state.optimizer.state_dict()
    adam_steps = {}
    for idx, st in opt["state"].items():
        tensors[f"adam.{idx}.exp_avg"] = st["exp_avg"]
        tensors[f"adam.{idx}.exp_avg_sq"] = st["exp_avg_sq"]
        adam_steps[str(idx)] = float(st["step"])
    meta = {"kind": "autoencoder", "model": state.model.cfg.to_dict(), "train": asdict(tcfg),
            "step": state.step, "adam_steps": adam_steps,
            "generator": state.generator.get_state().tolist(),
            # module dropout draws from the global generator
            "torch_rng": torch.get_rng_state().tolist()}
    if extra:
        meta.update(extra)
    return save_tensors(path, tensors, meta)


def load_checkpoint(path, with_optimizer: bool = True):
    """Return ``(state, train_config, meta)``.

    With ``with_optimizer`` the global torch RNG is restored too, so a resumed
    run repeats the uninterrupted one exactly.
    """
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "autoencoder":
        raise ValueError(f"{path} is not an autoencoder checkpoint")
    mcfg = ModelConfig(**meta["model"])
    tcfg = TrainConfig(**meta["train"])
    model = SequenceAutoencoder(mcfg)
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items()
                           if k.startswith("model.")})
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr)
    if with_optimizer and meta.get("adam_steps"):
        params = list(model.parameters())
        for idx, step in sorted(meta["adam_steps"].items(), key=lambda kv: int(kv[0])):
            p = params[int(idx)]
            opt.state[p] = {
                "step": torch.tensor(step),
                "exp_avg": tensors[f"adam.{idx}.exp_avg"].clone(),
                "exp_avg_sq": tensors[f"adam.{idx}.exp_avg_sq"].clone(),
            }
    if with_optimizer and "torch_rng" in meta:
        torch.set_rng_state(torch.tensor(meta["torch_rng"], dtype=torch.uint8))
    gen = torch.Generator()
    if "generator" in meta:
        gen.set_state(torch.tensor(meta["generator"], dtype=torch.uint8))
    return TrainState(model, opt, int(meta["step"]), gen), tcfg, meta
