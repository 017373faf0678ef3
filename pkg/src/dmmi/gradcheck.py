"""Central finite-difference verification of autograd gradients."""
from __future__ import annotations

import numpy as np
import torch

from .config import RunConfig, tiny_config
from .synthetic import generate_split
from .text import template_vocab
from .training import Dataset, build_model, make_batch


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(fn, params: dict, n_coords: int = 10, h: float = 1e-5, seed: int = 0,
                    floor: float = 1e-6) -> dict[str, float]:
    """Compare autograd against central differences on sampled coordinates.

    ``fn`` takes no arguments and returns a scalar tensor built from
    ``params`` (name -> leaf tensor). Returns the max relative error per name.
    """
    for p in params.values():
        p.grad = None
    fn().backward()
    grads = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
             for n, p in params.items()}
    rng = np.random.default_rng(seed)
    report = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            k = min(n_coords, flat.numel())
            coords = rng.choice(flat.numel(), size=k, replace=False)
            worst = 0.0
            for c in coords:
                orig = flat[c].item()
                flat[c] = orig + h
                up = fn().item()
                flat[c] = orig - h
                down = fn().item()
                flat[c] = orig
                numeric = (up - down) / (2 * h)
                worst = max(worst, relative_error(grads[name].view(-1)[c].item(), numeric, floor))
            report[name] = worst
    return report


def tiny_setup(cfg: RunConfig | None = None, n_samples: int = 3, seed: int = 0):
    """A float64 tiny model and a fixed batch mixing delta = 1 and delta = 0 samples."""
    cfg = cfg or tiny_config(seed=seed)
    vocab = template_vocab()
    samples = generate_split(cfg.data, "train")
    # ensure the batch carries both delta values
    ones = [s for s in samples if s.delta == 1]
    zeros = [s for s in samples if s.delta == 0]
    chosen = (ones[:max(1, n_samples - 1)] + zeros[:1])[:n_samples]
    data = Dataset.from_samples(chosen, vocab, cfg.max_len)
    model = build_model(cfg, vocab).double()
    model.train()
    batch = make_batch(data, range(len(data)), cfg.seed, 0, vocab).to(torch.float64)
    # give the zero-initialised gates and biases generic values so every path is live
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(("gamma_v", "gamma_e")):
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.5)
    return cfg, model, batch


def model_gradcheck(cfg: RunConfig | None = None, n_coords: int = 10, h: float = 1e-6,
                    seed: int = 0, loss: str = "total", floor: float = 1e-4) -> dict[str, float]:
    """Finite-difference check of a loss of the full tiny model, per parameter tensor.

    The stem sees near-constant synthetic images, so batch norm divides by a
    small spread and the loss is sharply curved there; h=1e-6 keeps the
    truncation error well below tolerance. Key biases have an exactly zero
    gradient (softmax is shift invariant), and ``floor`` turns those into an
    absolute comparison against the ~1e-8 round-off of the differences.
    """
    cfg, model, batch = tiny_setup(cfg, seed=seed)
    # L_sim stops the gradient into its target, so the finite differences must
    # see that target frozen at the base point too
    with torch.no_grad():
        target = model(batch.images, batch.ids, batch.valid).e4.clone()

    def fn():
        out = model(batch.images, batch.ids, batch.valid, erased_ids=batch.erased_ids)
        parts = model.losses(out, batch.masks, batch.valid, batch.delta, cfg.tau, sim_target=target)
        return parts.total if loss == "total" else getattr(parts, loss)

    params = dict(model.named_parameters())
    return check_gradients(fn, params, n_coords=n_coords, h=h, seed=seed, floor=floor)
