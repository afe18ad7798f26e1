"""Shared test utilities: tiny model builders, finite differences, access spies."""

from collections import Counter

import numpy as np
import torch

from sfuida.core import Hyperparameters
from sfuida.dataio import SyntheticSubjectSpec, default_transition_matrix, generate_synthetic
from sfuida.model import ModelConfig, SscModel

TINY_RATE = 3.2  # 96 samples per epoch; plenty for shape/arithmetic tests
BENCH_RATE = 32.0  # 960 samples per epoch; keeps the 13 Hz component below Nyquist


def tiny_hparams(**kw) -> Hyperparameters:
    base = dict(L=20, T=17, batch_size=8, pretrain_epochs=2,
                ssa_epochs=2, ssp_epochs=2, lr_pretrain=1e-3,
                lr_ssa=1e-4, lr_ssp=1e-4)
    base.update(kw)
    return Hyperparameters(**base)


def tiny_config(sample_rate=TINY_RATE, channels=2, **kw) -> ModelConfig:
    base = dict(
        in_channels=channels,
        samples_per_epoch=int(round(30 * sample_rate)),
        d_z=16,
        d_c=16,
        conv_channels=(8, 16),
        attn_heads=2,
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(h=None, seed=0, **cfg_kw) -> SscModel:
    h = h or tiny_hparams()
    return SscModel(tiny_config(**cfg_kw), h.L, h.T, seed=seed)


def synth_subject(seed=0, num_epochs=60, sample_rate=TINY_RATE, channels=2,
                  gain=1.0, shift=0.0, noise=0.1, subject_id=None):
    spec = SyntheticSubjectSpec(
        seed=seed,
        stage_transition_matrix=default_transition_matrix(),
        amplitude_gain=gain,
        frequency_shift=shift,
        noise_sigma=noise,
    )
    return generate_synthetic(spec, num_epochs, sample_rate=sample_rate,
                              num_channels=channels, subject_id=subject_id)


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    a = a.detach().double().reshape(-1)
    b = b.detach().double().reshape(-1)
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def grads_close(a: torch.Tensor, b: torch.Tensor, rtol=1e-4, zero_tol=1e-7) -> bool:
    """Relative comparison with an absolute escape for exactly-zero gradients
    (e.g. translation-invariant losses give bias parameters zero gradient)."""
    a = a.detach().double().reshape(-1)
    b = b.detach().double().reshape(-1)
    if max(float(a.norm()), float(b.norm())) < zero_tol:
        return True
    return rel_error(a, b) < rtol


def fd_tensor_grad(loss_fn, x: torch.Tensor, eps=1e-6) -> torch.Tensor:
    """Central-difference gradient of loss_fn(x) w.r.t. every element of x."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + eps
        up = float(loss_fn(x))
        flat[i] = orig - eps
        down = float(loss_fn(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def fd_param_grads(model: torch.nn.Module, loss_fn, eps=1e-5, name_filter=None) -> dict:
    """Central-difference gradients of loss_fn() w.r.t. model parameters."""
    grads = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name_filter is not None and not name_filter(name):
                continue
            g = torch.zeros_like(p)
            flat, gflat = p.reshape(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads[name] = g
    return grads


def autograd_param_grads(model: torch.nn.Module, loss_fn) -> dict:
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    return {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for n, p in model.named_parameters()}


class RecordingSpy:
    """Duck-typed SubjectRecording proxy counting attribute reads."""

    def __init__(self, rec):
        object.__setattr__(self, "_rec", rec)
        object.__setattr__(self, "reads", Counter())

    def __getattr__(self, name):
        self.reads[name] += 1
        return getattr(object.__getattribute__(self, "_rec"), name)


def brute_force_mmd(a: np.ndarray, b: np.ndarray, bandwidths) -> float:
    """Independent double-loop multi-kernel MMD oracle (V-statistic)."""
    def kernel_mean(u, v, sigma):
        total = 0.0
        for x in u:
            for y in v:
                total += np.exp(-np.sum((x - y) ** 2) / (2.0 * sigma**2))
        return total / (len(u) * len(v))

    vals = []
    for sigma in bandwidths:
        vals.append(kernel_mean(a, a, sigma) + kernel_mean(b, b, sigma) - 2 * kernel_mean(a, b, sigma))
    return max(float(np.mean(vals)), 0.0)
