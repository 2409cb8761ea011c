"""Optimizers and schedules for the training loops."""

from __future__ import annotations

import math

import numpy as np


def _no_decay(name, tensor):
    # biases, norm affines, tokens and positions are excluded from weight decay
    return tensor.ndim < 2 or "token" in name or "pos_embed" in name


class AdamW:
    """Adam with decoupled weight decay on weight matrices only."""

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(named_params)  # [(name, Tensor)]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {n: np.zeros_like(p.data) for n, p in self.params}
        self._v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and not _no_decay(name, p):
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


class SGD:
    def __init__(self, named_params, lr=1e-3, momentum=0.9, weight_decay=0.0):
        self.params = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self):
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and not _no_decay(name, p):
                g = g + self.weight_decay * p.data
            buf = self._buf[name]
            buf *= self.momentum
            buf += g
            p.data = p.data - self.lr * buf

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm):
    """Scale all grads so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def cosine_ramp(step, total_steps, start, end):
    """Cosine interpolation from start (step 0) to end (step total_steps)."""
    if total_steps <= 0:
        return end
    t = min(max(step / total_steps, 0.0), 1.0)
    return end - (end - start) * 0.5 * (1.0 + math.cos(math.pi * t))


def warmup_cosine_lr(step, total_steps, base_lr, warmup_steps, final_lr=0.0):
    """Linear warmup to base_lr, then cosine decay to final_lr."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    t = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return final_lr + (base_lr - final_lr) * 0.5 * (1.0 + math.cos(math.pi * t))
