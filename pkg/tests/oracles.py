"""Reference computations that share no code with the package."""

from __future__ import annotations

import itertools
import math

import numpy as np
import torch


def central_difference(f, x: torch.Tensor, h: float = 1e-3) -> torch.Tensor:
    """Numerical gradient of scalar f at x (float64), one coordinate at a time."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    f = torch.no_grad()(f)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = f(x).item()
        flat[i] = orig - h
        down = f(x).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.detach().double(), b.detach().double()
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def analytic_grad(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().double().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    return g


def chain_score(em, trans, start, end, labels) -> float:
    s = start[labels[0]] + end[labels[-1]]
    for t, y in enumerate(labels):
        s += em[t][y]
        if t:
            s += trans[labels[t - 1]][y]
    return float(s)


def enumerate_chain(em, trans, start, end):
    """All (labels, score) pairs of a linear chain; numpy float64 inputs."""
    n, k = np.asarray(em).shape
    return [(seq, chain_score(em, trans, start, end, seq)) for seq in itertools.product(range(k), repeat=n)]


def brute_log_partition(em, trans, start, end) -> float:
    scores = np.array([s for _, s in enumerate_chain(em, trans, start, end)])
    m = scores.max()
    return float(m + math.log(np.exp(scores - m).sum()))


def softmax(xs) -> list[float]:
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    z = sum(e)
    return [v / z for v in e]
