"""Finite-difference verification of every differentiable primitive and of
the joint training loss on a micro-model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import model as apn
from . import tensor as T
from .tensor import Tensor, grad_check

THRESHOLD = 1e-4


def _sq(t: Tensor) -> Tensor:
    return T.sum_(T.mul(t, t))


def _conv(x: Tensor) -> Tensor:
    img = T.reshape(x, (1, 2, 3, 3))
    return _sq(T.conv2d(img, img, T.reshape(T.sum_(x), (1,)), stride=2, pad=1))


# name -> (scalar function of one tensor, input shape)
PRIMITIVES = {
    "add": (lambda x: _sq(T.add(x, T.transpose(T.transpose(x)))), (3, 4)),
    "sub": (lambda x: _sq(T.sub(T.scale(x, 3.0), T.relu(x))), (3, 4)),
    "mul": (lambda x: T.sum_(T.mul(T.mul(x, x), x)), (3, 4)),
    "scale": (lambda x: _sq(T.scale(x, -1.7)), (3, 4)),
    "relu": (lambda x: T.sum_(T.mul(T.relu(x), x)), (3, 4)),
    "reshape": (lambda x: _sq(T.matmul(T.reshape(x, (4, 3)), T.reshape(x, (3, 4)))), (3, 4)),
    "transpose": (lambda x: _sq(T.matmul(T.transpose(x, (1, 0, 2)), Tensor(np.arange(6.0).reshape(2, 3)))),
                  (2, 3, 2)),
    "sum": (lambda x: _sq(T.sum_(x, axis=1)), (3, 4)),
    "concat": (lambda x: _sq(T.matmul(T.concat([x, T.scale(x, 2.0)], axis=0), T.transpose(x))), (2, 3)),
    "matmul": (lambda x: _sq(T.matmul(x, T.transpose(x))), (3, 4)),
    "linear": (lambda x: _sq(T.linear(x, T.transpose(x), T.sum_(x, axis=0))), (4, 4)),
    "dot": (lambda x: T.mul(T.dot(T.reshape(x, (12,)), T.reshape(x, (12,))), T.sum_(x)), (3, 4)),
    "conv2d": (_conv, (18,)),
    "mean_spatial": (lambda x: _sq(T.mean_spatial(T.mul(x, x))), (2, 3, 4)),
    "max_spatial": (lambda x: _sq(T.max_spatial(x)[0]), (2, 3, 4)),
    "softmax_ce": (lambda x: T.softmax_ce(T.mul(x, x), [0, 3, 2]), (3, 4)),
    "mse": (lambda x: T.mse(T.mul(x, x), np.linspace(-1, 1, 12).reshape(3, 4)), (3, 4)),
    "group_l2": (lambda x: T.group_l2(x, [[0, 2], [1]]), (3, 4)),
}


@dataclass
class CheckRow:
    name: str
    max_rel_err: float
    trials: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < THRESHOLD


def micro_problem(seed: int):
    """Micro-model with C=4, H=W=3, K=4 in L=2 groups and two seen classes."""
    rng = np.random.default_rng(seed)
    params = apn.init_params(4, channels=(4,), seed=int(rng.integers(2**31)), dtype=np.float64)
    for b in params.conv_biases:
        b.data[...] = rng.normal(0, 0.1, b.shape)
    images = rng.uniform(0, 1, size=(2, 3, 6, 6))
    phi = np.array([[1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 1.0, 0.0]])
    return params, images, np.array([0, 1]), phi, [0, 1], [[0, 1], [2, 3]]


def joint_loss_error(seed: int, lambdas=(0.05, 0.01, 0.2), toggles=(True, True, True, True)) -> float:
    """Worst relative error over all parameter tensors of the joint loss."""
    params, images, labels, phi, seen, groups = micro_problem(seed)
    reg, ad, cpt, zoom = toggles
    cfg = SimpleNamespace(lambda1=lambdas[0], lambda2=lambdas[1], lambda3=lambdas[2], reg=reg, ad=ad, cpt=cpt,
                          zoom=zoom, cpt_clamp=True)
    names = [n for n, _ in params.named()]
    worst = 0.0
    for name in names:
        def fn(x, name=name):
            d = {n: (x if n == name else Tensor(t.data)) for n, t in params.named()}
            nb = len(params.conv_weights)
            p = apn.ModelParams([d[f"conv{i}.weight"] for i in range(nb)], [d[f"conv{i}.bias"] for i in range(nb)],
                                d["V"], d["P"])
            return apn.forward(images, labels, p, phi, seen, groups, cfg)[1].graph

        worst = max(worst, grad_check(fn, dict(params.named())[name].data))
    return worst


def run_suite(trials: int = 100, seed: int = 0) -> list[CheckRow]:
    rows = []
    for i, (name, (fn, shape)) in enumerate(PRIMITIVES.items()):
        rng = np.random.default_rng([seed, i])
        start = time.perf_counter()
        worst = max(grad_check(fn, rng.normal(size=shape)) for _ in range(trials))
        rows.append(CheckRow(name, worst, trials, time.perf_counter() - start))
    start = time.perf_counter()
    worst = max(joint_loss_error(seed * 100_003 + t) for t in range(trials))
    rows.append(CheckRow("joint_loss", worst, trials, time.perf_counter() - start))
    return rows


def format_table(rows: list[CheckRow]) -> str:
    lines = [f"{'op':<14}{'max_rel_err':>14}{'trials':>8}  status"]
    for r in rows:
        lines.append(f"{r.name:<14}{r.max_rel_err:>14.3e}{r.trials:>8}  {'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
