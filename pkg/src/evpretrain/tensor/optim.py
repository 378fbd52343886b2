from __future__ import annotations

from typing import Sequence

import numpy as np

from .engine import Tensor


class MissingGradError(RuntimeError):
    pass


class Optimizer:
    """SGD or Adam over a fixed list of parameter tensors.

    Gradients are zeroed after every :meth:`step`.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        method: str = "adam",
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        names: Sequence[str] | None = None,
    ):
        if method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer method {method!r}")
        self.params = list(params)
        self.names = list(names) if names is not None else [p.name or f"p{i}" for i, p in enumerate(self.params)]
        self.method = method
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params] if method == "adam" else []
        self.v = [np.zeros_like(p.data) for p in self.params] if method == "adam" else []

    def step(self) -> None:
        for name, p in zip(self.names, self.params):
            if p.grad is None:
                raise MissingGradError(f"parameter {name!r} has no gradient")
        self.t += 1
        if self.method == "sgd":
            for p in self.params:
                p.data -= self.lr * p.grad
        else:
            b1, b2 = self.betas
            c1 = 1.0 - b1 ** self.t
            c2 = 1.0 - b2 ** self.t
            for i, p in enumerate(self.params):
                g = p.grad
                self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
                self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
                mhat = self.m[i] / c1
                vhat = self.v[i] / c2
                p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        for p in self.params:
            p.zero_grad()

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        """JSON-able header and moment arrays keyed ``m/<name>``, ``v/<name>``."""
        header = {"method": self.method, "lr": self.lr, "betas": list(self.betas), "eps": self.eps, "step": self.t}
        arrays = {}
        for name, m, v in zip(self.names, self.m, self.v):
            arrays[f"m/{name}"] = m
            arrays[f"v/{name}"] = v
        return header, arrays

    def load_state(self, header: dict, arrays: dict[str, np.ndarray]) -> None:
        if header["method"] != self.method:
            raise ValueError(f"optimizer method mismatch: {header['method']} vs {self.method}")
        self.t = int(header["step"])
        if self.method == "adam":
            self.m = [np.array(arrays[f"m/{n}"], dtype=np.float64) for n in self.names]
            self.v = [np.array(arrays[f"v/{n}"], dtype=np.float64) for n in self.names]
