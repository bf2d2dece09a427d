from __future__ import annotations

import numpy as np


class Adam:
    """Adam with bias correction and an optional per-epoch multiplicative decay.

    The effective rate in epoch ``e`` is ``lr * (1 - decay) ** e``.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.decay = lr, beta1, beta2, eps, decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self.epoch = 0

    @property
    def current_lr(self) -> float:
        return self.lr * (1.0 - self.decay) ** self.epoch

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        lr = self.current_lr
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ValueError(f"{k}: gradient shape {g.shape} != parameter {p.shape}")
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def state_tensors(self, prefix="adam.") -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"{prefix}m.{k}"] = self.m[k]
            out[f"{prefix}v.{k}"] = self.v[k]
        return out

    def load_tensors(self, tensors, prefix="adam."):
        self.m, self.v = {}, {}
        for name, arr in tensors.items():
            if name.startswith(prefix + "m."):
                self.m[name[len(prefix) + 2:]] = np.array(arr)
            elif name.startswith(prefix + "v."):
                self.v[name[len(prefix) + 2:]] = np.array(arr)

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "decay": self.decay, "t": self.t, "epoch": self.epoch}

    @classmethod
    def from_hyper(cls, h: dict) -> "Adam":
        opt = cls(h["lr"], h["beta1"], h["beta2"], h["eps"], h["decay"])
        opt.t, opt.epoch = int(h["t"]), int(h["epoch"])
        return opt


def module_params(module, prefix=""):
    return {prefix + k: v for k, v in module.named_params()}


def module_grads(module, prefix=""):
    return {prefix + k: v for k, v in module.named_grads()}
