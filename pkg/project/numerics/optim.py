import numpy as np

from project.config import OptimizerConfig, OptimizerKind
from project.numerics.tensor import Tensor


class Optimizer:
    def __init__(self, params: list[Tensor], lr: float, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")

        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _gradient(self, p: Tensor) -> np.ndarray | None:
        if p.grad is None:
            return None

        if self.weight_decay > 0:
            return p.grad + self.weight_decay * p.data

        return p.grad

    def step(self):
        """Apply one update to every parameter with a populated gradient and zero all gradients afterwards."""
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for i, p in enumerate(self.params):
            g = self._gradient(p)

            if g is None:
                continue

            self._velocity[i] = self.momentum * self._velocity[i] + g
            p.data -= self.lr * self._velocity[i]

        self.zero_grad()


class Adam(Optimizer):
    def __init__(
        self,
        params: list[Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        super().__init__(params, lr, weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1

        for i, p in enumerate(self.params):
            g = self._gradient(p)

            if g is None:
                continue

            self._m[i] = self.beta1 * self._m[i] + (1 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1 - self.beta2) * (g * g)
            m_hat = self._m[i] / (1 - self.beta1**self.t)
            v_hat = self._v[i] / (1 - self.beta2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

        self.zero_grad()


def make_optimizer(params: list[Tensor], config: OptimizerConfig, lr: float | None = None) -> Optimizer:
    lr = config.lr if lr is None else lr

    if config.kind == OptimizerKind.sgd_momentum:
        return SGD(params, lr=lr, momentum=config.momentum, weight_decay=config.weight_decay)

    if config.kind == OptimizerKind.adam:
        return Adam(params, lr=lr, betas=config.betas, eps=config.eps, weight_decay=config.weight_decay)

    raise NotImplementedError(f"unknown optimizer {config.kind}")
