from typing import Iterable, List

import numpy as np

from .logger import UsageError
from .tensor import Parameter


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected ADAM update; clears every gradient afterwards."""
    params = list(params)
    for param in params:
        if param.grad is None:
            raise UsageError(f"Parameter {param.name} has no gradient", argument=param.name)

    for param in params:
        grad = param.grad
        param.step += 1
        param.m = beta1 * param.m + (1.0 - beta1) * grad
        param.v = beta2 * param.v + (1.0 - beta2) * grad * grad
        m_hat = param.m / (1.0 - beta1 ** param.step)
        v_hat = param.v / (1.0 - beta2 ** param.step)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        param.data = (param.data - update).astype(param.dtype, copy=False)
        param.m = param.m.astype(param.dtype, copy=False)
        param.v = param.v.astype(param.dtype, copy=False)
        param.grad = None


class Adam:
    """ADAM over a fixed parameter list with an adjustable learning rate."""

    def __init__(self, params: Iterable[Parameter], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: List[Parameter] = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    @property
    def step_count(self) -> int:
        return self.params[0].step if self.params else 0

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps)
