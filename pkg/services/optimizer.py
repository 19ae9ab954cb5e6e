from typing import Dict, List, Sequence, Tuple
import math

import numpy as np

from config.run_config import OptimConfig
from services.autodiff import Tensor


def scheduled_lr(config: OptimConfig, step: int) -> float:
    """Learning rate for the 1-based optimizer step"""
    if config.schedule == "constant":
        return config.lr
    if config.warmup_steps and step <= config.warmup_steps:
        return config.lr * step / config.warmup_steps
    decay_steps = max(1, config.total_steps - config.warmup_steps)
    progress = min(1.0, (step - config.warmup_steps) / decay_steps)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class OptimizerState:
    """AdamW moments per trainable tensor, keyed by parameter name"""

    def __init__(self, config: OptimConfig, named_params: Sequence[Tuple[str, Tensor]]):
        self.config = config
        self.step = 0
        self.lr = config.lr
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        for name, p in named_params:
            if not p.requires_grad:
                raise ValueError(f"frozen tensor {name} handed to the optimizer")
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)


class AdamW:
    def __init__(self, named_params: Sequence[Tuple[str, Tensor]], config: OptimConfig):
        self.params: List[Tuple[str, Tensor]] = [(n, p) for n, p in named_params if p.requires_grad]
        self.config = config
        self.state = OptimizerState(config, self.params)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for _, p in self.params:
            if p.grad is not None:
                total += float(np.sum(np.square(p.grad, dtype=np.float64)))
        return math.sqrt(total)

    def step(self, grad_scale: float = 1.0) -> Tuple[float, float]:
        """One clipped AdamW update; returns (pre-clip gradient norm, learning rate)"""
        c = self.config
        state = self.state
        state.step += 1
        state.lr = lr = scheduled_lr(c, state.step)

        norm = self.grad_norm() * grad_scale
        clip = min(1.0, c.clip_norm / (norm + 1e-6)) if c.clip_norm > 0 else 1.0
        b1_t = 1.0 - c.beta1 ** state.step
        b2_t = 1.0 - c.beta2 ** state.step

        for name, p in self.params:
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = (p.grad * (grad_scale * clip)).astype(p.data.dtype)
            m = state.m[name] = c.beta1 * state.m[name] + (1.0 - c.beta1) * g
            v = state.v[name] = c.beta2 * state.v[name] + (1.0 - c.beta2) * g * g
            update = (m / b1_t) / (np.sqrt(v / b2_t) + c.eps)
            # decoupled weight decay
            p.data = (p.data - lr * (update + c.weight_decay * p.data)).astype(p.data.dtype)
        return norm, lr
