"""Adam with bias correction."""
import numpy as np


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient turns non-finite."""


class Adam:
    def __init__(self, params, lr=1.0e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first_moment = [np.zeros_like(p.data) for p in self.params]
        self.second_moment = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingDiverged(
                    f"non-finite gradient in parameter #{i} shape {p.shape} at step {self.step_count + 1}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p, m, v in zip(self.params, self.first_moment, self.second_moment):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / c1
            vhat = v / c2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
        self.zero_grad()

    def state_dict(self):
        return {"step_count": self.step_count,
                "first_moment": [m.copy() for m in self.first_moment],
                "second_moment": [v.copy() for v in self.second_moment]}


def adam_step(params, state):
    """Functional form: apply one update of ``state`` (an :class:`Adam`)."""
    if list(params) != state.params:
        raise ValueError("adam_step: parameter list does not match the optimizer state")
    state.step()
    return params
