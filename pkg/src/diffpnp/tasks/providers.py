"""Parameter providers: small differentiable maps from a flat parameter
vector to the quantity a training loop optimizes (2D keypoints, 3D
structure, or intrinsics). Each exposes `forward()` and a vector-Jacobian
`backward(grad_output)` at the current parameters."""

from __future__ import annotations

import numpy as np


class DirectProvider:
    """Identity map: the parameters are the output."""

    kind = "direct"

    def __init__(self, theta0):
        self.theta = np.asarray(theta0, dtype=np.float64).reshape(-1).copy()

    @property
    def output_dim(self) -> int:
        return self.theta.size

    def forward(self) -> np.ndarray:
        return self.theta.copy()

    def backward(self, grad_output) -> np.ndarray:
        return np.asarray(grad_output, dtype=np.float64).reshape(-1).copy()


class MlpProvider:
    """Multilayer perceptron with a fixed all-ones input.

    The network input carries no information; the output is encoded
    entirely in the weights, which is the point: a generic
    overparameterized container for the optimized quantity. Hidden layers
    use tanh, the output layer is linear. Parameters are stored flat as
    [W1, b1, W2, b2, ...].
    """

    kind = "mlp"

    def __init__(self, output_dim: int, hidden=(32, 32), input_dim: int = 8, seed: int = 0):
        self.hidden = tuple(int(h) for h in hidden)
        self.input_dim = int(input_dim)
        self._output_dim = int(output_dim)
        widths = (self.input_dim,) + self.hidden + (self._output_dim,)
        self.shapes = [(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]
        rng = np.random.default_rng(seed)
        parts = []
        for out_w, in_w in self.shapes:
            parts.append(rng.normal(0.0, 1.0 / np.sqrt(in_w), size=out_w * in_w))
            parts.append(np.zeros(out_w))
        self.theta = np.concatenate(parts)
        self._cache = None

    @property
    def output_dim(self) -> int:
        return self._output_dim

    def _unpack(self):
        layers = []
        pos = 0
        for out_w, in_w in self.shapes:
            W = self.theta[pos : pos + out_w * in_w].reshape(out_w, in_w)
            pos += out_w * in_w
            b = self.theta[pos : pos + out_w]
            pos += out_w
            layers.append((W, b))
        return layers

    def forward(self) -> np.ndarray:
        layers = self._unpack()
        a = np.ones(self.input_dim)
        acts = [a]
        for i, (W, b) in enumerate(layers):
            z = W @ a + b
            a = z if i == len(layers) - 1 else np.tanh(z)
            acts.append(a)
        self._cache = acts
        return a.copy()

    def backward(self, grad_output) -> np.ndarray:
        if self._cache is None:
            self.forward()
        acts = self._cache
        layers = self._unpack()
        grad = np.asarray(grad_output, dtype=np.float64).reshape(-1)
        parts = []
        delta = grad
        for i in reversed(range(len(layers))):
            W, _ = layers[i]
            if i != len(layers) - 1:
                delta = delta * (1.0 - acts[i + 1] ** 2)  # tanh'
            gW = np.outer(delta, acts[i])
            gb = delta.copy()
            parts.append((gW.reshape(-1), gb))
            delta = W.T @ delta
        out = []
        for gW, gb in reversed(parts):
            out.append(gW)
            out.append(gb)
        return np.concatenate(out)


class SigmoidBoxProvider:
    """Componentwise `scale * sigmoid(theta)`: outputs confined to (0, scale)."""

    kind = "sigmoid"

    def __init__(self, theta0, scale: float = 1000.0):
        self.theta = np.asarray(theta0, dtype=np.float64).reshape(-1).copy()
        self.scale = float(scale)

    @property
    def output_dim(self) -> int:
        return self.theta.size

    def _sigmoid(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.theta))

    def forward(self) -> np.ndarray:
        return self.scale * self._sigmoid()

    def backward(self, grad_output) -> np.ndarray:
        s = self._sigmoid()
        grad = np.asarray(grad_output, dtype=np.float64).reshape(-1)
        return grad * self.scale * s * (1.0 - s)
