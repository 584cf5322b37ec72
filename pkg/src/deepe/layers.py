"""Layer objects with explicit forward/backward passes and hand-written gradients.

There is no autodiff here: each layer caches whatever its backward needs
during forward. Parameter gradients accumulate into per-layer buffers until
the optimizer clears them at a step boundary, so multiple backward
contributions inside one step add up.

Modes are the strings "train" and "eval". Eval-mode forwards are pure: same
parameters, same output, no state mutation.
"""
from __future__ import annotations

import numpy as np

from .numkernel import Rng, ShapeError, relu_backward, relu_forward, xavier_normal_init

MODES = ("train", "eval")


def _check_mode(mode: str):
    if mode not in MODES:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


class LinearLayer:
    """y = x W^T + b with weight of shape (out_dim, in_dim)."""

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, dtype=np.float32):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = xavier_normal_init(out_dim, in_dim, rng, dtype)
        self.bias = np.zeros(out_dim, dtype=dtype)
        self.weight_grad = np.zeros_like(self.weight)
        self.bias_grad = np.zeros_like(self.bias)
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"linear layer expects (batch, {self.in_dim}), got {x.shape}"
            )
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("linear backward called before forward")
        self.weight_grad += dout.T @ self._x
        self.bias_grad += dout.sum(axis=0)
        return dout @ self.weight

    def zero_grad(self):
        self.weight_grad.fill(0)
        self.bias_grad.fill(0)

    def named_params(self, prefix: str):
        return [
            (f"{prefix}.weight", self.weight, self.weight_grad),
            (f"{prefix}.bias", self.bias, self.bias_grad),
        ]


class BatchNormLayer:
    """Per-feature batch normalization with learnable scale and shift.

    Train mode normalizes with batch statistics (biased variance) and folds
    the unbiased batch variance into the running estimates with the given
    momentum. Eval mode is a deterministic affine map using the running
    statistics.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(dim, dtype=dtype)
        self.beta = np.zeros(dim, dtype=dtype)
        self.gamma_grad = np.zeros_like(self.gamma)
        self.beta_grad = np.zeros_like(self.beta)
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self._cache = None

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        _check_mode(mode)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"batch norm expects (batch, {self.dim}), got {x.shape}")
        n = x.shape[0]
        if mode == "train":
            if n < 2:
                raise ValueError(
                    f"batch norm in train mode needs a batch of at least 2 rows, got {n}"
                )
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean) * inv_std
            m = np.asarray(self.momentum, dtype=x.dtype)
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean
            self.running_var[...] = (1 - m) * self.running_var + m * var * (n / (n - 1))
            self._cache = ("train", xhat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * inv_std
            self._cache = ("eval", xhat, inv_std)
        return self.gamma * xhat + self.beta

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("batch norm backward called before forward")
        mode, xhat, inv_std = self._cache
        self.beta_grad += dout.sum(axis=0)
        self.gamma_grad += (dout * xhat).sum(axis=0)
        dxhat = dout * self.gamma
        if mode == "eval":
            return dxhat * inv_std
        # Batch statistics couple every row: subtract the per-feature means of
        # dxhat and its xhat-weighted projection before rescaling.
        return (
            dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0)
        ) * inv_std

    def zero_grad(self):
        self.gamma_grad.fill(0)
        self.beta_grad.fill(0)

    def named_params(self, prefix: str):
        return [
            (f"{prefix}.gamma", self.gamma, self.gamma_grad),
            (f"{prefix}.beta", self.beta, self.beta_grad),
        ]

    def named_state(self, prefix: str):
        return [
            (f"{prefix}.running_mean", self.running_mean),
            (f"{prefix}.running_var", self.running_var),
        ]


class DropoutLayer:
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval mode is identity.

    p == 0 short-circuits without consuming any randomness.
    """

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self._mask = None
        self._scale = None

    def forward(self, x: np.ndarray, mode: str, rng: Rng | None = None) -> np.ndarray:
        _check_mode(mode)
        if mode == "eval" or self.p == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("train-mode dropout with p > 0 needs an rng")
        self._mask = rng.random(x.shape) >= self.p
        self._scale = x.dtype.type(1.0 / (1.0 - self.p))
        return np.where(self._mask, x * self._scale, x.dtype.type(0))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._mask is None:
            return dout
        return np.where(self._mask, dout * self._scale, dout.dtype.type(0))


class DeepEBlock:
    """Residual building block without a final activation.

    Output is the sum of two branches over the input x:

      * linear branch: x itself, or Ws x when in_dim != out_dim, with
        elementwise identity dropout (small ratio) in train mode;
      * nonlinear branch: fc1 -> BN -> activation -> dropout -> fc2 -> BN
        -> dropout.

    Because the sum is left unactivated, stacking n blocks yields a hybrid of
    terms whose nonlinear order ranges over 0..n. Either branch can be gated
    off for ablations; gating zeroes the contribution without removing
    parameters, so checkpoints stay shape-compatible.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        rng: Rng,
        dtype=np.float32,
        p_fc: float = 0.0,
        p_identity: float = 0.0,
        gate_linear: bool = True,
        gate_nonlinear: bool = True,
        activation: str = "relu",
    ):
        if activation not in ("relu", "identity"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.gate_linear = gate_linear
        self.gate_nonlinear = gate_nonlinear
        self.ws = LinearLayer(in_dim, out_dim, rng, dtype) if in_dim != out_dim else None
        self.fc1 = LinearLayer(in_dim, out_dim, rng, dtype)
        self.bn1 = BatchNormLayer(out_dim, dtype=dtype)
        self.drop1 = DropoutLayer(p_fc)
        self.fc2 = LinearLayer(out_dim, out_dim, rng, dtype)
        self.bn2 = BatchNormLayer(out_dim, dtype=dtype)
        self.drop2 = DropoutLayer(p_fc)
        self.drop_identity = DropoutLayer(p_identity)
        self._cache = None

    def forward(self, x: np.ndarray, mode: str, rng: Rng | None = None) -> np.ndarray:
        _check_mode(mode)
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"block expects (batch, {self.in_dim}), got {x.shape}")
        pre_act = None
        out = np.zeros((x.shape[0], self.out_dim), dtype=x.dtype)
        if self.gate_linear:
            identity = self.ws.forward(x) if self.ws is not None else x
            out = out + self.drop_identity.forward(identity, mode, rng)
        if self.gate_nonlinear:
            a = self.bn1.forward(self.fc1.forward(x), mode)
            pre_act = a
            if self.activation == "relu":
                a = relu_forward(a)
            a = self.drop1.forward(a, mode, rng)
            a = self.bn2.forward(self.fc2.forward(a), mode)
            a = self.drop2.forward(a, mode, rng)
            out = out + a
        self._cache = (x.shape, pre_act)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("block backward called before forward")
        x_shape, pre_act = self._cache
        dx = np.zeros(x_shape, dtype=dout.dtype)
        if self.gate_nonlinear:
            da = self.drop2.backward(dout)
            da = self.fc2.backward(self.bn2.backward(da))
            da = self.drop1.backward(da)
            if self.activation == "relu":
                da = relu_backward(pre_act, da)
            dx += self.fc1.backward(self.bn1.backward(da))
        if self.gate_linear:
            di = self.drop_identity.backward(dout)
            dx += self.ws.backward(di) if self.ws is not None else di
        return dx

    def _layers(self):
        layers = [("fc1", self.fc1), ("bn1", self.bn1), ("fc2", self.fc2), ("bn2", self.bn2)]
        if self.ws is not None:
            layers.insert(0, ("ws", self.ws))
        return layers

    def zero_grad(self):
        for _, layer in self._layers():
            layer.zero_grad()

    def named_params(self, prefix: str):
        out = []
        for name, layer in self._layers():
            out.extend(layer.named_params(f"{prefix}.{name}"))
        return out

    def named_state(self, prefix: str):
        return self.bn1.named_state(f"{prefix}.bn1") + self.bn2.named_state(f"{prefix}.bn2")


class ResNetBlock:
    """Residual building block *with* a final activation on the sum.

    The inner chain is a configurable number of linear layers, each followed
    by BN (activation and dropout between inner layers, none after the last),
    and the output is activation(identity + chain). Unlike DeepEBlock the
    final activation makes every output term nonlinear.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        inner_layers: int,
        rng: Rng,
        dtype=np.float32,
        p_fc: float = 0.0,
        activation: str = "relu",
    ):
        if inner_layers < 1:
            raise ValueError(f"inner_layers must be >= 1, got {inner_layers}")
        if activation not in ("relu", "identity"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.ws = LinearLayer(in_dim, out_dim, rng, dtype) if in_dim != out_dim else None
        self.fcs = []
        self.bns = []
        self.drops = []
        for j in range(inner_layers):
            self.fcs.append(LinearLayer(in_dim if j == 0 else out_dim, out_dim, rng, dtype))
            self.bns.append(BatchNormLayer(out_dim, dtype=dtype))
            self.drops.append(DropoutLayer(p_fc))
        self._cache = None

    def forward(self, x: np.ndarray, mode: str, rng: Rng | None = None) -> np.ndarray:
        _check_mode(mode)
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"block expects (batch, {self.in_dim}), got {x.shape}")
        h = x
        inner_pre = []
        last = len(self.fcs) - 1
        for j, (fc, bn, drop) in enumerate(zip(self.fcs, self.bns, self.drops)):
            h = bn.forward(fc.forward(h), mode)
            if j < last:
                inner_pre.append(h)
                if self.activation == "relu":
                    h = relu_forward(h)
            h = drop.forward(h, mode, rng)
        identity = self.ws.forward(x) if self.ws is not None else x
        s = identity + h
        self._cache = (x.shape, inner_pre, s)
        if self.activation == "relu":
            return relu_forward(s)
        return s

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("block backward called before forward")
        x_shape, inner_pre, s = self._cache
        ds = relu_backward(s, dout) if self.activation == "relu" else dout
        dh = ds
        last = len(self.fcs) - 1
        for j in range(last, -1, -1):
            dh = self.drops[j].backward(dh)
            if j < last and self.activation == "relu":
                dh = relu_backward(inner_pre[j], dh)
            dh = self.fcs[j].backward(self.bns[j].backward(dh))
        dx = np.zeros(x_shape, dtype=dout.dtype)
        dx += dh
        dx += self.ws.backward(ds) if self.ws is not None else ds
        return dx

    def _layers(self):
        layers = []
        if self.ws is not None:
            layers.append(("ws", self.ws))
        for j, (fc, bn) in enumerate(zip(self.fcs, self.bns)):
            layers.append((f"fc{j}", fc))
            layers.append((f"bn{j}", bn))
        return layers

    def zero_grad(self):
        for _, layer in self._layers():
            layer.zero_grad()

    def named_params(self, prefix: str):
        out = []
        for name, layer in self._layers():
            out.extend(layer.named_params(f"{prefix}.{name}"))
        return out

    def named_state(self, prefix: str):
        out = []
        for j, bn in enumerate(self.bns):
            out.extend(bn.named_state(f"{prefix}.bn{j}"))
        return out


def identity_dropout_total_drop_prob(n_blocks: int, alpha: float, order: int) -> float:
    """Total drop probability seen by the order-`order` feature in an n-block stack.

    A feature of nonlinear order i rides the identity mapping through the
    remaining n - i blocks, each dropping it independently with ratio alpha,
    so the probability it is dropped at least once is 1 - (1-alpha)^(n-i).
    Shallower features are therefore dropped more aggressively than deep ones.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    if not 0 <= order <= n_blocks:
        raise ValueError(f"order must be in [0, {n_blocks}], got {order}")
    return 1.0 - (1.0 - alpha) ** (n_blocks - order)
