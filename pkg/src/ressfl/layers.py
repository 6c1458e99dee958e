"""Fixed operator set with hand-written forward/backward passes.

Every layer works on batch-first ``float64`` arrays.  ``forward`` caches what
``backward`` needs; ``backward`` writes parameter gradients (overwriting any
previous ones), returns the gradient with respect to the layer input and drops
the cache, so a second ``backward`` without a fresh ``forward`` is an error.
"""
from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BackwardError, ShapeError
from .tensor import DTYPE, Tensor, check_finite

Shape = tuple[int, ...]


def kaiming_uniform(rng: np.random.Generator, shape: Shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    kind = "Layer"

    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}
        self._cache = None

    # -- shape algebra ----------------------------------------------------
    def output_shape(self, in_shape: Shape) -> Shape:
        return tuple(in_shape)

    def flops(self, in_shape: Shape) -> int:
        return 0

    # -- passes -----------------------------------------------------------
    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise BackwardError(f"{self}: backward called without a preceding forward")
        cache, self._cache = self._cache, None
        return cache

    def _check_grad_shape(self, grad: np.ndarray, expected: Shape) -> None:
        if grad.shape != expected:
            raise ShapeError(f"{self}: gradient shape {grad.shape} does not match output shape {expected}")

    # -- parameters -------------------------------------------------------
    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self.params.items():
            yield prefix + name, p

    def freeze(self, frozen: bool = True) -> None:
        for _, p in self.named_params():
            p.trainable = not frozen

    def __repr__(self) -> str:
        return self.kind


class Conv2D(Layer):
    kind = "Conv2D"

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: int | None = None, rng: np.random.Generator | None = None):
        super().__init__()
        if kernel < 1 or stride < 1:
            raise ShapeError(f"Conv2D needs kernel >= 1 and stride >= 1, got k={kernel}, s={stride}")
        if in_ch < 1 or out_ch < 1:
            raise ShapeError(f"Conv2D channels must be positive, got {in_ch}->{out_ch}")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride = kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.params["weight"] = Tensor(kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in), "weight")
        self.params["bias"] = Tensor(np.zeros(out_ch), "bias")

    def __repr__(self) -> str:
        return f"Conv2D({self.in_ch}->{self.out_ch},k{self.kernel},s{self.stride},p{self.padding})"

    def output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ShapeError(f"{self}: expected input [C={self.in_ch}, H, W], got {list(in_shape)}")
        _, h, w = in_shape
        k, s, p = self.kernel, self.stride, self.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if h + 2 * p < k or w + 2 * p < k or ho < 1 or wo < 1:
            raise ShapeError(f"{self}: input {list(in_shape)} too small for the kernel")
        return (self.out_ch, ho, wo)

    def flops(self, in_shape: Shape) -> int:
        _, ho, wo = self.output_shape(in_shape)
        return 2 * self.kernel ** 2 * self.in_ch * self.out_ch * ho * wo

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeError(f"{self}: expected a 4-d batch, got shape {x.shape}")
        _, ho, wo = self.output_shape(x.shape[1:])
        n = x.shape[0]
        k, s, p = self.kernel, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        wm = self.params["weight"].data.reshape(self.out_ch, -1)
        out = cols @ wm.T + self.params["bias"].data
        self._cache = (cols, xp.shape, x.shape)
        return out.reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        cols, xp_shape, x_shape = self._take_cache()
        n = x_shape[0]
        ho, wo = (xp_shape[2] - self.kernel) // self.stride + 1, (xp_shape[3] - self.kernel) // self.stride + 1
        self._check_grad_shape(grad, (n, self.out_ch, ho, wo))
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        w = self.params["weight"]
        w.set_grad((g2.T @ cols).reshape(w.shape))
        self.params["bias"].set_grad(grad.sum(axis=(0, 2, 3)))
        dcols = (g2 @ w.data.reshape(self.out_ch, -1)).reshape(n, ho, wo, self.in_ch, self.kernel, self.kernel)
        dxp = np.zeros(xp_shape, dtype=DTYPE)
        s = self.stride
        for i in range(self.kernel):
            for j in range(self.kernel):
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        p = self.padding
        if p:
            dxp = dxp[:, :, p:p + x_shape[2], p:p + x_shape[3]]
        return np.ascontiguousarray(dxp)


class ConvTranspose2D(Layer):
    """Transposed convolution; weight layout is ``[in_ch, out_ch, k, k]``."""

    kind = "ConvTranspose2D"

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 2, padding: int = 1,
                 output_padding: int = 1, rng: np.random.Generator | None = None):
        super().__init__()
        if kernel < 1 or stride < 1:
            raise ShapeError(f"ConvTranspose2D needs kernel >= 1 and stride >= 1, got k={kernel}, s={stride}")
        if output_padding < 0 or (output_padding > 0 and output_padding >= stride):
            raise ShapeError(f"ConvTranspose2D output_padding must be < stride, got {output_padding} with s={stride}")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding, self.output_padding = kernel, stride, padding, output_padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.params["weight"] = Tensor(kaiming_uniform(rng, (in_ch, out_ch, kernel, kernel), fan_in), "weight")
        self.params["bias"] = Tensor(np.zeros(out_ch), "bias")

    def __repr__(self) -> str:
        return (f"ConvTranspose2D({self.in_ch}->{self.out_ch},k{self.kernel},s{self.stride},"
                f"p{self.padding},op{self.output_padding})")

    def output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ShapeError(f"{self}: expected input [C={self.in_ch}, H, W], got {list(in_shape)}")
        _, h, w = in_shape
        k, s, p, op = self.kernel, self.stride, self.padding, self.output_padding
        ho, wo = (h - 1) * s - 2 * p + k + op, (w - 1) * s - 2 * p + k + op
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self}: input {list(in_shape)} gives empty output")
        return (self.out_ch, ho, wo)

    def flops(self, in_shape: Shape) -> int:
        self.output_shape(in_shape)
        _, h, w = in_shape
        return 2 * self.kernel ** 2 * self.in_ch * self.out_ch * h * w

    def _full_size(self, h: int, ho: int) -> int:
        return max((h - 1) * self.stride + self.kernel, self.padding + ho)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeError(f"{self}: expected a 4-d batch, got shape {x.shape}")
        _, ho, wo = self.output_shape(x.shape[1:])
        n, _, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.padding
        x2 = x.transpose(0, 2, 3, 1).reshape(-1, self.in_ch)
        wm = self.params["weight"].data.reshape(self.in_ch, -1)
        cols = (x2 @ wm).reshape(n, h, w, self.out_ch, k, k)
        full = np.zeros((n, self.out_ch, self._full_size(h, ho), self._full_size(w, wo)), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                full[:, :, i:i + s * (h - 1) + 1:s, j:j + s * (w - 1) + 1:s] += cols[..., i, j].transpose(0, 3, 1, 2)
        out = full[:, :, p:p + ho, p:p + wo] + self.params["bias"].data[None, :, None, None]
        self._cache = (x2, x.shape, full.shape)
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x2, x_shape, full_shape = self._take_cache()
        n, _, h, w = x_shape
        _, ho, wo = self.output_shape(x_shape[1:])
        self._check_grad_shape(grad, (n, self.out_ch, ho, wo))
        k, s, p = self.kernel, self.stride, self.padding
        gfull = np.zeros(full_shape, dtype=DTYPE)
        gfull[:, :, p:p + ho, p:p + wo] = grad
        win = sliding_window_view(gfull, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :h, :w]
        gcols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, -1)
        wt = self.params["weight"]
        wm = wt.data.reshape(self.in_ch, -1)
        wt.set_grad((x2.T @ gcols).reshape(wt.shape))
        self.params["bias"].set_grad(grad.sum(axis=(0, 2, 3)))
        return (gcols @ wm.T).reshape(n, h, w, self.in_ch).transpose(0, 3, 1, 2)


class Dense(Layer):
    kind = "Dense"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        super().__init__()
        if in_features < 1 or out_features < 1:
            raise ShapeError(f"Dense features must be positive, got {in_features}->{out_features}")
        self.in_features, self.out_features = in_features, out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = Tensor(kaiming_uniform(rng, (out_features, in_features), in_features), "weight")
        self.params["bias"] = Tensor(np.zeros(out_features), "bias")

    def __repr__(self) -> str:
        return f"Dense({self.in_features}->{self.out_features})"

    def output_shape(self, in_shape: Shape) -> Shape:
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(f"{self}: expected input [{self.in_features}], got {list(in_shape)}")
        return (self.out_features,)

    def flops(self, in_shape: Shape) -> int:
        self.output_shape(in_shape)
        return 2 * self.in_features * self.out_features

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2:
            raise ShapeError(f"{self}: expected a 2-d batch, got shape {x.shape}")
        self.output_shape(x.shape[1:])
        self._cache = x
        return x @ self.params["weight"].data.T + self.params["bias"].data

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x = self._take_cache()
        self._check_grad_shape(grad, (x.shape[0], self.out_features))
        w = self.params["weight"]
        w.set_grad(grad.T @ x)
        self.params["bias"].set_grad(grad.sum(axis=0))
        return grad @ w.data


class ReLU(Layer):
    kind = "ReLU"

    def flops(self, in_shape: Shape) -> int:
        return int(np.prod(in_shape))

    def forward(self, x: np.ndarray) -> np.ndarray:
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        mask = self._take_cache()
        self._check_grad_shape(grad, mask.shape)
        return np.where(mask, grad, 0.0)


class Sigmoid(Layer):
    kind = "Sigmoid"

    def flops(self, in_shape: Shape) -> int:
        return int(np.prod(in_shape))

    def forward(self, x: np.ndarray) -> np.ndarray:
        out = np.exp(-np.logaddexp(0.0, -x))
        self._cache = out
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        out = self._take_cache()
        self._check_grad_shape(grad, out.shape)
        return grad * out * (1.0 - out)


class MaxPool2x2(Layer):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""

    kind = "MaxPool2x2"

    def output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3 or in_shape[1] < 2 or in_shape[2] < 2:
            raise ShapeError(f"MaxPool2x2: expected input [C, H>=2, W>=2], got {list(in_shape)}")
        c, h, w = in_shape
        return (c, h // 2, w // 2)

    def flops(self, in_shape: Shape) -> int:
        return int(np.prod(self.output_shape(in_shape))) * 4

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeError(f"MaxPool2x2: expected a 4-d batch, got shape {x.shape}")
        c, ho, wo = self.output_shape(x.shape[1:])
        n = x.shape[0]
        blocks = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
        idx = blocks.argmax(axis=-1)
        self._cache = (idx, x.shape)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        idx, x_shape = self._take_cache()
        self._check_grad_shape(grad, idx.shape)
        n, c, ho, wo = idx.shape
        blocks = np.zeros((n, c, ho, wo, 4), dtype=DTYPE)
        np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=-1)
        dx = np.zeros(x_shape, dtype=DTYPE)
        dx[:, :, :2 * ho, :2 * wo] = blocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        return dx


class Flatten(Layer):
    kind = "Flatten"

    def output_shape(self, in_shape: Shape) -> Shape:
        return (int(np.prod(in_shape)),)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        shape = self._take_cache()
        self._check_grad_shape(grad, (shape[0], int(np.prod(shape[1:]))))
        return grad.reshape(shape)


class Sequential(Layer):
    """An ordered stack of layers; also the container every model is built from."""

    kind = "Sequential"

    def __init__(self, layers: Sequence[Layer] = ()):
        super().__init__()
        self.layers: list[Layer] = list(layers)

    def __repr__(self) -> str:
        return "Sequential[" + ", ".join(map(repr, self.layers)) + "]"

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def output_shape(self, in_shape: Shape) -> Shape:
        shape = tuple(in_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def flops(self, in_shape: Shape) -> int:
        total, shape = 0, tuple(in_shape)
        for layer in self.layers:
            total += layer.flops(shape)
            shape = layer.output_shape(shape)
        return total

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return check_finite(x, f"output of {self.kind}")

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return check_finite(grad, "input gradient")

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_params()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_params())
        if strict and set(own) != set(state):
            missing, extra = sorted(set(own) - set(state)), sorted(set(state) - set(own))
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, arr in state.items():
            if name not in own:
                continue
            if own[name].shape != np.shape(arr):
                raise ShapeError(f"tensor {name!r}: expected shape {own[name].shape}, got {np.shape(arr)}")
            own[name].data = np.array(arr, dtype=DTYPE)


class Residual(Layer):
    """``y = inner(x) + x``; the inner stack must preserve shape."""

    kind = "Residual"

    def __init__(self, inner: Sequence[Layer]):
        super().__init__()
        self.inner = inner if isinstance(inner, Sequential) else Sequential(inner)

    def __repr__(self) -> str:
        return f"Residual({self.inner!r})"

    def output_shape(self, in_shape: Shape) -> Shape:
        out = self.inner.output_shape(in_shape)
        if tuple(out) != tuple(in_shape):
            raise ShapeError(f"Residual: inner stack maps {list(in_shape)} to {list(out)}")
        return out

    def flops(self, in_shape: Shape) -> int:
        return self.inner.flops(in_shape) + int(np.prod(in_shape))

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = True
        return self.inner.forward(x) + x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        self._take_cache()
        return self.inner.backward(grad) + grad

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.inner.named_params(prefix + "inner.")


def forward(layer: Layer, x: np.ndarray) -> np.ndarray:
    return layer.forward(np.asarray(x, dtype=DTYPE))


def backward(network: Layer, loss_grad: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backpropagate ``loss_grad``; returns (parameter gradients by name, input gradient)."""
    dx = network.backward(np.asarray(loss_grad, dtype=DTYPE))
    grads = {name: p.grad for name, p in network.named_params()}
    return grads, dx
