"""
Reverse-mode differentiation engine used by the SSPDA objectives.
A Graph records the operations applied to Tensors during a forward pass and
replays their local backward rules in reverse order. Parameters are Tensors
created with requires_grad=True; images and labels stay plain arrays.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_softmax, softmax as _softmax

from errors import ContractError, DimensionError, GraphError, LabelIndexError, ParameterError

logger = logging.getLogger(__name__)

BCE_CLAMP = 1e-7
SIGMOID_CLIP = 1e-15
NORMALIZATION_TOLERANCE = 1e-6

BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """n-dimensional float64 array with an optional gradient buffer."""

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> 'Tensor':
        # op outputs own their array already, skip the copy
        tensor = cls.__new__(cls)
        tensor.data = np.asarray(data, dtype=np.float64)
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.name = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _sample_weights(weights, batch: int) -> np.ndarray:
    if weights is None:
        return np.ones(batch)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (batch,):
        raise DimensionError(f"sample weights of shape {weights.shape} do not match batch of {batch}")
    if np.any(weights < 0):
        raise ParameterError("sample weights must be nonnegative")
    return weights


def _check_batch(tensor: Tensor, what: str) -> Tuple[int, int]:
    if tensor.data.ndim != 2:
        raise DimensionError(f"{what} must be batch x classes, got shape {tensor.shape}")
    batch, classes = tensor.shape
    if batch == 0:
        raise DimensionError(f"{what} has an empty batch")
    return batch, classes


class Graph:
    """
    Tape of the operations of one forward pass.

    A graph is single use: backward() may run once, after which a new Graph
    is needed for the next forward pass. With record=False nothing is stored,
    which is how evaluation and gamma estimation run.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: List[Node] = []
        self._differentiated = False

    def _emit(self, op: str, inputs: Sequence[Tensor], data: np.ndarray, backward: BackwardRule) -> Tensor:
        requires_grad = self.record and any(t.requires_grad for t in inputs)
        out = Tensor._wrap(data, requires_grad)
        if requires_grad:
            if self._differentiated:
                raise GraphError("graph was already differentiated; start a new Graph for the next forward pass")
            self.nodes.append(Node(op, tuple(inputs), out, backward))
        return out

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(tensor) into the grad buffer of every tensor that requires it."""
        if self._differentiated:
            raise GraphError("backward already ran on this graph")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires a gradient")
        self._differentiated = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            upstream = node.output.grad
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad += grad

    # ------------------------------------------------------------------
    # layers

    def dense(self, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
        """output[b, o] = sum_i x[b, i] * weight[i, o] + bias[o]"""
        if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
            raise DimensionError(f"dense expects 2-D input/weights and 1-D bias, got {x.shape}, {weight.shape}, {bias.shape}")
        if x.shape[1] != weight.shape[0] or bias.shape[0] != weight.shape[1]:
            raise DimensionError(f"dense shapes do not chain: {x.shape} x {weight.shape} + {bias.shape}")
        out = x.data @ weight.data + bias.data

        def backward(grad):
            grad_x = grad @ weight.data.T if x.requires_grad else None
            grad_w = x.data.T @ grad if weight.requires_grad else None
            grad_b = grad.sum(axis=0) if bias.requires_grad else None
            return grad_x, grad_w, grad_b

        return self._emit('dense', (x, weight, bias), out, backward)

    def conv2d(self, x: Tensor, kernels: Tensor, stride: int = 1, bias: Optional[Tensor] = None) -> Tensor:
        """
        Valid (unpadded) cross-correlation.

        Args:
            x: batch x cin x h x w input
            kernels: cout x cin x k x k
            stride: step between windows, at least 1
            bias: optional per-output-channel bias

        Returns:
            Tensor: batch x cout x ((h-k)//stride+1) x ((w-k)//stride+1)
        """
        if x.data.ndim != 4 or kernels.data.ndim != 4:
            raise DimensionError(f"conv2d expects 4-D input and kernels, got {x.shape} and {kernels.shape}")
        if stride < 1:
            raise ParameterError(f"stride must be >= 1, got {stride}")
        n, channels, height, width = x.shape
        out_channels, kernel_channels, kh, kw = kernels.shape
        if kernel_channels != channels:
            raise DimensionError(f"kernels expect {kernel_channels} input channels, input has {channels}")
        if kh != kw:
            raise DimensionError(f"kernels must be square, got {kh}x{kw}")
        if kh > height or kw > width:
            raise DimensionError(f"kernel {kh}x{kw} is larger than input {height}x{width}")
        if bias is not None and bias.shape != (out_channels,):
            raise DimensionError(f"conv bias must have shape ({out_channels},), got {bias.shape}")
        out_h = (height - kh) // stride + 1
        out_w = (width - kw) // stride + 1

        windows = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, channels * kh * kw)
        flat = kernels.data.reshape(out_channels, -1)
        out = (cols @ flat.T).reshape(n, out_h, out_w, out_channels).transpose(0, 3, 1, 2)
        if bias is not None:
            out = out + bias.data[None, :, None, None]
        out = np.ascontiguousarray(out)

        def backward(grad):
            grad_rows = grad.transpose(0, 2, 3, 1).reshape(-1, out_channels)
            grad_k = (grad_rows.T @ cols).reshape(kernels.shape) if kernels.requires_grad else None
            grad_x = None
            if x.requires_grad:
                grad_cols = (grad_rows @ flat).reshape(n, out_h, out_w, channels, kh, kw)
                grad_x = np.zeros_like(x.data)
                for i in range(kh):
                    for j in range(kw):
                        grad_x[:, :, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride] += \
                            grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if bias is None:
                return grad_x, grad_k
            grad_b = grad.sum(axis=(0, 2, 3)) if bias.requires_grad else None
            return grad_x, grad_k, grad_b

        inputs = (x, kernels) if bias is None else (x, kernels, bias)
        return self._emit('conv2d', inputs, out, backward)

    def relu(self, x: Tensor) -> Tensor:
        out = np.maximum(x.data, 0.0)

        def backward(grad):
            # subgradient at exactly 0 is 0
            return (grad * (x.data > 0),)

        return self._emit('relu', (x,), out, backward)

    def max_pool2d(self, x: Tensor, window: int) -> Tensor:
        """Non-overlapping max pooling, stride equal to window."""
        if x.data.ndim != 4:
            raise DimensionError(f"max_pool2d expects a 4-D input, got {x.shape}")
        if window < 1:
            raise ParameterError(f"pooling window must be >= 1, got {window}")
        n, channels, height, width = x.shape
        if height % window or width % window:
            raise DimensionError(f"pooling window {window} does not divide spatial size {height}x{width}")
        out_h, out_w = height // window, width // window
        blocks = (x.data.reshape(n, channels, out_h, window, out_w, window)
                  .transpose(0, 1, 2, 4, 3, 5)
                  .reshape(n, channels, out_h, out_w, window * window))
        winner = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]

        def backward(grad):
            grad_blocks = np.zeros_like(blocks)
            np.put_along_axis(grad_blocks, winner[..., None], grad[..., None], axis=-1)
            grad_x = (grad_blocks.reshape(n, channels, out_h, out_w, window, window)
                      .transpose(0, 1, 2, 4, 3, 5)
                      .reshape(n, channels, height, width))
            return (grad_x,)

        return self._emit('max_pool2d', (x,), out, backward)

    def global_avg_pool(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4:
            raise DimensionError(f"global_avg_pool expects a 4-D input, got {x.shape}")
        area = x.shape[2] * x.shape[3]
        out = x.data.mean(axis=(2, 3))

        def backward(grad):
            return (np.broadcast_to(grad[:, :, None, None] / area, x.shape).copy(),)

        return self._emit('global_avg_pool', (x,), out, backward)

    # ------------------------------------------------------------------
    # elementwise and reductions

    def softmax(self, logits: Tensor) -> Tensor:
        _check_batch(logits, 'logits')
        probs = _softmax(logits.data, axis=1)

        def backward(grad):
            return (probs * (grad - np.sum(grad * probs, axis=1, keepdims=True)),)

        return self._emit('softmax', (logits,), probs, backward)

    def sigmoid(self, x: Tensor) -> Tensor:
        out = np.clip(expit(x.data), SIGMOID_CLIP, 1.0 - SIGMOID_CLIP)

        def backward(grad):
            return (grad * out * (1.0 - out),)

        return self._emit('sigmoid', (x,), out, backward)

    def gradient_reversal(self, x: Tensor, lam: float) -> Tensor:
        """Identity forward; backward multiplies the incoming gradient by -lam."""
        if lam < 0:
            raise ParameterError(f"gradient reversal coefficient must be >= 0, got {lam}")
        out = x.data.copy()

        def backward(grad):
            return (-lam * grad,)

        return self._emit('gradient_reversal', (x,), out, backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        if a.shape != b.shape:
            raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")

        def backward(grad):
            return grad, grad

        return self._emit('add', (a, b), a.data + b.data, backward)

    def multiply(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise DimensionError(f"multiply needs equal shapes, got {a.shape} and {b.shape}")

        def backward(grad):
            return grad * b.data, grad * a.data

        return self._emit('multiply', (a, b), a.data * b.data, backward)

    def scale(self, x: Tensor, factor: float) -> Tensor:
        factor = float(factor)

        def backward(grad):
            return (factor * grad,)

        return self._emit('scale', (x,), factor * x.data, backward)

    def sum(self, x: Tensor) -> Tensor:
        def backward(grad):
            return (np.full(x.shape, float(grad)),)

        return self._emit('sum', (x,), np.array(x.data.sum()), backward)

    # ------------------------------------------------------------------
    # losses (batch means, natural logarithm)

    def softmax_cross_entropy(self, logits: Tensor, labels, weights=None) -> Tensor:
        """
        Mean over the batch of w_i * -log softmax(logits_i)[label_i].

        Weights are constants; without them every row counts 1.
        """
        batch, classes = _check_batch(logits, 'logits')
        labels = np.asarray(labels)
        if labels.shape != (batch,):
            raise DimensionError(f"expected {batch} labels, got shape {labels.shape}")
        labels = labels.astype(np.int64)
        if np.any(labels < 0) or np.any(labels >= classes):
            raise LabelIndexError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
        if not np.all(np.isfinite(logits.data)):
            raise ContractError("logits contain non-finite values")
        w = _sample_weights(weights, batch)
        log_probs = log_softmax(logits.data, axis=1)
        rows = np.arange(batch)
        per_sample = -log_probs[rows, labels]
        value = np.sum(w * per_sample) / batch

        def backward(grad):
            delta = np.exp(log_probs)
            delta[rows, labels] -= 1.0
            return (float(grad) * (w / batch)[:, None] * delta,)

        return self._emit('softmax_cross_entropy', (logits,), np.array(value), backward)

    def entropy_loss(self, probabilities: Tensor, weights=None, class_weights=None) -> Tensor:
        """
        Mean over the batch of -sum_l c_l p_l ln p_l with 0 ln 0 = 0.

        Args:
            probabilities: batch x C rows, each nonnegative and summing to 1
            weights: optional per-row constants
            class_weights: optional per-class constants c_l (default all ones)
        """
        batch, classes = _check_batch(probabilities, 'probabilities')
        p = probabilities.data
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > NORMALIZATION_TOLERANCE):
            raise ContractError("entropy input rows must be nonnegative and sum to 1")
        w = _sample_weights(weights, batch)
        c = np.ones(classes) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
        if c.shape != (classes,):
            raise DimensionError(f"class weights of shape {c.shape} do not match {classes} classes")
        p_log_p = p * np.log(np.where(p > 0, p, 1.0))
        per_sample = -np.sum(p_log_p * c, axis=1)
        value = np.sum(w * per_sample) / batch

        def backward(grad):
            log_p = np.log(np.maximum(p, np.finfo(np.float64).tiny))
            return (float(grad) * (w / batch)[:, None] * -(c * (log_p + 1.0)),)

        return self._emit('entropy_loss', (probabilities,), np.array(value), backward)

    def binary_cross_entropy(self, prob: Tensor, domain_labels, weights=None) -> Tensor:
        """Mean of -[d ln p + (1-d) ln(1-p)] with p clamped to [1e-7, 1-1e-7]."""
        if prob.data.ndim != 2 or prob.shape[1] != 1:
            raise DimensionError(f"binary_cross_entropy expects batch x 1 probabilities, got {prob.shape}")
        batch = prob.shape[0]
        if batch == 0:
            raise DimensionError("probabilities have an empty batch")
        d = np.asarray(domain_labels, dtype=np.float64)
        if d.shape != (batch,):
            raise DimensionError(f"expected {batch} domain labels, got shape {d.shape}")
        if np.any((d != 0.0) & (d != 1.0)):
            raise LabelIndexError("domain labels must be 0 or 1")
        w = _sample_weights(weights, batch)
        p = prob.data[:, 0]
        clamped = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
        per_sample = -(d * np.log(clamped) + (1.0 - d) * np.log(1.0 - clamped))
        value = np.sum(w * per_sample) / batch

        def backward(grad):
            inside = (p >= BCE_CLAMP) & (p <= 1.0 - BCE_CLAMP)
            slope = (-d / clamped + (1.0 - d) / (1.0 - clamped)) * inside
            return ((float(grad) * (w / batch) * slope)[:, None],)

        return self._emit('binary_cross_entropy', (prob,), np.array(value), backward)


@dataclass
class SgdState:
    """SGD hyperparameters plus one velocity buffer per parameter name."""
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ParameterError(f"learning rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ParameterError(f"weight decay must be >= 0, got {self.weight_decay}")


def sgd_step(params: Dict[str, Union[Tensor, np.ndarray]], grads: Dict[str, np.ndarray],
             state: SgdState) -> Dict[str, Union[Tensor, np.ndarray]]:
    """
    One momentum SGD update, in place.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v
    """
    for name, param in params.items():
        values = param.data if isinstance(param, Tensor) else param
        if name not in grads:
            raise DimensionError(f"no gradient supplied for parameter {name!r}")
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != values.shape:
            raise DimensionError(f"gradient for {name!r} has shape {grad.shape}, parameter has {values.shape}")
        velocity = state.velocity.get(name)
        if velocity is None:
            velocity = np.zeros_like(values)
        elif velocity.shape != values.shape:
            raise DimensionError(f"velocity for {name!r} has shape {velocity.shape}, parameter has {values.shape}")
        velocity = state.momentum * velocity + grad + state.weight_decay * values
        state.velocity[name] = velocity
        values -= state.learning_rate * velocity
    return params
