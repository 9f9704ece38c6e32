"""Parameterised building blocks: conv, batch norm, CBR blocks, separable GCN."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


@dataclass(frozen=True)
class LayerRecord:
    """One learnable layer in an architecture description.

    ``group`` identifies the owner of the weights; records that share a
    group are counted once.
    """

    kind: str  # "conv" or "bn"
    kh: int
    kw: int
    cin: int
    cout: int
    group: str

    @property
    def n_params(self) -> int:
        if self.kind == "conv":
            return self.kh * self.kw * self.cin * self.cout
        if self.kind == "bn":
            return 2 * self.cout
        raise ValueError(f"unknown layer kind {self.kind!r}")


class Module:
    """Minimal parameter container.

    Parameters are leaf tensors with ``requires_grad``; buffers are plain
    numpy arrays listed in ``_buffers``. Submodules are discovered from
    attributes (including lists of modules) in definition order.
    """

    training = True
    _buffers: tuple = ()

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def _walk(self, prefix="", seen=None):
        seen = set() if seen is None else seen
        if id(self) in seen:
            return
        seen.add(id(self))
        yield prefix, self
        for name, child in self.children():
            yield from child._walk(f"{prefix}{name}.", seen)

    def named_parameters(self):
        for prefix, mod in self._walk():
            for name, value in vars(mod).items():
                if isinstance(value, Tensor) and value.requires_grad:
                    yield prefix + name, value

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for prefix, mod in self._walk():
            for name in mod._buffers:
                yield prefix + name, getattr(mod, name)

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state):
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {state[name].shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for prefix, mod in self._walk():
            for name in mod._buffers:
                cur = getattr(mod, name)
                setattr(mod, name, np.array(state[prefix + name], dtype=cur.dtype))

    def train(self, mode=True):
        for _, mod in self._walk():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast parameters and buffers in place (float64 for gradcheck)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for _, mod in self._walk():
            for name in mod._buffers:
                setattr(mod, name, getattr(mod, name).astype(dtype))
        return self

    def arch_records(self, prefix="", _memo=None):
        # a module reachable twice keeps its first prefix, so its group is counted once
        memo = {} if _memo is None else _memo
        records = []
        for name, child in self.children():
            child_prefix = memo.setdefault(id(child), f"{prefix}{name}.")
            records.extend(child.arch_records(child_prefix, memo))
        return records

    def n_params(self):
        return sum(p.data.size for p in self.parameters())


class Conv2d(Module):
    """Bias-free convolution with per-side padding (SAME for odd kernels by default)."""

    def __init__(self, cin, cout, kernel=(3, 3), stride=1, padding=None, rng=None, init="he"):
        kh, kw = T._pair(kernel)
        if padding is None:
            padding = ((kh - 1) // 2, (kw - 1) // 2)
        self.stride = T._pair(stride)
        self.padding = T._pair(padding)
        shape = (cout, cin, kh, kw)
        if init == "zeros":
            w = np.zeros(shape, dtype=np.float32)
        else:
            rng = np.random.default_rng() if rng is None else rng
            std = np.sqrt(2.0 / (cin * kh * kw))
            w = (rng.standard_normal(shape) * std).astype(np.float32)
        self.weight = Tensor(w, requires_grad=True)

    @property
    def kernel(self):
        return self.weight.shape[2:]

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.stride, self.padding)

    def arch_records(self, prefix="", _memo=None):
        o, c, kh, kw = self.weight.shape
        return [LayerRecord("conv", kh, kw, c, o, prefix + "weight")]


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum=BN_MOMENTUM, eps=BN_EPS):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x):
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )

    def call_levels(self, xs):
        """Normalise several maps with one joint set of statistics.

        In training mode the maps are flattened and concatenated so that a
        single batch estimate covers every pyramid level.
        """
        if not self.training or len(xs) == 1:
            return [self(x) for x in xs]
        n, c = xs[0].shape[:2]
        flat = [T.reshape(x, (n, c, 1, x.shape[2] * x.shape[3])) for x in xs]
        joint = self(T.concat(flat, axis=3))
        pieces = T.split(joint, [f.shape[3] for f in flat], axis=3)
        return [T.reshape(p, x.shape) for p, x in zip(pieces, xs)]

    def arch_records(self, prefix="", _memo=None):
        c = self.gamma.shape[0]
        return [LayerRecord("bn", 1, 1, c, c, prefix + "affine")]


class CBR(Module):
    """Conv + BN (+ ReLU unless ``relu=False``, which gives a CB block)."""

    def __init__(self, cin, cout, kernel=3, stride=1, relu=True, rng=None):
        self.conv = Conv2d(cin, cout, kernel, stride, rng=rng)
        self.bn = BatchNorm2d(cout)
        self.relu = relu

    def __call__(self, x):
        y = self.bn(self.conv(x))
        return T.relu(y) if self.relu else y

    def call_levels(self, xs):
        ys = self.bn.call_levels([self.conv(x) for x in xs])
        return [T.relu(y) for y in ys] if self.relu else ys


def separable_gcn(x, a1, a2, b1, b2):
    """Sum of a (k x 1 -> 1 x k) branch and a (1 x k -> k x 1) branch.

    Each argument after ``x`` is a conv weight tensor; padding keeps the
    spatial size.
    """
    for w, vertical in ((a1, True), (a2, False), (b1, False), (b2, True)):
        kh, kw = w.shape[2:]
        k = kh if vertical else kw
        if (kw if vertical else kh) != 1 or k % 2 == 0:
            raise ShapeError(f"separable_gcn: expected odd 1-D kernels, got {(kh, kw)}")
    if a2.shape[0] != b2.shape[0]:
        raise ShapeError("separable_gcn: branches produce different channel counts")
    pad_v = lambda w: ((w.shape[2] - 1) // 2, 0)  # noqa: E731
    pad_h = lambda w: (0, (w.shape[3] - 1) // 2)  # noqa: E731
    branch_a = T.conv2d(T.conv2d(x, a1, 1, pad_v(a1)), a2, 1, pad_h(a2))
    branch_b = T.conv2d(T.conv2d(x, b1, 1, pad_h(b1)), b2, 1, pad_v(b2))
    return T.add(branch_a, branch_b)


class SeparableGCN(Module):
    """Global-convolution context block: two summed 1-D separable branches."""

    def __init__(self, cin, mid, cout, kernel=15, rng=None):
        if kernel % 2 == 0:
            raise ShapeError(f"GCN kernel must be odd, got {kernel}")
        self.a1 = Conv2d(cin, mid, (kernel, 1), rng=rng)
        self.a2 = Conv2d(mid, cout, (1, kernel), rng=rng)
        self.b1 = Conv2d(cin, mid, (1, kernel), rng=rng)
        self.b2 = Conv2d(mid, cout, (kernel, 1), rng=rng)

    def __call__(self, x):
        return separable_gcn(x, self.a1.weight, self.a2.weight, self.b1.weight, self.b2.weight)
