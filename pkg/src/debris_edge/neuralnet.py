"""Small dense/convolutional network engine with explicit backpropagation.

Plain numpy arrays (row-major, 32-bit floats by default) carry all
network math.  Layers are fixed-function: conv, relu, maxpool, flatten,
dense, softmax.  Training offers SGD (optional momentum) and Adam with
bias correction, seeded shuffling, periodic evaluation, early stopping,
and a divergence signal carrying the iteration index.

Weight files use the "WDN1" container: magic, input shape, layer count,
then per layer a kind tag, its fixed config words, and each parameter
array as dims + little-endian float32 payload.  A round trip reproduces
forward outputs bit for bit.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import Image, pnm_load, resize_bilinear, to_grayscale

DEFAULT_EVAL_INTERVAL = 100


# --- layer specs ---------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    filters: int
    kernel: int
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.filters < 1 or self.kernel < 1 or self.stride < 1:
            raise ValueError("conv filters, kernel, and stride must be >= 1")
        if self.padding not in ("same", "valid"):
            raise ValueError("padding must be 'same' or 'valid'")


@dataclass(frozen=True)
class ReluSpec:
    pass


@dataclass(frozen=True)
class MaxPoolSpec:
    pool: int = 2

    def __post_init__(self):
        if self.pool < 2:
            raise ValueError("pool size must be >= 2")


@dataclass(frozen=True)
class FlattenSpec:
    pass


@dataclass(frozen=True)
class DenseSpec:
    units: int

    def __post_init__(self):
        if self.units < 1:
            raise ValueError("dense units must be >= 1")


@dataclass(frozen=True)
class SoftmaxSpec:
    pass


def conv(filters: int, kernel: int, stride: int = 1, padding: str = "same") -> ConvSpec:
    return ConvSpec(filters, kernel, stride, padding)


def relu() -> ReluSpec:
    return ReluSpec()


def maxpool(pool: int = 2) -> MaxPoolSpec:
    return MaxPoolSpec(pool)


def flatten() -> FlattenSpec:
    return FlattenSpec()


def dense(units: int) -> DenseSpec:
    return DenseSpec(units)


def softmax() -> SoftmaxSpec:
    return SoftmaxSpec()


LayerSpec = ConvSpec | ReluSpec | MaxPoolSpec | FlattenSpec | DenseSpec | SoftmaxSpec


@dataclass(frozen=True)
class NetworkSpec:
    """Input shape (h, w, c) or (features,) plus an ordered layer list."""

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        shape = tuple(int(s) for s in self.input_shape)
        if len(shape) not in (1, 3) or any(s < 1 for s in shape):
            raise ValueError("input shape must be (features,) or (h, w, c)")
        layers = tuple(self.layers)
        if not layers or not isinstance(layers[-1], SoftmaxSpec):
            raise ValueError("the final layer must be softmax")
        if sum(isinstance(l, SoftmaxSpec) for l in layers) != 1:
            raise ValueError("exactly one softmax layer, at the end")
        object.__setattr__(self, "input_shape", shape)
        object.__setattr__(self, "layers", layers)
        self.chain_shapes()  # raises on inconsistent wiring

    def chain_shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes; raises if the chain is inconsistent."""
        shapes = [self.input_shape]
        cur = self.input_shape
        for spec in self.layers:
            if isinstance(spec, ConvSpec):
                if len(cur) != 3:
                    raise ValueError("conv requires a 3-D (h, w, c) input")
                h, w, _ = cur
                if spec.padding == "same":
                    oh = -(-h // spec.stride)
                    ow = -(-w // spec.stride)
                else:
                    if h < spec.kernel or w < spec.kernel:
                        raise ValueError("kernel larger than input")
                    oh = (h - spec.kernel) // spec.stride + 1
                    ow = (w - spec.kernel) // spec.stride + 1
                cur = (oh, ow, spec.filters)
            elif isinstance(spec, MaxPoolSpec):
                if len(cur) != 3:
                    raise ValueError("maxpool requires a 3-D input")
                h, w, c = cur
                if h % spec.pool or w % spec.pool:
                    raise ValueError("pool size must divide the feature map")
                cur = (h // spec.pool, w // spec.pool, c)
            elif isinstance(spec, FlattenSpec):
                cur = (int(np.prod(cur)),)
            elif isinstance(spec, DenseSpec):
                if len(cur) != 1:
                    raise ValueError("dense requires a flat input")
                cur = (spec.units,)
            elif isinstance(spec, (ReluSpec, SoftmaxSpec)):
                if isinstance(spec, SoftmaxSpec) and len(cur) != 1:
                    raise ValueError("softmax requires a flat input")
            shapes.append(cur)
        return shapes

    @property
    def num_classes(self) -> int:
        return self.chain_shapes()[-1][0]


def default_network_spec(classes: int, input_size: int = 64) -> NetworkSpec:
    """Conv stem plus the 500/250/100 dense head.

    The stem pools aggressively (4x twice): debris class evidence is
    distributed texture, and the small flattened map keeps the dense
    head from memorizing object positions on desk-scale corpora.
    """
    return NetworkSpec(
        (input_size, input_size, 1),
        (
            conv(8, 3, 1, "same"),
            relu(),
            maxpool(4),
            conv(16, 3, 1, "same"),
            relu(),
            maxpool(4),
            flatten(),
            dense(500),
            relu(),
            dense(250),
            relu(),
            dense(100),
            relu(),
            dense(classes),
            softmax(),
        ),
    )


# --- optimizer / dataset / history ----------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    kind: str  # "sgd" or "adam"
    learning_rate: float
    max_iters: int
    seed: int
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    eval_interval: int = DEFAULT_EVAL_INTERVAL
    early_stop_patience: int = 5  # evals; 0 disables

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError("kind must be 'sgd' or 'adam'")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.momentum < 0:
            raise ValueError("momentum must be >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.batch_size < 1 or self.max_iters < 1 or self.eval_interval < 1:
            raise ValueError("batch_size, max_iters, eval_interval must be >= 1")
        if self.early_stop_patience < 0 or self.seed < 0:
            raise ValueError("patience and seed must be non-negative")


@dataclass(frozen=True)
class Dataset:
    """(image source, label) pairs; sources may be paths, arrays, or Image."""

    items: tuple
    class_names: tuple[str, ...]

    def __post_init__(self):
        items = tuple((src, int(lab)) for src, lab in self.items)
        names = tuple(self.class_names)
        if not names or len(set(names)) != len(names):
            raise ValueError("class names must be non-empty and unique")
        for _, lab in items:
            if not 0 <= lab < len(names):
                raise ValueError("label outside class range")
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "class_names", names)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def labels(self) -> np.ndarray:
        return np.array([lab for _, lab in self.items], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return Dataset(tuple(self.items[i] for i in indices), self.class_names)


def _load_source(src) -> Image:
    if isinstance(src, Image):
        return src
    if isinstance(src, np.ndarray):
        return Image(src)
    if isinstance(src, (str, Path)):
        return pnm_load(src)
    raise TypeError(f"unsupported image source {type(src).__name__}")


def dataset_to_arrays(data: Dataset, input_shape: tuple[int, ...], dtype=np.float32):
    """Stack the dataset as ((n,) + input_shape floats in [0, 1], labels)."""
    if len(input_shape) == 1:
        raise ValueError("flat input shapes need pre-vectorized data")
    h, w, c = input_shape
    out = np.empty((len(data), h, w, c), dtype=dtype)
    for i, (src, _) in enumerate(data.items):
        img = _load_source(src)
        if c == 1 and img.channels == 3:
            img = to_grayscale(img)
        elif c == 3 and img.channels == 1:
            img = Image(np.repeat(img.pixels, 3, axis=2))
        if (img.height, img.width) != (h, w):
            img = resize_bilinear(img, w, h)
        out[i] = img.pixels.astype(dtype) / 255.0
    return out, data.labels


@dataclass(frozen=True)
class EvalRecord:
    iteration: int
    train_loss: float
    test_loss: float
    train_acc: float
    test_acc: float


@dataclass
class TrainHistory:
    records: list[EvalRecord] = field(default_factory=list)
    wall_time_ms: float = 0.0

    def append(self, rec: EvalRecord):
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("iterations must be strictly increasing")
        self.records.append(rec)

    @property
    def final(self) -> EvalRecord:
        if not self.records:
            raise ValueError("empty history")
        return self.records[-1]


def history_to_csv(history: TrainHistory) -> str:
    lines = ["iteration,train_loss,test_loss,train_acc,test_acc"]
    for r in history.records:
        lines.append(
            f"{r.iteration},{r.train_loss:.6f},{r.test_loss:.6f},"
            f"{r.train_acc:.6f},{r.test_acc:.6f}"
        )
    return "\n".join(lines) + "\n"


class DivergenceError(RuntimeError):
    """Raised when the training loss leaves the finite range."""

    def __init__(self, iteration: int, history: TrainHistory):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.history = history


@dataclass(frozen=True)
class InferenceSettings:
    dynamic_batch_enabled: bool = True
    max_batch: int = 32

    def __post_init__(self):
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")


# --- runtime layers --------------------------------------------------------------

class _Layer:
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x):  # pragma: no cover - interface
        raise NotImplementedError

    def backward(self, dout):  # pragma: no cover - interface
        raise NotImplementedError


class _Conv(_Layer):
    def __init__(self, spec: ConvSpec, in_shape, rng, dtype):
        super().__init__()
        self.spec = spec
        h, w, c = in_shape
        k, s = spec.kernel, spec.stride
        if spec.padding == "same":
            self.oh = -(-h // s)
            self.ow = -(-w // s)
            ph = max((self.oh - 1) * s + k - h, 0)
            pw = max((self.ow - 1) * s + k - w, 0)
            self.pad = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
        else:
            self.oh = (h - k) // s + 1
            self.ow = (w - k) // s + 1
            self.pad = (0, 0, 0, 0)
        limit = np.sqrt(6.0 / (k * k * c))
        self.params["w"] = rng.uniform(-limit, limit, size=(k, k, c, spec.filters)).astype(dtype)
        self.params["b"] = np.zeros(spec.filters, dtype=dtype)
        self._xp = None

    def forward(self, x):
        k, s = self.spec.kernel, self.spec.stride
        pt, pb, pl, pr = self.pad
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        n = x.shape[0]
        f = self.spec.filters
        out = np.broadcast_to(self.params["b"], (n, self.oh, self.ow, f)).copy()
        w = self.params["w"]
        for i in range(k):
            for j in range(k):
                patch = xp[:, i : i + (self.oh - 1) * s + 1 : s, j : j + (self.ow - 1) * s + 1 : s, :]
                out += (patch.reshape(-1, patch.shape[-1]) @ w[i, j]).reshape(n, self.oh, self.ow, f)
        self._xp = xp
        self._in_shape = x.shape
        return out

    def backward(self, dout):
        k, s = self.spec.kernel, self.spec.stride
        xp = self._xp
        n = dout.shape[0]
        f = self.spec.filters
        dmat = dout.reshape(-1, f)
        self.grads["b"] = dout.sum(axis=(0, 1, 2))
        dw = np.empty_like(self.params["w"])
        dxp = np.zeros_like(xp)
        w = self.params["w"]
        for i in range(k):
            for j in range(k):
                rows = slice(i, i + (self.oh - 1) * s + 1, s)
                cols = slice(j, j + (self.ow - 1) * s + 1, s)
                patch = xp[:, rows, cols, :]
                c = patch.shape[-1]
                dw[i, j] = patch.reshape(-1, c).T @ dmat
                dxp[:, rows, cols, :] += (dmat @ w[i, j].T).reshape(n, self.oh, self.ow, c)
        self.grads["w"] = dw
        pt, pb, pl, pr = self.pad
        h, wd = self._in_shape[1], self._in_shape[2]
        return dxp[:, pt : pt + h, pl : pl + wd, :]


class _Relu(_Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class _MaxPool(_Layer):
    def __init__(self, spec: MaxPoolSpec):
        super().__init__()
        self.p = spec.pool

    def forward(self, x):
        n, h, w, c = x.shape
        p = self.p
        oh, ow = h // p, w // p
        xr = x.reshape(n, oh, p, ow, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, oh, ow, p * p, c)
        self._idx = xr.argmax(axis=3)  # first max wins: deterministic routing
        self._shape = x.shape
        return xr.max(axis=3)

    def backward(self, dout):
        n, h, w, c = self._shape
        p = self.p
        oh, ow = h // p, w // p
        dxr = np.zeros((n, oh, ow, p * p, c), dtype=dout.dtype)
        np.put_along_axis(dxr, self._idx[:, :, :, None, :], dout[:, :, :, None, :], axis=3)
        return dxr.reshape(n, oh, ow, p, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, c)


class _Flatten(_Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class _Dense(_Layer):
    def __init__(self, spec: DenseSpec, in_dim: int, rng, dtype):
        super().__init__()
        limit = np.sqrt(6.0 / in_dim)
        self.params["w"] = rng.uniform(-limit, limit, size=(in_dim, spec.units)).astype(dtype)
        self.params["b"] = np.zeros(spec.units, dtype=dtype)

    def forward(self, x):
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dout):
        self.grads["w"] = self._x.T @ dout
        self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["w"].T


class _Softmax(_Layer):
    def forward(self, x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        self.probs = e / e.sum(axis=1, keepdims=True)
        self._z = z
        return self.probs

    def log_loss(self, labels: np.ndarray) -> float:
        """Mean cross-entropy from the shifted logits (logsumexp form)."""
        with np.errstate(over="ignore", invalid="ignore"):
            z = self._z.astype(np.float64)
            lse = np.log(np.exp(z).sum(axis=1))
            return float(np.mean(lse - z[np.arange(len(labels)), labels]))


_KIND_IDS = {"conv": 1, "relu": 2, "maxpool": 3, "flatten": 4, "dense": 5, "softmax": 6}
_SPEC_KINDS = {
    ConvSpec: "conv",
    ReluSpec: "relu",
    MaxPoolSpec: "maxpool",
    FlattenSpec: "flatten",
    DenseSpec: "dense",
    SoftmaxSpec: "softmax",
}


class Network:
    """A built network: immutable topology, mutable parameters."""

    def __init__(self, spec: NetworkSpec, seed: int, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        shapes = spec.chain_shapes()
        rng = np.random.default_rng(seed)
        self.layers: list[_Layer] = []
        for layer_spec, in_shape in zip(spec.layers, shapes[:-1]):
            if isinstance(layer_spec, ConvSpec):
                self.layers.append(_Conv(layer_spec, in_shape, rng, self.dtype))
            elif isinstance(layer_spec, ReluSpec):
                self.layers.append(_Relu())
            elif isinstance(layer_spec, MaxPoolSpec):
                self.layers.append(_MaxPool(layer_spec))
            elif isinstance(layer_spec, FlattenSpec):
                self.layers.append(_Flatten())
            elif isinstance(layer_spec, DenseSpec):
                self.layers.append(_Dense(layer_spec, in_shape[0], rng, self.dtype))
            elif isinstance(layer_spec, SoftmaxSpec):
                self.layers.append(_Softmax())

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def parameters(self):
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield i, name, layer.params[name]

    @property
    def parameter_count(self) -> int:
        return sum(p.size for _, _, p in self.parameters())

    def _forward(self, x: np.ndarray) -> np.ndarray:
        expected = (x.shape[0],) + self.spec.input_shape
        if x.shape != expected:
            raise ValueError(f"batch shape {x.shape} does not match {expected}")
        out = np.ascontiguousarray(x, dtype=self.dtype)
        # overflow surfaces as inf/nan and is caught by finiteness checks
        with np.errstate(over="ignore", invalid="ignore"):
            for layer in self.layers:
                out = layer.forward(out)
        return out

    def loss_and_grad(self, x: np.ndarray, labels: np.ndarray):
        """Forward, mean cross-entropy, then backprop into layer grads."""
        probs = self._forward(x)
        head: _Softmax = self.layers[-1]
        with np.errstate(over="ignore", invalid="ignore"):
            loss = head.log_loss(labels)
            n, k = probs.shape
            dz = probs.copy()
            dz[np.arange(n), labels] -= 1.0
            dz /= n
            grad = dz.astype(self.dtype)
            for layer in reversed(self.layers[:-1]):
                grad = layer.backward(grad)
        return loss, probs


def build_network(spec: NetworkSpec, seed: int, dtype=np.float32) -> Network:
    """He-uniform weights, zero biases, all draws from one seeded generator."""
    return Network(spec, seed, dtype)


def forward(net: Network, batch: np.ndarray) -> np.ndarray:
    """Class-probability rows; each sums to 1 within 1e-6."""
    return net._forward(np.asarray(batch))


def predict_batch(net: Network, batch: np.ndarray, settings: InferenceSettings) -> np.ndarray:
    """Forward pass under the dynamic-batching contract."""
    batch = np.asarray(batch)
    n = batch.shape[0]
    if n < 1:
        raise ValueError("batch must contain at least one sample")
    if settings.dynamic_batch_enabled:
        if n > settings.max_batch:
            raise ValueError(f"batch of {n} exceeds max_batch {settings.max_batch}")
    elif n != settings.max_batch:
        raise ValueError(f"static batching requires exactly {settings.max_batch} samples")
    return net._forward(batch)


def _forward_chunked(net: Network, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    outs = [net._forward(x[i : i + chunk]) for i in range(0, len(x), chunk)]
    return np.concatenate(outs, axis=0)


def _evaluate(net: Network, x: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    probs = _forward_chunked(net, x)
    head: _Softmax = net.layers[-1]
    # recompute loss over chunks for the full set
    total = 0.0
    for i in range(0, len(x), 256):
        net._forward(x[i : i + 256])
        total += head.log_loss(labels[i : i + 256]) * len(labels[i : i + 256])
    acc = float(np.mean(probs.argmax(axis=1) == labels))
    return total / len(x), acc


# --- splitting -------------------------------------------------------------------

def split_dataset(data: Dataset, train_ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then prefix split with train size round(ratio * n)."""
    if not 0 < train_ratio < 1:
        raise ValueError("train_ratio must lie in (0, 1)")
    n = len(data)
    if n == 0:
        raise ValueError("empty dataset")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(train_ratio * n + 0.5))
    return data.subset(order[:n_train]), data.subset(order[n_train:])


def kfold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle into k folds with sizes differing by at most one."""
    if not 2 <= k <= n:
        raise ValueError("need 2 <= k <= n")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(order, k)]


# --- training ---------------------------------------------------------------------

def _init_opt_state(net: Network, opt: OptimizerConfig) -> dict:
    state = {}
    for i, name, p in net.parameters():
        if opt.kind == "sgd":
            state[(i, name)] = {"v": np.zeros_like(p)}
        else:
            state[(i, name)] = {"m": np.zeros_like(p), "v": np.zeros_like(p)}
    return state


@np.errstate(over="ignore", invalid="ignore")
def _apply_update(net: Network, opt: OptimizerConfig, state: dict, step: int):
    lr = net.dtype.type(opt.learning_rate)
    for i, name, p in net.parameters():
        g = net.layers[i].grads[name]
        s = state[(i, name)]
        if opt.kind == "sgd":
            s["v"] = opt.momentum * s["v"] + g
            p -= lr * s["v"]
        else:
            s["m"] = opt.beta1 * s["m"] + (1 - opt.beta1) * g
            s["v"] = opt.beta2 * s["v"] + (1 - opt.beta2) * g * g
            mhat = s["m"] / (1 - opt.beta1**step)
            vhat = s["v"] / (1 - opt.beta2**step)
            p -= lr * mhat / (np.sqrt(vhat) + opt.epsilon)


def _check_class_coverage(train_labels: np.ndarray, all_labels: np.ndarray):
    missing = set(np.unique(all_labels)) - set(np.unique(train_labels))
    if missing:
        raise ValueError(f"classes {sorted(missing)} have no training samples")


def train(net: Network, data: Dataset, opt: OptimizerConfig, split) -> TrainHistory:
    """Mini-batch training with periodic evaluation and early stopping.

    `split` is either a train ratio in (0, 1) (the dataset is shuffled
    with the optimizer seed and prefix-split) or an explicit
    (train Dataset, test Dataset) pair.
    """
    if isinstance(split, (int, float)):
        train_ds, test_ds = split_dataset(data, float(split), opt.seed)
    else:
        train_ds, test_ds = split
    if len(train_ds) == 0 or len(test_ds) == 0:
        raise ValueError("both split portions must be non-empty")

    x_train, y_train = dataset_to_arrays(train_ds, net.spec.input_shape, net.dtype)
    x_test, y_test = dataset_to_arrays(test_ds, net.spec.input_shape, net.dtype)
    _check_class_coverage(y_train, np.concatenate([y_train, y_test]))

    rng = np.random.default_rng(opt.seed)
    n = len(x_train)
    bs = min(opt.batch_size, n)
    order = rng.permutation(n)
    cursor = 0

    state = _init_opt_state(net, opt)
    history = TrainHistory()
    best = np.inf
    stale = 0
    t0 = time.perf_counter()
    for step in range(1, opt.max_iters + 1):
        if cursor + bs > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + bs]
        cursor += bs
        loss, _ = net.loss_and_grad(x_train[idx], y_train[idx])
        if not np.isfinite(loss):
            history.wall_time_ms = (time.perf_counter() - t0) * 1000.0
            raise DivergenceError(step, history)
        _apply_update(net, opt, state, step)

        if step % opt.eval_interval == 0 or step == opt.max_iters:
            train_loss, train_acc = _evaluate(net, x_train, y_train)
            test_loss, test_acc = _evaluate(net, x_test, y_test)
            if not (np.isfinite(train_loss) and np.isfinite(test_loss)):
                history.wall_time_ms = (time.perf_counter() - t0) * 1000.0
                raise DivergenceError(step, history)
            history.append(EvalRecord(step, train_loss, test_loss, train_acc, test_acc))
            if test_loss < best:
                best = test_loss
                stale = 0
            else:
                stale += 1
                if opt.early_stop_patience and stale >= opt.early_stop_patience:
                    break
    history.wall_time_ms = (time.perf_counter() - t0) * 1000.0
    return history


@dataclass(frozen=True)
class KFoldResult:
    fold_losses: tuple[float, ...]
    fold_accuracies: tuple[float, ...]
    mean_loss: float
    sd_loss: float
    mean_accuracy: float
    sd_accuracy: float


def kfold_evaluate(spec: NetworkSpec, data: Dataset, opt: OptimizerConfig, k: int) -> KFoldResult:
    """k rotations of train/test; aggregate mean and sample SD.

    Every fold rebuilds the network from the same seed so folds differ
    only in their data split.
    """
    folds = kfold_indices(len(data), k, seed=int(np.random.SeedSequence([opt.seed, 0xF01D]).generate_state(1)[0]))
    losses, accs = [], []
    all_idx = np.arange(len(data))
    for fold in folds:
        mask = np.ones(len(data), dtype=bool)
        mask[fold] = False
        train_ds = data.subset(all_idx[mask])
        test_ds = data.subset(fold)
        net = build_network(spec, opt.seed)
        history = train(net, data, opt, (train_ds, test_ds))
        losses.append(history.final.test_loss)
        accs.append(history.final.test_acc)
    larr = np.array(losses)
    aarr = np.array(accs)
    return KFoldResult(
        tuple(losses),
        tuple(accs),
        float(larr.mean()),
        float(larr.std(ddof=1)),
        float(aarr.mean()),
        float(aarr.std(ddof=1)),
    )


def gradient_check(net: Network, batch: np.ndarray, labels: np.ndarray) -> float:
    """Central finite differences vs backprop; returns the max relative error.

    Backprop gradients come from the network in its own dtype.  The
    difference quotients are evaluated on a 64-bit copy of the same
    parameter values so the reference is not drowned by 32-bit forward
    noise (the "32-bit-safe" scaling of the h = 1e-3 step).
    """
    batch = np.asarray(batch, dtype=net.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    net.loss_and_grad(batch, labels)
    analytic = {
        (i, name): net.layers[i].grads[name].copy() for i, name, _ in net.parameters()
    }
    ref = Network(net.spec, seed=0, dtype=np.float64)
    for i, name, p in net.parameters():
        ref.layers[i].params[name] = p.astype(np.float64)
    batch64 = batch.astype(np.float64)
    h = 1e-3
    worst = 0.0
    for i, name, p in ref.parameters():
        flat = p.reshape(-1)
        ga = analytic[(i, name)].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lp = _loss_only(ref, batch64, labels)
            flat[j] = orig - h
            lm = _loss_only(ref, batch64, labels)
            flat[j] = orig
            gn = (lp - lm) / (2 * h)
            denom = max(abs(float(ga[j])), abs(gn), 1e-8)
            worst = max(worst, abs(float(ga[j]) - gn) / denom)
    return worst


def _loss_only(net: Network, x: np.ndarray, labels: np.ndarray) -> float:
    net._forward(x)
    head: _Softmax = net.layers[-1]
    return head.log_loss(labels)


# --- weight serialization -----------------------------------------------------------

_MAGIC = b"WDN1"


def save_weights(net: Network) -> bytes:
    """Serialize to the WDN1 container (little-endian float32 payloads)."""
    out = bytearray(_MAGIC)
    shape = net.spec.input_shape
    out += struct.pack("<B", len(shape))
    out += struct.pack(f"<{len(shape)}I", *shape)
    out += struct.pack("<I", len(net.spec.layers))
    for spec, layer in zip(net.spec.layers, net.layers):
        kind = _SPEC_KINDS[type(spec)]
        out += struct.pack("<B", _KIND_IDS[kind])
        if isinstance(spec, ConvSpec):
            pad_code = 0 if spec.padding == "same" else 1
            out += struct.pack("<4I", spec.filters, spec.kernel, spec.stride, pad_code)
        elif isinstance(spec, MaxPoolSpec):
            out += struct.pack("<I", spec.pool)
        elif isinstance(spec, DenseSpec):
            out += struct.pack("<I", spec.units)
        names = sorted(layer.params)
        out += struct.pack("<B", len(names))
        for name in names:
            arr = np.ascontiguousarray(layer.params[name], dtype="<f4")
            tag = name.encode("ascii")
            out += struct.pack("<B", len(tag)) + tag
            out += struct.pack("<B", arr.ndim)
            out += struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += arr.tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.blob):
            raise ValueError("truncated weight data")
        vals = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += size
        return vals

    def raw(self, size: int) -> bytes:
        if self.pos + size > len(self.blob):
            raise ValueError("truncated weight data")
        chunk = self.blob[self.pos : self.pos + size]
        self.pos += size
        return chunk


def load_weights(blob: bytes, expected: NetworkSpec | None = None) -> Network:
    """Rebuild a network from WDN1 bytes; optionally verify the topology."""
    r = _Reader(blob)
    if r.raw(4) != _MAGIC:
        raise ValueError("bad magic: not a WDN1 weight file")
    (ndim,) = r.take("<B")
    input_shape = r.take(f"<{ndim}I")
    (n_layers,) = r.take("<I")
    specs: list[LayerSpec] = []
    payloads = []
    id_to_kind = {v: k for k, v in _KIND_IDS.items()}
    for _ in range(n_layers):
        (kind_id,) = r.take("<B")
        kind = id_to_kind.get(kind_id)
        if kind is None:
            raise ValueError(f"unknown layer kind id {kind_id}")
        if kind == "conv":
            f, k, s, pad_code = r.take("<4I")
            specs.append(ConvSpec(f, k, s, "same" if pad_code == 0 else "valid"))
        elif kind == "maxpool":
            specs.append(MaxPoolSpec(*r.take("<I")))
        elif kind == "dense":
            specs.append(DenseSpec(*r.take("<I")))
        elif kind == "relu":
            specs.append(ReluSpec())
        elif kind == "flatten":
            specs.append(FlattenSpec())
        else:
            specs.append(SoftmaxSpec())
        (n_params,) = r.take("<B")
        arrays = {}
        for _ in range(n_params):
            (tag_len,) = r.take("<B")
            name = r.raw(tag_len).decode("ascii")
            (adim,) = r.take("<B")
            shape = r.take(f"<{adim}I")
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(r.raw(count * 4), dtype="<f4").reshape(shape)
            arrays[name] = data
        payloads.append(arrays)
    if r.pos != len(blob):
        raise ValueError("trailing bytes after weight payload")

    spec = NetworkSpec(tuple(input_shape), tuple(specs))
    if expected is not None and spec != expected:
        raise ValueError("weight file topology does not match the expected spec")
    net = Network(spec, seed=0)
    for layer, arrays in zip(net.layers, payloads):
        for name, arr in arrays.items():
            if name not in layer.params or layer.params[name].shape != arr.shape:
                raise ValueError(f"parameter {name!r} shape mismatch")
            layer.params[name] = arr.astype(np.float32).copy()
    return net
