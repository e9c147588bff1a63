"""Differentiable numeric core for the trained components.

Dense float64 tensors with reverse-mode gradients, small MLP/attention
networks, MSE and symmetric contrastive losses, and a decoupled
adaptive-moment optimizer with a cosine learning-rate schedule. Everything
is pure-value: networks and optimizer states are immutable, operations
return new objects.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

_MAGIC = b"GWMNET1\x00"
ACTIVATIONS = ("identity", "tanh", "relu", "gelu")


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{op} produced non-finite values")


class Tensor:
    """Node in a reverse-mode computation graph over a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def _make(data: np.ndarray, op: str, parents, backward) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out._parents = tuple(parents)
    out._backward = backward
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def t_const(data) -> Tensor:
    return Tensor(data)


def t_add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))
    return _make(a.data + b.data, "add", (a, b), backward)


def t_sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))
    return _make(a.data - b.data, "sub", (a, b), backward)


def t_mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))
    return _make(a.data * b.data, "mul", (a, b), backward)


def t_scale(a: Tensor, s: float) -> Tensor:
    def backward(g):
        _acc(a, g * s)
    return _make(a.data * s, "scale", (a,), backward)


def t_add_scalar(a: Tensor, s: float) -> Tensor:
    def backward(g):
        _acc(a, g)
    return _make(a.data + s, "add_scalar", (a,), backward)


def t_matmul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        _acc(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        _acc(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))
    return _make(a.data @ b.data, "matmul", (a, b), backward)


def t_tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        _acc(a, g * (1.0 - y * y))
    return _make(y, "tanh", (a,), backward)


def t_relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)

    def backward(g):
        _acc(a, g * (a.data > 0.0))
    return _make(y, "relu", (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def t_gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
        _acc(a, g * dy)
    return _make(y, "gelu", (a,), backward)


def t_pow(a: Tensor, p: float) -> Tensor:
    y = a.data ** p

    def backward(g):
        _acc(a, g * p * a.data ** (p - 1.0))
    return _make(y, "pow", (a,), backward)


def t_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(gg, a.data.shape).copy())
    return _make(y, "sum", (a,), backward)


def t_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return t_scale(t_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def t_reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _acc(a, g.reshape(a.data.shape))
    return _make(a.data.reshape(shape), "reshape", (a,), backward)


def t_swap_last(a: Tensor) -> Tensor:
    def backward(g):
        _acc(a, g.swapaxes(-1, -2))
    return _make(a.data.swapaxes(-1, -2), "swap_last", (a,), backward)


def t_concat(parts, axis: int = -1) -> Tensor:
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, s in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + s)
            _acc(p, g[tuple(sl)])
            offset += s
    return _make(np.concatenate([p.data for p in parts], axis=axis),
                 "concat", tuple(parts), backward)


def t_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _acc(a, (g - dot) * s)
    return _make(s, "softmax", (a,), backward)


def t_logsumexp(a: Tensor, axis: int) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    se = e.sum(axis=axis, keepdims=True)
    y = np.squeeze(m + np.log(se), axis=axis)

    def backward(g):
        _acc(a, np.expand_dims(g, axis) * (e / se))
    return _make(y, "logsumexp", (a,), backward)


def t_diag(a: Tensor) -> Tensor:
    if a.data.ndim != 2 or a.data.shape[0] != a.data.shape[1]:
        raise ValueError(f"diag expects a square matrix, got {a.data.shape}")

    def backward(g):
        gg = np.zeros_like(a.data)
        np.fill_diagonal(gg, g)
        _acc(a, gg)
    return _make(np.diagonal(a.data).copy(), "diag", (a,), backward)


def rms_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    ms = t_mean(t_mul(a, a), axis=-1, keepdims=True)
    return t_mul(a, t_pow(t_add_scalar(ms, eps), -0.5))


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    sq = t_sum(t_mul(a, a), axis=-1, keepdims=True)
    return t_mul(a, t_pow(t_add_scalar(sq, eps), -0.5))


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar loss into every graph leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen = {id(loss)}
    stack: list[tuple[Tensor, object]] = [(loss, iter(loss._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            topo.append(node)
            stack.pop()
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


_ACT_FNS = {"identity": lambda t: t, "tanh": t_tanh, "relu": t_relu, "gelu": t_gelu}


@dataclass(frozen=True)
class NetworkSpec:
    """Shape description of a small feed-forward net with optional
    self-attention blocks acting on a token view of the input."""

    input_dim: int
    hidden_dims: tuple = ()
    output_dim: int = 1
    activation: str = "tanh"
    attention_blocks: int = 0
    attention_tokens: int = 0
    normalize: bool = False

    def layer_dims(self) -> tuple:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    def validate(self) -> None:
        dims = self.layer_dims()
        names = (["input"] + [f"hidden {i + 1}" for i in range(len(self.hidden_dims))]
                 + ["output"])
        for name, d in zip(names, dims):
            if not isinstance(d, (int, np.integer)) or d < 1:
                raise ValueError(f"{name} layer has invalid dim {d}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.attention_blocks < 0:
            raise ValueError("attention_blocks must be >= 0")
        if self.attention_blocks > 0:
            if self.attention_tokens < 1:
                raise ValueError("attention requires attention_tokens >= 1")
            if self.input_dim % self.attention_tokens != 0:
                raise ValueError(
                    f"input dim {self.input_dim} not divisible by "
                    f"{self.attention_tokens} attention tokens")


@dataclass(frozen=True)
class Network:
    spec: NetworkSpec
    params: tuple  # ndarrays in canonical order

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params)


def _param_shapes(spec: NetworkSpec) -> list[tuple]:
    shapes: list[tuple] = []
    if spec.attention_blocks > 0:
        dt = spec.input_dim // spec.attention_tokens
        shapes.append((spec.attention_tokens, dt))  # additive positional vectors
        for _ in range(spec.attention_blocks):
            shapes.extend([(dt, dt)] * 4)  # Wq Wk Wv Wo
    dims = spec.layer_dims()
    for din, dout in zip(dims[:-1], dims[1:]):
        shapes.append((din, dout))
        shapes.append((dout,))
    return shapes


def build_network(spec: NetworkSpec, seed: int) -> Network:
    """Deterministic fan-in-scaled initialization from a seed."""
    spec.validate()
    rng = np.random.default_rng(np.random.PCG64(seed))
    params = []
    for shape in _param_shapes(spec):
        if len(shape) == 1:
            params.append(np.zeros(shape))
        elif shape[0] == spec.attention_tokens and spec.attention_blocks > 0 and not params:
            params.append(rng.normal(0.0, 0.1, shape))
        else:
            params.append(rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape))
    return Network(spec=spec, params=tuple(params))


def _forward_graph(spec: NetworkSpec, params, x: Tensor) -> Tensor:
    act = _ACT_FNS[spec.activation]
    i = 0
    h = x
    if spec.attention_blocks > 0:
        tokens = spec.attention_tokens
        dt = spec.input_dim // tokens
        batch = h.data.shape[0]
        h = t_reshape(h, (batch, tokens, dt))
        h = t_add(h, params[i]); i += 1
        inv = 1.0 / math.sqrt(dt)
        for _ in range(spec.attention_blocks):
            wq, wk, wv, wo = params[i:i + 4]; i += 4
            q = t_matmul(h, wq)
            k = t_matmul(h, wk)
            v = t_matmul(h, wv)
            att = t_softmax(t_scale(t_matmul(q, t_swap_last(k)), inv), axis=-1)
            h = t_add(h, t_matmul(t_matmul(att, v), wo))
            if spec.normalize:
                h = rms_norm(h)
        h = t_reshape(h, (batch, spec.input_dim))
    n_hidden = len(spec.hidden_dims)
    for layer in range(n_hidden + 1):
        w, b = params[i], params[i + 1]; i += 2
        h = t_add(t_matmul(h, w), b)
        if layer < n_hidden:
            h = act(h)
            if spec.normalize:
                h = rms_norm(h)
    return h


def forward_graph(net: Network, param_tensors, x: Tensor) -> Tensor:
    return _forward_graph(net.spec, param_tensors, x)


def forward(net: Network, x) -> np.ndarray:
    """Pure inference pass; accepts [d_in] or [B, d_in]."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim not in (1, 2) or arr.shape[-1] != net.spec.input_dim:
        raise ValueError(
            f"input shape {arr.shape} incompatible with network input dim "
            f"{net.spec.input_dim}")
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    out = _forward_graph(net.spec, [Tensor(p) for p in net.params], Tensor(arr)).data
    return out[0] if single else out


def gradients(net: Network, loss_closure) -> tuple:
    """Per-parameter partial derivatives of a scalar closure.

    The closure receives the parameters as Tensors and must return a scalar
    Tensor built from them.
    """
    ptensors = [Tensor(p, requires_grad=True) for p in net.params]
    loss = loss_closure(ptensors)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("loss closure must return a scalar Tensor")
    if not np.isfinite(loss.data):
        raise ValueError("loss is non-finite")
    backward(loss)
    return tuple(t.grad if t.grad is not None else np.zeros_like(t.data)
                 for t in ptensors)


def loss_mse(pred, target):
    """Mean squared difference; returns a Tensor when fed Tensors."""
    if isinstance(pred, Tensor) or isinstance(target, Tensor):
        p = pred if isinstance(pred, Tensor) else Tensor(pred)
        t = target if isinstance(target, Tensor) else Tensor(target)
        if p.data.shape != t.data.shape:
            raise ValueError(f"shape mismatch {p.data.shape} vs {t.data.shape}")
        d = t_sub(p, t)
        return t_mean(t_mul(d, d))
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return float(np.mean((p - t) ** 2))


def loss_contrastive(image_embeds, text_embeds, temperature: float):
    """Symmetric cross-entropy over the pairwise cosine matrix with matched
    pairs on the diagonal. Rows must be unit-norm."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    graph = isinstance(image_embeds, Tensor) or isinstance(text_embeds, Tensor)
    a = image_embeds if isinstance(image_embeds, Tensor) else Tensor(image_embeds)
    b = text_embeds if isinstance(text_embeds, Tensor) else Tensor(text_embeds)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape != b.data.shape:
        raise ValueError(f"expected matching [B, d] inputs, got {a.data.shape} "
                         f"and {b.data.shape}")
    if a.data.shape[0] < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    for name, m in (("image", a.data), ("text", b.data)):
        norms = np.linalg.norm(m, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError(f"{name} embeddings are not unit-norm")
    logits = t_scale(t_matmul(a, t_swap_last(b)), 1.0 / temperature)
    d = t_diag(logits)
    li = t_mean(t_sub(t_logsumexp(logits, axis=1), d))
    lt = t_mean(t_sub(t_logsumexp(logits, axis=0), d))
    loss = t_scale(t_add(li, lt), 0.5)
    return loss if graph else loss.item()


def softmax(values, temperature: float = 1.0) -> np.ndarray:
    """Numerically stable probability vector over the last axis.

    Shifted logits clamp at -700 so extreme tails stay strictly positive in
    float64 instead of underflowing to zero.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of empty input")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = v / temperature
    z = np.maximum(z - z.max(axis=-1, keepdims=True), -700.0)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class OptState:
    """Adaptive-moment state with decoupled weight decay and cosine LR."""

    step: int
    lr: float
    beta1: float
    beta2: float
    weight_decay: float
    max_steps: int
    min_lr: float
    eps: float
    m: tuple
    v: tuple


def init_opt_state(net: Network, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.95, weight_decay: float = 0.0,
                   max_steps: int = 1000, min_lr: float = 1e-6,
                   eps: float = 1e-8) -> OptState:
    if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
        raise ValueError(f"betas must be in (0, 1), got {(beta1, beta2)}")
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    zeros = tuple(np.zeros_like(p) for p in net.params)
    return OptState(step=0, lr=lr, beta1=beta1, beta2=beta2,
                    weight_decay=weight_decay, max_steps=max_steps,
                    min_lr=min_lr, eps=eps, m=zeros,
                    v=tuple(np.zeros_like(p) for p in net.params))


def effective_lr(opt: OptState) -> float:
    t = min(opt.step, opt.max_steps)
    cos = 0.5 * (1.0 + math.cos(math.pi * t / opt.max_steps))
    return opt.min_lr + (opt.lr - opt.min_lr) * cos


def optimizer_step(net: Network, grads, opt: OptState) -> tuple[Network, OptState]:
    if len(grads) != len(net.params):
        raise ValueError(f"got {len(grads)} gradients for {len(net.params)} parameters")
    for i, (g, p) in enumerate(zip(grads, net.params)):
        if g.shape != p.shape:
            raise ValueError(f"gradient {i} shape {g.shape} != parameter shape {p.shape}")
    lr_t = effective_lr(opt)
    b1, b2 = opt.beta1, opt.beta2
    t = opt.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(net.params, grads, opt.m, opt.v):
        m2 = b1 * m + (1.0 - b1) * g
        v2 = b2 * v + (1.0 - b2) * g * g
        mhat = m2 / (1.0 - b1 ** t)
        vhat = v2 / (1.0 - b2 ** t)
        p2 = p - lr_t * mhat / (np.sqrt(vhat) + opt.eps) - lr_t * opt.weight_decay * p
        _check_finite(p2, "optimizer_step")
        new_params.append(p2)
        new_m.append(m2)
        new_v.append(v2)
    net2 = Network(spec=net.spec, params=tuple(new_params))
    opt2 = OptState(step=t, lr=opt.lr, beta1=b1, beta2=b2,
                    weight_decay=opt.weight_decay, max_steps=opt.max_steps,
                    min_lr=opt.min_lr, eps=opt.eps,
                    m=tuple(new_m), v=tuple(new_v))
    return net2, opt2


def finite_difference_check(net: Network, batch, eps: float,
                            loss_closure=None, max_checks_per_array: int | None = None,
                            sample_seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    By default the loss is the MSE of forward(net, x) against y for
    batch = (x, y); a custom closure over the parameter Tensors may be given
    instead. Large arrays can be spot-checked with max_checks_per_array.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if loss_closure is None:
        x, y = batch
        xa = np.asarray(x, dtype=np.float64)
        ya = np.asarray(y, dtype=np.float64)

        def loss_closure(ptensors):
            return loss_mse(_forward_graph(net.spec, ptensors, Tensor(xa)), Tensor(ya))

    analytic = gradients(net, loss_closure)

    def eval_loss(params_np) -> float:
        return loss_closure([Tensor(p) for p in params_np]).item()

    rng = np.random.default_rng(np.random.PCG64(sample_seed))
    worst = 0.0
    base = [p.copy() for p in net.params]
    for ai, (p, g) in enumerate(zip(base, analytic)):
        n = p.size
        if max_checks_per_array is not None and n > max_checks_per_array:
            idxs = rng.choice(n, size=max_checks_per_array, replace=False)
        else:
            idxs = np.arange(n)
        flat = p.reshape(-1)
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + eps
            fp = eval_loss(base)
            flat[j] = orig - eps
            fm = eval_loss(base)
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = g.reshape(-1)[j]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


_ACT_IDS = {name: i for i, name in enumerate(ACTIVATIONS)}


def serialize_network(net: Network) -> bytes:
    """Flat little-endian float32 record with a self-describing header."""
    spec = net.spec
    dims = spec.layer_dims()
    head = bytearray()
    head += _MAGIC
    head += struct.pack("<I", len(dims))
    head += struct.pack(f"<{len(dims)}I", *dims)
    head += struct.pack("<IIII", _ACT_IDS[spec.activation], spec.attention_blocks,
                        spec.attention_tokens, int(spec.normalize))
    flat = np.concatenate([p.reshape(-1) for p in net.params]).astype("<f4")
    head += struct.pack("<Q", flat.size)
    return bytes(head) + flat.tobytes()


def deserialize_network(data: bytes) -> Network:
    if data[:8] != _MAGIC:
        raise ValueError("bad magic in network record")
    off = 8
    (ndims,) = struct.unpack_from("<I", data, off); off += 4
    dims = struct.unpack_from(f"<{ndims}I", data, off); off += 4 * ndims
    act_id, blocks, tokens, norm = struct.unpack_from("<IIII", data, off); off += 16
    (nparams,) = struct.unpack_from("<Q", data, off); off += 8
    spec = NetworkSpec(input_dim=dims[0], hidden_dims=tuple(dims[1:-1]),
                       output_dim=dims[-1], activation=ACTIVATIONS[act_id],
                       attention_blocks=blocks, attention_tokens=tokens,
                       normalize=bool(norm))
    try:
        flat = np.frombuffer(data, dtype="<f4", count=nparams, offset=off)
    except ValueError as e:
        raise ValueError(f"truncated network record at byte {off}") from e
    params = []
    pos = 0
    for shape in _param_shapes(spec):
        n = int(np.prod(shape))
        params.append(flat[pos:pos + n].astype(np.float64).reshape(shape))
        pos += n
    if pos != nparams:
        raise ValueError(f"parameter count mismatch: header says {nparams}, "
                         f"spec needs {pos}")
    return Network(spec=spec, params=tuple(params))
