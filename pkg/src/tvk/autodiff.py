"""Dense-tensor reverse-mode differentiation and the Adam optimizer.

Just enough operator vocabulary for the networks in this package:
convolutions (including 1D pairs and stride 2), transposed convolutions,
fully connected layers, a few activations, channel concat/slice, resizing
and reductions. Data layout is (N, C, H, W) for feature maps and (N, K)
for vectors. Everything runs on plain numpy arrays; convolutions lower to
GEMM via im2col so BLAS does the heavy lifting.

Gradients accumulate into ``Tensor.grad``. The graph is built eagerly by
the ops; ``backward`` walks it in reverse topological order, so two runs
over the same graph produce bitwise-identical results.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "ParameterStore", "Adam", "backward", "constant",
    "conv2d", "upconv2d", "fully_connected", "activation",
    "concat_channels", "slice_channels", "nearest_up", "bilinear_resize",
    "global_avg_pool", "reshape", "l2_normalize_rows", "add", "sub",
    "mul", "affine", "sum_all", "fanin_uniform", "gradcheck_vjp",
]


class Tensor:
    """A value node: numpy data plus the recipe to push gradients back."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, name=None,
                 _parents=(), _vjp=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._vjp = _vjp  # fn(grad) -> tuple of parent grads (or None)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if g is None:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, seed=None):
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        backward({self: seed})

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def constant(data) -> Tensor:
    return Tensor(data)


def _op(data, parents, vjp) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents),
                  _vjp=vjp if req else None)


def backward(seeds: dict) -> None:
    """Reverse-mode accumulation from one or more seeded output nodes."""
    # iterative post-order topological sort over the union of ancestors
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(t, False) for t in seeds]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    for t, seed in seeds.items():
        if t.requires_grad:
            t.accumulate(np.asarray(seed, dtype=t.data.dtype))

    for node in reversed(topo):
        if node.grad is None or node._vjp is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if parent.requires_grad:
                parent.accumulate(g)


# --- im2col convolution kernels ------------------------------------------

def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def _im2col(xp, kh, kw, sh, sw):
    """Padded input (N,C,Hp,Wp) -> patch matrix (N, C*kh*kw, Ho*Wo)."""
    N, C, Hp, Wp = xp.shape
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (N, C, kh, kw, Ho, Wo),
        (s0, s1, s2, s3, s2 * sh, s3 * sw), writeable=False)
    return view.reshape(N, C * kh * kw, Ho * Wo), Ho, Wo


def _pad4(x, pt, pb, pl, pr):
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


# patch-matrix size (elements) above which convolutions run row-tiled;
# large im2col buffers are memory-bound, tiles stay cache-resident
_TILE_LIMIT = 1 << 21


def _row_tiles(Ho, per_row):
    rows = max(1, _TILE_LIMIT // max(per_row, 1))
    for r0 in range(0, Ho, rows):
        yield r0, min(r0 + rows, Ho)


def _conv_fwd(x, w, stride, padding):
    sh, sw = stride
    ph, pw = padding
    O, C, kh, kw = w.shape
    xp = _pad4(x, ph, ph, pw, pw)
    N = xp.shape[0]
    Ho = (xp.shape[2] - kh) // sh + 1
    Wo = (xp.shape[3] - kw) // sw + 1
    w2 = w.reshape(O, C * kh * kw)
    per_row = N * C * kh * kw * Wo
    if per_row * Ho <= _TILE_LIMIT:
        cols, _, _ = _im2col(xp, kh, kw, sh, sw)
        return np.matmul(w2, cols).reshape(N, O, Ho, Wo)
    out = np.empty((N, O, Ho, Wo), dtype=np.result_type(x, w))
    for r0, r1 in _row_tiles(Ho, per_row):
        xs = xp[:, :, r0 * sh:(r1 - 1) * sh + kh]
        cols, hh, _ = _im2col(xs, kh, kw, sh, sw)
        out[:, :, r0:r1] = np.matmul(w2, cols).reshape(N, O, hh, Wo)
    return out


def _conv_dw(x, dy, stride, padding, kshape):
    sh, sw = stride
    ph, pw = padding
    O, C, kh, kw = kshape
    xp = _pad4(x, ph, ph, pw, pw)
    N = xp.shape[0]
    Ho, Wo = dy.shape[2], dy.shape[3]
    per_row = N * C * kh * kw * Wo
    if per_row * Ho <= _TILE_LIMIT:
        cols, _, _ = _im2col(xp, kh, kw, sh, sw)
        dyf = dy.reshape(N, O, Ho * Wo)
        dw = np.matmul(dyf, cols.transpose(0, 2, 1)).sum(axis=0)
        return dw.reshape(O, C, kh, kw)
    dw = np.zeros((O, C * kh * kw), dtype=np.result_type(x, dy))
    for r0, r1 in _row_tiles(Ho, per_row):
        xs = xp[:, :, r0 * sh:(r1 - 1) * sh + kh]
        cols, hh, _ = _im2col(xs, kh, kw, sh, sw)
        dyf = dy[:, :, r0:r1].reshape(N, O, hh * Wo)
        dw += np.matmul(dyf, cols.transpose(0, 2, 1)).sum(axis=0)
    return dw.reshape(O, C, kh, kw)


def _conv_dx_polyphase_2x(dy, w, x_hw):
    """Stride-2, 4x4, pad-1 transposed conv via per-phase 2x2 convs.

    Avoids the zero-stuffed intermediate (3/4 of it is zeros), which
    matters at full resolution; exactly equivalent to the generic path.
    """
    O, C, _, _ = w.shape
    N, _, Ho, Wo = dy.shape
    H, W = x_hw
    out = np.empty((N, C, H, W), dtype=dy.dtype)
    for u in (0, 1):
        for v in (0, 1):
            sub = w[:, :, (1 - u)::2, (1 - v)::2]  # (O, C, 2, 2)
            wf = np.ascontiguousarray(
                sub[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            dyp = _pad4(dy, 1 - u, u, 1 - v, v)
            out[:, :, u::2, v::2] = _conv_fwd(dyp, wf, (1, 1), (0, 0))
    return out


def _conv_dx(dy, w, stride, padding, x_hw):
    """Gradient w.r.t. the conv input; also the upconv forward kernel."""
    sh, sw = stride
    ph, pw = padding
    O, C, kh, kw = w.shape
    N = dy.shape[0]
    Ho, Wo = dy.shape[2], dy.shape[3]
    H, W = x_hw
    if ((sh, sw) == (2, 2) and (kh, kw) == (4, 4) and (ph, pw) == (1, 1)
            and H == 2 * Ho and W == 2 * Wo):
        return _conv_dx_polyphase_2x(dy, w, x_hw)
    Hd = (Ho - 1) * sh + 1
    Wd = (Wo - 1) * sw + 1
    if (sh, sw) == (1, 1):
        dyd = dy
    else:
        dyd = np.zeros((N, O, Hd, Wd), dtype=dy.dtype)
        dyd[:, :, ::sh, ::sw] = dy
    pt = kh - 1 - ph
    pl = kw - 1 - pw
    pb = H + kh - 1 - pt - Hd
    pr = W + kw - 1 - pl - Wd
    if min(pt, pl, pb, pr) < 0:
        raise ValueError("padding exceeds kernel; unsupported configuration")
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return _conv_fwd(_pad4(dyd, pt, pb, pl, pr), wf, (1, 1), (0, 0))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride=1, padding=0) -> Tensor:
    """Cross-correlation of (N,C,H,W) with kernels (O,C,kh,kw)."""
    stride = _pair(stride)
    padding = _pair(padding)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ValueError(
            f"conv2d shape mismatch: input {x.data.shape}, kernel {w.data.shape}")
    out = _conv_fwd(x.data, w.data, stride, padding)
    if b is not None:
        out += b.data[None, :, None, None]
    x_hw = x.data.shape[2:]
    kshape = w.data.shape
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gx = _conv_dx(g, w.data, stride, padding, x_hw) if x.requires_grad else None
        gw = _conv_dw(x.data, g, stride, padding, kshape) if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return gx, gw, gb

    return _op(out, parents, vjp)


def upconv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
             stride=2, padding=1, out_hw=None) -> Tensor:
    """Transposed convolution: exact adjoint of conv2d with the same kernel.

    The kernel keeps the conv layout (O, C, kh, kw); the input has O
    channels and the output C channels. The default output size is
    (H-1)*stride + k - 2*padding per axis, so stride 2 with k=4, pad=1
    doubles the spatial dimensions exactly; pass ``out_hw`` when the
    matching forward conv dropped trailing rows or columns.
    """
    stride = _pair(stride)
    padding = _pair(padding)
    if x.data.ndim != 4 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(
            f"upconv2d shape mismatch: input {x.data.shape}, kernel {w.data.shape}")
    sh, sw = stride
    ph, pw = padding
    O, C, kh, kw = w.data.shape
    if out_hw is None:
        Hout = (x.data.shape[2] - 1) * sh + kh - 2 * ph
        Wout = (x.data.shape[3] - 1) * sw + kw - 2 * pw
    else:
        Hout, Wout = out_hw
    out = _conv_dx(x.data, w.data, stride, padding, (Hout, Wout))
    if b is not None:
        out += b.data[None, :, None, None]
    kshape = w.data.shape
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gx = _conv_fwd(g, w.data, stride, padding) if x.requires_grad else None
        gw = _conv_dw(g, x.data, stride, padding, kshape) if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return gx, gw, gb

    return _op(out, parents, vjp)


def fully_connected(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """(N, F) @ (F, K) + (K,)."""
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(
            f"fully_connected shape mismatch: {x.data.shape} @ {w.data.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data[None, :]
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _op(out, parents, vjp)


LEAKY_SLOPE = 0.1


def activation(x: Tensor, kind: str) -> Tensor:
    """kinds: 'leaky_relu' (slope 0.1), 'exp', 'identity'."""
    if kind == "identity":
        return x
    if kind == "leaky_relu":
        pos = x.data > 0
        out = np.where(pos, x.data, LEAKY_SLOPE * x.data)

        def vjp(g):
            return (np.where(pos, g, np.asarray(LEAKY_SLOPE, x.dtype) * g),)

        return _op(out, (x,), vjp)
    if kind == "exp":
        out = np.exp(x.data)

        def vjp(g):
            return (g * out,)

        return _op(out, (x,), vjp)
    raise ValueError(f"unknown activation kind {kind!r}")


def concat_channels(tensors: list[Tensor]) -> Tensor:
    """Concatenate (N,C,H,W) tensors along the channel axis."""
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=1)
    sizes = [d.shape[1] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _op(out, tuple(tensors), vjp)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[:, start:stop]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _op(out, (x,), vjp)


def nearest_up(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling by an integer factor."""
    f = int(factor)
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def vjp(g):
        N, C, H, W = x.data.shape
        return (g.reshape(N, C, H, f, W, f).sum(axis=(3, 5)),)

    return _op(out, (x,), vjp)


def _linear_resize_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Row-stochastic interpolation matrix, pixel-center aligned."""
    L = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    a = src - i0
    for r in range(n_out):
        L[r, i0[r]] += 1 - a[r]
        L[r, i1[r]] += a[r]
    return L


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of (N,C,H,W); up or down."""
    N, C, H, W = x.data.shape
    Lh = _linear_resize_matrix(out_h, H, x.data.dtype)
    Lw = _linear_resize_matrix(out_w, W, x.data.dtype)
    out = np.matmul(np.matmul(Lh, x.data), Lw.T)

    def vjp(g):
        return (np.matmul(np.matmul(Lh.T, g), Lw),)

    return _op(out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) mean over space."""
    N, C, H, W = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def vjp(g):
        scale = np.asarray(1.0 / (H * W), dtype=x.dtype)
        return (np.broadcast_to((g * scale)[:, :, None, None],
                                x.data.shape).copy(),)

    return _op(out, (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _op(out, (x,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError("add requires matching shapes")
    return _op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError("sub requires matching shapes")
    return _op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError("mul requires matching shapes")
    return _op(a.data * b.data, (a, b),
               lambda g: (g * b.data, g * a.data))


def affine(x: Tensor, scale: float, shift: float) -> Tensor:
    """y = scale * x + shift with constant coefficients."""
    s = np.asarray(scale, dtype=x.dtype)
    out = s * x.data + np.asarray(shift, dtype=x.dtype)

    def vjp(g):
        return (g * s,)

    return _op(out, (x,), vjp)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize each row of (N, K) to unit L2 norm."""
    n = np.linalg.norm(x.data, axis=1, keepdims=True)
    n = np.maximum(n, eps)
    y = x.data / n

    def vjp(g):
        dot = np.sum(g * y, axis=1, keepdims=True)
        return ((g - y * dot) / n,)

    return _op(y, (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum()).reshape(())

    def vjp(g):
        return (np.broadcast_to(np.asarray(g, x.dtype), x.data.shape).copy(),)

    return _op(out, (x,), vjp)


# --- parameters and the optimizer -----------------------------------------

def fanin_uniform(rng: np.random.Generator, shape, fan_in: int,
                  dtype=np.float64) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(3 / fan_in)."""
    a = np.sqrt(3.0 / max(fan_in, 1))
    return rng.uniform(-a, a, size=shape).astype(dtype)


class ParameterStore:
    """Registry of named trainable tensors; names must be unique."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if name not in state:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(f"parameter {name!r}: shape mismatch")
            t.data = arr.copy()


class Adam:
    """Adam with bias correction followed by decoupled weight decay."""

    def __init__(self, params: ParameterStore | dict, lr=1e-4, beta1=0.9,
                 beta2=0.999, eps=1e-8, weight_decay=0.0004):
        self.params = dict(params.items()) if hasattr(params, "items") else params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name in self.params:
            p = self.params[name]
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            step = (self.lr * (m / bc1)
                    / (np.sqrt(v / bc2) + self.eps)).astype(p.data.dtype)
            if self.weight_decay:
                step = step + (self.lr * self.weight_decay
                               * p.data).astype(p.data.dtype)
            p.data = p.data - step

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array(self.t, dtype=np.int64)}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name].copy()
            out[f"adam.v.{name}"] = self.v[name].copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["adam.t"])
        for name in self.params:
            self.m[name] = np.array(state[f"adam.m.{name}"])
            self.v[name] = np.array(state[f"adam.v.{name}"])


def gradcheck_vjp(fn, inputs: list[np.ndarray], rng: np.random.Generator,
                  step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference VJPs.

    ``fn`` maps input Tensors to one output Tensor; the check projects the
    output against a fixed random seed vector so a scalar can be
    differentiated numerically.
    """
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
               for x in inputs]
    out = fn(*tensors)
    seed = rng.normal(size=out.data.shape)
    backward({out: seed})

    worst = 0.0
    for t in tensors:
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.ravel()
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(np.sum(fn(*tensors).data * seed))
            flat[i] = orig - step
            fm = float(np.sum(fn(*tensors).data * seed))
            flat[i] = orig
            num[i] = (fp - fm) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(num), np.abs(ana.ravel())), 1e-6)
        worst = max(worst, float(np.max(np.abs(num - ana.ravel()) / denom)))
    return worst
