"""Minimal reverse-mode kernels for the toolkit's two small networks.

Layer vocabulary: 1x1 / 3x3 "same"-padded convolutions, relu / tanh /
sigmoid, residual blocks (two 3x3 convs with a skip connection), and
per-channel scale-shift. Forward passes return an explicit cache so the
same network can be evaluated several times (unrolled iterations) before
gradients are pulled back through each call.

Arrays move through the public API in (batch, channels, height, width)
order; convolutions run channels-last internally, accumulating one GEMM
per kernel tap over a zero-padded row buffer (fastest layout for the
small channel counts used here).
"""

from dataclasses import dataclass, field

import numpy as np

from .seqsim import ParameterError


class UsageError(RuntimeError):
    pass


@dataclass
class Tensor4:
    """(batch, channels, height, width) value with an optional gradient."""

    data: np.ndarray = field(repr=False)
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or min(self.data.shape) < 1:
            raise ParameterError(f"Tensor4 needs positive (B,C,H,W), got {self.data.shape}")
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ParameterError("grad shape must match data shape")

    @property
    def dims(self):
        return self.data.shape


# -- layer specs ------------------------------------------------------------


@dataclass
class ConvSpec:
    k: int
    in_ch: int
    out_ch: int

    def __post_init__(self):
        if self.k not in (1, 3):
            raise ParameterError("conv kernel must be 1 or 3")


@dataclass
class ReluSpec:
    pass


@dataclass
class TanhSpec:
    pass


@dataclass
class SigmoidSpec:
    pass


@dataclass
class ResBlockSpec:
    channels: int


@dataclass
class ScaleShiftSpec:
    channels: int


@dataclass
class NetworkSpec:
    layers: list

    def validate(self, in_ch):
        ch = in_ch
        for spec in self.layers:
            if isinstance(spec, ConvSpec):
                if spec.in_ch != ch:
                    raise ParameterError(
                        f"conv expects {spec.in_ch} channels, previous layer gives {ch}"
                    )
                ch = spec.out_ch
            elif isinstance(spec, (ResBlockSpec, ScaleShiftSpec)):
                if spec.channels != ch:
                    raise ParameterError(
                        f"layer expects {spec.channels} channels, previous gives {ch}"
                    )
        return ch


# -- conv kernel ------------------------------------------------------------


def _conv3_taps(H, W):
    taps = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            taps.append((dy + 1, dx + 1, dy * (W + 2) + dx))
    return taps


def _conv2d_forward(x, w, b):
    """x (B,H,W,Cin) channels-last, w (k,k,Cin,Cout); returns y + cache."""
    B, H, W, Cin = x.shape
    k = w.shape[0]
    Cout = w.shape[3]
    if k == 1:
        y = x.reshape(-1, Cin) @ w[0, 0]
        y += b
        return y.reshape(B, H, W, Cout), (x, None)
    xpad = np.zeros((B, H + 2, W + 2, Cin), dtype=x.dtype)
    xpad[:, 1 : H + 1, 1 : W + 1, :] = x
    R = (H + 2) * (W + 2)
    xf = xpad.reshape(B * R, Cin)
    # center tap writes, the 8 shifted taps accumulate through one buffer
    yf = np.empty((B * R, Cout), dtype=x.dtype)
    np.dot(xf, w[1, 1], out=yf)
    tmp = np.empty_like(yf)
    for ty, tx, o in _conv3_taps(H, W):
        if o == 0:
            continue
        r0, r1 = max(0, -o), B * R - max(0, o)
        t = tmp[: r1 - r0]
        np.dot(xf[r0 + o : r1 + o], w[ty, tx], out=t)
        yv = yf[r0:r1]
        np.add(yv, t, out=yv)
    y = yf.reshape(B, H + 2, W + 2, Cout)[:, 1 : H + 1, 1 : W + 1, :]
    y = y + b
    return y, (x, xpad)


def _conv2d_backward(cache, dy, w):
    x, xpad = cache
    B, H, W, Cin = x.shape
    k = w.shape[0]
    Cout = w.shape[3]
    db = dy.sum(axis=(0, 1, 2))
    if k == 1:
        x2 = x.reshape(-1, Cin)
        dy2 = dy.reshape(-1, Cout)
        dw = (x2.T @ dy2).reshape(1, 1, Cin, Cout)
        dx = (dy2 @ w[0, 0].T).reshape(x.shape)
        return dw, db, dx
    R = (H + 2) * (W + 2)
    dypad = np.zeros((B, H + 2, W + 2, Cout), dtype=dy.dtype)
    dypad[:, 1 : H + 1, 1 : W + 1, :] = dy
    dyf = dypad.reshape(B * R, Cout)
    xf = xpad.reshape(B * R, Cin)
    dxf = np.zeros((B * R, Cin), dtype=dy.dtype)
    dw = np.empty_like(w)
    tmp = np.empty((B * R, Cin), dtype=dy.dtype)
    wt = np.ascontiguousarray(np.transpose(w, (0, 1, 3, 2)))
    for ty, tx, o in _conv3_taps(H, W):
        r0, r1 = max(0, -o), B * R - max(0, o)
        np.dot(xf[r0 + o : r1 + o].T, dyf[r0:r1], out=dw[ty, tx])
        t = tmp[: r1 - r0]
        np.dot(dyf[r0:r1], wt[ty, tx], out=t)
        dv = dxf[r0 + o : r1 + o]
        np.add(dv, t, out=dv)
    dx = dxf.reshape(B, H + 2, W + 2, Cin)[:, 1 : H + 1, 1 : W + 1, :]
    return dw, db, np.ascontiguousarray(dx)


# -- layers -----------------------------------------------------------------


class _Layer:
    n_params = 0

    def params(self):
        return []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError


class _Conv(_Layer):
    def __init__(self, spec, rng, dtype):
        fan_in = spec.k * spec.k * spec.in_ch
        bound = 1.0 / np.sqrt(fan_in)
        self.w = rng.uniform(-bound, bound, (spec.k, spec.k, spec.in_ch, spec.out_ch)).astype(dtype)
        self.b = np.zeros(spec.out_ch, dtype=dtype)
        self.spec = spec

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        return _conv2d_forward(x, self.w, self.b)

    def backward(self, cache, dy):
        dw, db, dx = _conv2d_backward(cache, dy, self.w)
        return [dw, db], dx


class _Relu(_Layer):
    def forward(self, x):
        y = np.maximum(x, 0)
        return y, (x > 0)

    def backward(self, cache, dy):
        return [], dy * cache


class _Tanh(_Layer):
    def forward(self, x):
        y = np.tanh(x)
        return y, y

    def backward(self, cache, dy):
        return [], dy * (1.0 - cache * cache)


class _Sigmoid(_Layer):
    def forward(self, x):
        y = 1.0 / (1.0 + np.exp(-x))
        return y, y

    def backward(self, cache, dy):
        return [], dy * cache * (1.0 - cache)


class _ResBlock(_Layer):
    """relu(x + conv(relu(conv(x)))), both convs 3x3 at fixed width."""

    def __init__(self, spec, rng, dtype):
        cs = ConvSpec(3, spec.channels, spec.channels)
        self.conv1 = _Conv(cs, rng, dtype)
        self.conv2 = _Conv(cs, rng, dtype)

    def params(self):
        return self.conv1.params() + self.conv2.params()

    def forward(self, x):
        h1, c1 = self.conv1.forward(x)
        a1, cr = _Relu().forward(h1)
        h2, c2 = self.conv2.forward(a1)
        y = np.maximum(x + h2, 0)
        return y, (c1, cr, c2, x + h2 > 0)

    def backward(self, cache, dy):
        c1, cr, c2, mask = cache
        d = dy * mask
        g2, da1 = self.conv2.backward(c2, d)
        dh1 = da1 * cr
        g1, dx = self.conv1.backward(c1, dh1)
        return g1 + g2, dx + d


class _ScaleShift(_Layer):
    def __init__(self, spec, rng, dtype):
        self.scale = np.ones(spec.channels, dtype=dtype)
        self.shift = np.zeros(spec.channels, dtype=dtype)

    def params(self):
        return [self.scale, self.shift]

    def forward(self, x):
        return x * self.scale + self.shift, x

    def backward(self, cache, dy):
        dscale = (dy * cache).sum(axis=(0, 1, 2))
        dshift = dy.sum(axis=(0, 1, 2))
        return [dscale, dshift], dy * self.scale


_LAYER_BUILDERS = {
    ConvSpec: _Conv,
    ResBlockSpec: _ResBlock,
    ScaleShiftSpec: _ScaleShift,
}
_STATELESS = {ReluSpec: _Relu, TanhSpec: _Tanh, SigmoidSpec: _Sigmoid}


class Network:
    """Sequential network built from a NetworkSpec; owns its parameters."""

    def __init__(self, spec, in_ch, rng=None, dtype=np.float32):
        spec.validate(in_ch)
        rng = rng or np.random.default_rng(0)
        self.spec = spec
        self.in_ch = in_ch
        self.dtype = np.dtype(dtype)
        self.layers = []
        for ls in spec.layers:
            if type(ls) in _LAYER_BUILDERS:
                self.layers.append(_LAYER_BUILDERS[type(ls)](ls, rng, self.dtype))
            elif type(ls) in _STATELESS:
                self.layers.append(_STATELESS[type(ls)]())
            else:
                raise ParameterError(f"unknown layer spec {ls!r}")

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def param_names(self):
        names = []
        for i, layer in enumerate(self.layers):
            for j in range(len(layer.params())):
                names.append(f"layer{i}.{type(layer).__name__.lstrip('_')}.p{j}")
        return names

    def num_params(self):
        return int(sum(p.size for p in self.parameters()))

    def param_bytes(self):
        return int(sum(p.nbytes for p in self.parameters()))

    def astype(self, dtype):
        """Copy of this network with parameters cast to `dtype`."""
        import copy

        other = copy.deepcopy(self)
        other.dtype = np.dtype(dtype)
        for layer in other.layers:
            if isinstance(layer, _Conv):
                layer.w = layer.w.astype(dtype)
                layer.b = layer.b.astype(dtype)
            elif isinstance(layer, _ResBlock):
                for c in (layer.conv1, layer.conv2):
                    c.w = c.w.astype(dtype)
                    c.b = c.b.astype(dtype)
            elif isinstance(layer, _ScaleShift):
                layer.scale = layer.scale.astype(dtype)
                layer.shift = layer.shift.astype(dtype)
        return other

    def set_parameters(self, arrays):
        current = self.parameters()
        if len(arrays) != len(current):
            raise ParameterError("parameter count mismatch")
        for dst, src in zip(current, arrays):
            if dst.shape != src.shape:
                raise ParameterError("parameter shape mismatch")
            dst[...] = src


def forward(net, x):
    """Evaluate `net` on (B,C,H,W) input; returns (output, cache)."""
    if isinstance(x, Tensor4):
        x = x.data
    if x.shape[1] != net.in_ch:
        raise ParameterError(f"input has {x.shape[1]} channels, net expects {net.in_ch}")
    h = np.ascontiguousarray(np.transpose(x, (0, 2, 3, 1)), dtype=net.dtype)
    caches = []
    for layer in net.layers:
        h, c = layer.forward(h)
        caches.append(c)
    y = np.ascontiguousarray(np.transpose(h, (0, 3, 1, 2)))
    return y, (caches, x.shape)


def backward(net, cache, grad_output):
    """Exact reverse-mode gradients of a recorded forward call.

    Returns (param_grads, grad_input); param_grads aligns with
    net.parameters().
    """
    if isinstance(grad_output, Tensor4):
        grad_output = grad_output.data
    caches, in_shape = cache
    if len(caches) != len(net.layers):
        raise UsageError("cache does not match this network")
    d = np.ascontiguousarray(np.transpose(grad_output, (0, 2, 3, 1)), dtype=net.dtype)
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        g, d = net.layers[i].backward(caches[i], d)
        grads[i] = g
    flat = []
    for g in grads:
        flat.extend(g)
    dx = np.ascontiguousarray(np.transpose(d, (0, 3, 1, 2)))
    if dx.shape != in_shape:
        raise UsageError("cache/grad_output shape mismatch")
    return flat, dx


# -- serialization -----------------------------------------------------------

_SPEC_TAGS = {
    ConvSpec: "conv",
    ReluSpec: "relu",
    TanhSpec: "tanh",
    SigmoidSpec: "sigmoid",
    ResBlockSpec: "resblock",
    ScaleShiftSpec: "scale_shift",
}


def spec_to_manifest(spec):
    out = []
    for ls in spec.layers:
        tag = _SPEC_TAGS[type(ls)]
        if isinstance(ls, ConvSpec):
            out.append([tag, ls.k, ls.in_ch, ls.out_ch])
        elif isinstance(ls, (ResBlockSpec, ScaleShiftSpec)):
            out.append([tag, ls.channels])
        else:
            out.append([tag])
    return out


def spec_from_manifest(manifest):
    layers = []
    for entry in manifest:
        tag = entry[0]
        if tag == "conv":
            layers.append(ConvSpec(*entry[1:]))
        elif tag == "resblock":
            layers.append(ResBlockSpec(entry[1]))
        elif tag == "scale_shift":
            layers.append(ScaleShiftSpec(entry[1]))
        elif tag == "relu":
            layers.append(ReluSpec())
        elif tag == "tanh":
            layers.append(TanhSpec())
        elif tag == "sigmoid":
            layers.append(SigmoidSpec())
        else:
            raise ParameterError(f"unknown layer tag {tag!r}")
    return NetworkSpec(layers)


def pack_params(net, dtype=np.float32):
    """Concatenate all parameters into one flat vector (plus shapes)."""
    params = net.parameters()
    flat = np.concatenate([p.ravel().astype(dtype) for p in params])
    shapes = [list(p.shape) for p in params]
    return flat, shapes


def unpack_params(net, flat, shapes):
    arrays = []
    off = 0
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(np.asarray(flat[off : off + size], dtype=net.dtype).reshape(shape))
        off += size
    if off != len(flat):
        raise ParameterError("flat parameter vector length mismatch")
    net.set_parameters(arrays)
    return net


# -- losses -----------------------------------------------------------------


class MSELoss:
    """Mean squared error against a fixed target, with analytic gradient."""

    def __init__(self, target):
        self.target = np.asarray(target)

    def value(self, y):
        d = y - self.target
        return float(np.mean(d * d))

    def grad(self, y):
        return (2.0 / y.size) * (y - self.target)


# -- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw):
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kw,
        )


def adam_step(params, grads, state, lr, names=None):
    """Bias-corrected Adam update, in place; advances the step counter."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ParameterError("params/grads/state lengths differ")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"param[{i}]"
            raise FloatingPointError(f"non-finite gradient in {label}")
        state.m[i] *= state.beta1
        state.m[i] += (1.0 - state.beta1) * g
        state.v[i] *= state.beta2
        state.v[i] += (1.0 - state.beta2) * (g * g)
        p -= (lr / bc1) * state.m[i] / (np.sqrt(state.v[i] / bc2) + state.eps)
    return params, state


# -- finite-difference oracle ------------------------------------------------


def grad_check(net, x, loss, eps=1e-5, n_samples=200, rng_seed=0):
    """Max relative error between backward() and central differences over
    a random subset of parameter coordinates. Run on float64 networks."""
    rng = np.random.default_rng(rng_seed)
    y, cache = forward(net, x)
    analytic, _ = backward(net, cache, loss.grad(y))
    params = net.parameters()
    coords = []
    for i, p in enumerate(params):
        for _ in range(max(1, n_samples // len(params))):
            coords.append((i, rng.integers(p.size)))
    while len(coords) < n_samples:
        i = int(rng.integers(len(params)))
        coords.append((i, rng.integers(params[i].size)))
    worst = 0.0
    for i, j in coords:
        p = params[i].ravel()
        keep = p[j]
        p[j] = keep + eps
        lo_hi = loss.value(forward(net, x)[0])
        p[j] = keep - eps
        lo_lo = loss.value(forward(net, x)[0])
        p[j] = keep
        fd = (lo_hi - lo_lo) / (2.0 * eps)
        an = float(analytic[i].ravel()[j])
        scale = max(abs(fd), abs(an))
        if scale < 1e-10:
            continue
        worst = max(worst, abs(fd - an) / scale)
    return worst
