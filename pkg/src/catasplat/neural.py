"""Dense networks with hand-written reverse mode, the warp field, the
two-headed renderer, the environment map and ADAM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Aabb


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return np.log(p) - np.log1p(-p)


class Mlp:
    """Affine + ReLU stack, linear output layer.

    With ``residual_period=2`` the hidden layers after the input layer are
    grouped in pairs ``h -> relu(W2 relu(W1 h + b1) + b2 + h)``; a trailing
    unpaired hidden layer stays plain.
    """

    def __init__(
        self,
        widths: list[int],
        residual_period: int = 0,
        init: str = "torch",
        rng: np.random.Generator | int | None = 0,
        zero_last: bool = False,
    ):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if residual_period not in (0, 2):
            raise ValueError("only residual period 0 or 2 is supported")
        rng = np.random.default_rng(rng)
        self.widths = list(widths)
        self.residual_period = residual_period
        n_layers = len(widths) - 1
        self.block_start: set[int] = set()
        self.block_end: set[int] = set()
        if residual_period:
            l = 1
            while l + 1 <= n_layers - 2:
                if widths[l] == widths[l + 1] == widths[l + 2]:
                    self.block_start.add(l)
                    self.block_end.add(l + 1)
                    l += 2
                else:
                    l += 1
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        n_blocks = len(self.block_start)
        for l in range(n_layers):
            fan_in, fan_out = widths[l], widths[l + 1]
            if init == "torch":
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                b = rng.uniform(-bound, bound, size=fan_out)
            elif init == "fixup":
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
                b = np.zeros(fan_out)
                if l in self.block_start:
                    w *= n_blocks ** (-0.5)
                elif l in self.block_end:
                    w[:] = 0.0
            elif init == "zeros":
                w = np.zeros((fan_in, fan_out))
                b = np.zeros(fan_out)
            else:
                raise ValueError(f"unknown init {init!r}")
            if zero_last and l == n_layers - 1:
                w[:] = 0.0
                b[:] = 0.0
            self.weights.append(w)
            self.biases.append(b)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{l}"] = w
            out[f"{prefix}b{l}"] = b
        return out

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.widths[0]:
            raise ValueError(f"expected input width {self.widths[0]}, got {x.shape[-1]}")
        h = x
        inputs, pre = [], []
        skip = None
        last = self.n_layers - 1
        for l in range(self.n_layers):
            if l in self.block_start:
                skip = h
            inputs.append(h)
            z = h @ self.weights[l] + self.biases[l]
            if l in self.block_end:
                z = z + skip
            pre.append(z)
            h = relu(z) if l < last else z
        return h, {"inputs": inputs, "pre": pre, "weights": [id(w) for w in self.weights]}

    def backward(self, cache: dict, g_out: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Input cotangent and parameter gradients (keyed like :meth:`parameters`)."""
        if cache["weights"] != [id(w) for w in self.weights]:
            raise ValueError("stale cache: network weights were replaced since the forward pass")
        g = np.asarray(g_out, dtype=np.float64)
        grads: dict[str, np.ndarray] = {}
        g_skip = None
        last = self.n_layers - 1
        for l in range(last, -1, -1):
            z = cache["pre"][l]
            gz = g * (z > 0) if l < last else g
            if l in self.block_end:
                g_skip = gz
            h_in = cache["inputs"][l]
            grads[f"W{l}"] = h_in.reshape(-1, h_in.shape[-1]).T @ gz.reshape(-1, gz.shape[-1])
            grads[f"b{l}"] = gz.reshape(-1, gz.shape[-1]).sum(axis=0)
            g = gz @ self.weights[l].T
            if l in self.block_start:
                g = g + g_skip
                g_skip = None
        return g, grads

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for l in range(self.n_layers):
            self.weights[l][...] = state[f"W{l}"]
            self.biases[l][...] = state[f"b{l}"]


def _padded_box(box: Aabb) -> Aabb:
    """Give degenerate axes (e.g. cameras on a horizontal ring) the largest extent."""
    ext = box.extent.copy()
    big = max(float(ext.max()), 1e-6)
    ext[ext < 1e-6 * big] = big
    c = box.center
    return Aabb(c - ext / 2, c + ext / 2)


class WarpField:
    """Camera-conditioned displacement of reflection points: ``p' = p + s * mlp(norm(p), norm(c))``."""

    def __init__(
        self,
        point_box: Aabb,
        camera_box: Aabb,
        width: int = 256,
        n_layers: int = 4,
        scale: float = 0.01,
        rng: np.random.Generator | int | None = 0,
    ):
        self.point_box = _padded_box(point_box)
        self.camera_box = _padded_box(camera_box)
        self.scale = scale
        self.mlp = Mlp([6] + [width] * (n_layers - 1) + [3], init="torch", rng=rng)

    @classmethod
    def for_scene(cls, volume_box: Aabb, camera_positions: np.ndarray, **kw) -> "WarpField":
        return cls(volume_box.dilated(0.5), Aabb.from_points(camera_positions), **kw)

    def parameters(self) -> dict[str, np.ndarray]:
        return self.mlp.parameters()

    def encode(self, p: np.ndarray, c: np.ndarray) -> np.ndarray:
        u = 2.0 * (p - self.point_box.center) / self.point_box.extent
        v = 2.0 * (np.asarray(c, dtype=np.float64) - self.camera_box.center) / self.camera_box.extent
        return np.concatenate([u, np.broadcast_to(v, u.shape)], axis=-1)

    def forward(self, p: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, dict]:
        y, cache = self.mlp.forward(self.encode(p, c))
        return p + self.scale * y, cache

    def backward(self, cache: dict, g_warped: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients for the network weights only; base positions are not trainable."""
        _, grads = self.mlp.backward(cache, self.scale * g_warped)
        return grads

    def __call__(self, p: np.ndarray, c: np.ndarray) -> np.ndarray:
        return self.forward(p, c)[0]


def warp(field: WarpField, p: np.ndarray, c: np.ndarray) -> np.ndarray:
    return field(np.asarray(p, dtype=np.float64), c)


class NeuralRenderer:
    """Two encoder heads (primary + view direction, reflection) and a decoder.

    ``rgb = sigmoid(decoder(head1(primary, viewdir) * rho ++ head2(reflection) * (1 - rho)))``
    """

    def __init__(
        self,
        n_features: int = 6,
        width: int = 32,
        n_layers: int = 9,
        rng: np.random.Generator | int | None = 0,
    ):
        rng = np.random.default_rng(rng)
        hidden = [width] * (n_layers - 1)
        self.primary_head = Mlp([n_features + 3] + hidden + [width], 2, init="fixup", rng=rng)
        self.reflection_head = Mlp([n_features] + hidden + [width], 2, init="fixup", rng=rng)
        self.decoder = Mlp([2 * width] + hidden + [3], 2, init="fixup", rng=rng, zero_last=True)

    def nets(self) -> dict[str, Mlp]:
        return {"head1.": self.primary_head, "head2.": self.reflection_head, "dec.": self.decoder}

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, net in self.nets().items():
            out.update(net.parameters(prefix))
        return out

    def forward(self, primary: np.ndarray, rho: np.ndarray, reflection: np.ndarray, viewdirs: np.ndarray):
        shape = primary.shape[:-1]
        if rho.shape != shape or reflection.shape[:-1] != shape or viewdirs.shape[:-1] != shape:
            raise ValueError("shade inputs must share their spatial size")
        x1 = np.concatenate([primary, viewdirs], axis=-1).reshape(-1, primary.shape[-1] + 3)
        x2 = reflection.reshape(-1, reflection.shape[-1])
        r = rho.reshape(-1, 1)
        h1, c1 = self.primary_head.forward(x1)
        h2, c2 = self.reflection_head.forward(x2)
        e = np.concatenate([h1 * r, h2 * (1.0 - r)], axis=1)
        logits, c3 = self.decoder.forward(e)
        rgb = sigmoid(logits)
        cache = dict(c1=c1, c2=c2, c3=c3, h1=h1, h2=h2, r=r, rgb=rgb, shape=shape, nf=primary.shape[-1])
        return rgb.reshape(shape + (3,)), cache

    def backward(self, cache: dict, g_rgb: np.ndarray):
        """Returns ``(g_primary, g_rho, g_reflection, param_grads)``."""
        rgb = cache["rgb"]
        g_logits = g_rgb.reshape(-1, 3) * rgb * (1.0 - rgb)
        g_e, gd = self.decoder.backward(cache["c3"], g_logits)
        w = cache["h1"].shape[1]
        r = cache["r"]
        g_h1 = g_e[:, :w] * r
        g_h2 = g_e[:, w:] * (1.0 - r)
        g_r = np.sum(g_e[:, :w] * cache["h1"], axis=1) - np.sum(g_e[:, w:] * cache["h2"], axis=1)
        g_x1, g1 = self.primary_head.backward(cache["c1"], g_h1)
        g_x2, g2 = self.reflection_head.backward(cache["c2"], g_h2)
        shape = cache["shape"]
        nf = cache["nf"]
        grads = {}
        for prefix, g in (("head1.", g1), ("head2.", g2), ("dec.", gd)):
            grads.update({prefix + k: v for k, v in g.items()})
        return (
            g_x1[:, :nf].reshape(shape + (nf,)),
            g_r.reshape(shape),
            g_x2.reshape(shape + (g_x2.shape[-1],)),
            grads,
        )


def shade(renderer: NeuralRenderer, primary, rho, reflection, viewdirs) -> np.ndarray:
    return renderer.forward(primary, rho, reflection, viewdirs)[0]


@dataclass
class EnvironmentMap:
    """Polar-parameterized feature map (rows: inclination from +z, columns: azimuth)."""

    texels: np.ndarray

    @classmethod
    def zeros(cls, width: int = 256, height: int = 128, n_features: int = 6) -> "EnvironmentMap":
        return cls(np.zeros((height, width, n_features)))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    decay_prefix: str = "warp."
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)
    skipped: int = 0

    def step(
        self,
        params: dict[str, np.ndarray],
        grads: dict[str, np.ndarray],
        lr: float | None = None,
        lr_scale: dict[str, float] | None = None,
    ) -> bool:
        """In-place bias-corrected ADAM update of every parameter that has a gradient.

        Decoupled weight decay is applied to names starting with
        ``decay_prefix`` only. Returns False (and changes nothing) if any
        gradient is non-finite.
        """
        lr = self.lr if lr is None else lr
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            return False
        for name, g in grads.items():
            p = params[name]
            if p.shape != g.shape:
                raise ValueError(f"gradient shape mismatch for {name}: {g.shape} vs {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.steps[name] = 0
            self.steps[name] += 1
            t = self.steps[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            step_lr = lr * (1.0 if lr_scale is None else lr_scale.get(name, 1.0))
            if name.startswith(self.decay_prefix) and self.weight_decay:
                p *= 1.0 - step_lr * self.weight_decay
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p -= step_lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return True

    def append_rows(self, name: str, src: np.ndarray) -> None:
        """Grow the moments of a per-point parameter, copying rows ``src`` for new points."""
        if name in self.m:
            self.m[name] = np.concatenate([self.m[name], self.m[name][src]])
            self.v[name] = np.concatenate([self.v[name], self.v[name][src]])


def adam_step(state: AdamState, params, grads, lr: float | None = None) -> bool:
    return state.step(params, grads, lr)
