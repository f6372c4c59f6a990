"""The S5-DSCR / S5-DSCR-S architectures.

A model is bicubic pre-upsampling followed by a stack of depthwise-separable
convolution modules whose output is added back onto the bicubic base: the
network learns only the residual correction, so zero weights reproduce the
bicubic interpolation bit for bit.

Each module is ``depthwise(k) -> relu -> [pointwise -> relu] x (m_p - 1) ->
pointwise``, with a relu after the final pointwise except in the last module
when ``final_linear`` is set (the residual must be free to go negative).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, add, depthwise_conv, mse_loss, pointwise_conv, relu
from .errors import (
    BadMagicError,
    CorruptFileError,
    ShapeMismatchError,
    UnsupportedVersionError,
)
from .resample import bicubic_upsample

WEIGHTS_MAGIC = b"DSCW"
WEIGHTS_VERSION = 1
_WEIGHTS_HEADER_FMT = "<4sHIIIIII"  # magic, version, C, L, k, m_p, s, flags
_WEIGHTS_HEADER_SIZE = struct.calcsize(_WEIGHTS_HEADER_FMT)
_FLAG_SHARE = 1
_FLAG_FINAL_LINEAR = 2


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``pointwise_per_module`` defaults to 3 for multi-module stacks and 1 for
    the single-module variant, which reproduces the published parameter
    budgets of the two models.
    """

    channels: int
    n_modules: int = 1
    dw_kernel: int = 5
    pointwise_per_module: int | None = None
    scale: int = 4
    share_module_weights: bool = False
    final_linear: bool = True

    def __post_init__(self) -> None:
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.n_modules < 1:
            raise ValueError("n_modules must be >= 1")
        if self.dw_kernel % 2 == 0 or self.dw_kernel < 1:
            raise ValueError("dw_kernel must be odd and positive")
        if self.pointwise_per_module is None:
            object.__setattr__(
                self, "pointwise_per_module", 3 if self.n_modules > 1 else 1
            )
        if self.pointwise_per_module < 1:
            raise ValueError("pointwise_per_module must be >= 1")
        if self.scale < 2:
            raise ValueError("scale must be >= 2")

    @property
    def n_stored_modules(self) -> int:
        return 1 if self.share_module_weights else self.n_modules

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "n_modules": self.n_modules,
            "dw_kernel": self.dw_kernel,
            "pointwise_per_module": self.pointwise_per_module,
            "scale": self.scale,
            "share_module_weights": self.share_module_weights,
            "final_linear": self.final_linear,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def param_count(config: ModelConfig) -> int:
    """Exact number of trainable scalars, biases included."""
    c, k = config.channels, config.dw_kernel
    per_module = (k * k * c + c) + config.pointwise_per_module * (c * c + c)
    return config.n_stored_modules * per_module


@dataclass
class ModuleWeights:
    dw_kernel: np.ndarray  # [C, k, k]
    dw_bias: np.ndarray  # [C]
    pw_weights: list[np.ndarray] = field(default_factory=list)  # m_p of [C, C]
    pw_biases: list[np.ndarray] = field(default_factory=list)  # m_p of [C]


@dataclass
class ModelWeights:
    """All trainable arrays, float32, shape-checked against the config."""

    config: ModelConfig
    modules: list[ModuleWeights]

    def __post_init__(self) -> None:
        cfg = self.config
        c, k = cfg.channels, cfg.dw_kernel
        if len(self.modules) != cfg.n_stored_modules:
            raise ShapeMismatchError(
                f"expected {cfg.n_stored_modules} stored modules, got {len(self.modules)}"
            )
        for m, mod in enumerate(self.modules):
            if mod.dw_kernel.shape != (c, k, k):
                raise ShapeMismatchError(f"module {m} dw kernel shape {mod.dw_kernel.shape}")
            if mod.dw_bias.shape != (c,):
                raise ShapeMismatchError(f"module {m} dw bias shape {mod.dw_bias.shape}")
            if len(mod.pw_weights) != cfg.pointwise_per_module or len(
                mod.pw_biases
            ) != cfg.pointwise_per_module:
                raise ShapeMismatchError(f"module {m} pointwise layer count")
            for j, (w, b) in enumerate(zip(mod.pw_weights, mod.pw_biases)):
                if w.shape != (c, c):
                    raise ShapeMismatchError(f"module {m} pw{j} weight shape {w.shape}")
                if b.shape != (c,):
                    raise ShapeMismatchError(f"module {m} pw{j} bias shape {b.shape}")
            arrays = [mod.dw_kernel, mod.dw_bias, *mod.pw_weights, *mod.pw_biases]
            if any(not np.isfinite(a).all() for a in arrays):
                raise ValueError(f"module {m} contains non-finite weights")

    def param_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array mapping in declaration order."""
        out: dict[str, np.ndarray] = {}
        for m, mod in enumerate(self.modules):
            out[f"m{m}.dw_kernel"] = mod.dw_kernel
            out[f"m{m}.dw_bias"] = mod.dw_bias
            for j, (w, b) in enumerate(zip(mod.pw_weights, mod.pw_biases)):
                out[f"m{m}.pw{j}.weight"] = w
                out[f"m{m}.pw{j}.bias"] = b
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.param_arrays().values())

    def tensors(self, requires_grad: bool = False, dtype=None) -> TensorWeights:
        arrays = {
            name: (a if dtype is None else a.astype(dtype))
            for name, a in self.param_arrays().items()
        }
        return TensorWeights.from_arrays(self.config, arrays, requires_grad=requires_grad)

    def copy(self) -> ModelWeights:
        return ModelWeights(
            config=self.config,
            modules=[
                ModuleWeights(
                    dw_kernel=m.dw_kernel.copy(),
                    dw_bias=m.dw_bias.copy(),
                    pw_weights=[w.copy() for w in m.pw_weights],
                    pw_biases=[b.copy() for b in m.pw_biases],
                )
                for m in self.modules
            ],
        )


class TensorWeights:
    """ModelWeights lifted into graph leaves, shared across forward passes."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self._params = params

    @classmethod
    def from_arrays(
        cls, config: ModelConfig, arrays: dict[str, np.ndarray], requires_grad: bool = False
    ) -> TensorWeights:
        params = {name: Tensor(a, requires_grad=requires_grad) for name, a in arrays.items()}
        return cls(config, params)

    def params(self) -> dict[str, Tensor]:
        return self._params

    def module(self, index: int) -> dict:
        m = 0 if self.config.share_module_weights else index
        return {
            "dw_kernel": self._params[f"m{m}.dw_kernel"],
            "dw_bias": self._params[f"m{m}.dw_bias"],
            "pw": [
                (self._params[f"m{m}.pw{j}.weight"], self._params[f"m{m}.pw{j}.bias"])
                for j in range(self.config.pointwise_per_module)
            ],
        }

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def to_model_weights(self) -> ModelWeights:
        cfg = self.config
        modules = []
        for m in range(cfg.n_stored_modules):
            modules.append(
                ModuleWeights(
                    dw_kernel=np.asarray(self._params[f"m{m}.dw_kernel"].data, dtype=np.float32).copy(),
                    dw_bias=np.asarray(self._params[f"m{m}.dw_bias"].data, dtype=np.float32).copy(),
                    pw_weights=[
                        np.asarray(self._params[f"m{m}.pw{j}.weight"].data, dtype=np.float32).copy()
                        for j in range(cfg.pointwise_per_module)
                    ],
                    pw_biases=[
                        np.asarray(self._params[f"m{m}.pw{j}.bias"].data, dtype=np.float32).copy()
                        for j in range(cfg.pointwise_per_module)
                    ],
                )
            )
        return ModelWeights(config=cfg, modules=modules)


def init_weights(config: ModelConfig, seed: int) -> ModelWeights:
    """Fan-in scaled uniform init U(+-sqrt(6/fan_in)); biases start at zero.

    fan_in is k^2 for depthwise kernels and C for pointwise matrices.
    """
    rng = np.random.default_rng(seed)
    c, k = config.channels, config.dw_kernel
    dw_bound = np.sqrt(6.0 / (k * k))
    pw_bound = np.sqrt(6.0 / c)
    modules = []
    for _ in range(config.n_stored_modules):
        dw = rng.uniform(-dw_bound, dw_bound, size=(c, k, k)).astype(np.float32)
        pw_ws = [
            rng.uniform(-pw_bound, pw_bound, size=(c, c)).astype(np.float32)
            for _ in range(config.pointwise_per_module)
        ]
        modules.append(
            ModuleWeights(
                dw_kernel=dw,
                dw_bias=np.zeros(c, dtype=np.float32),
                pw_weights=pw_ws,
                pw_biases=[np.zeros(c, dtype=np.float32) for _ in range(config.pointwise_per_module)],
            )
        )
    return ModelWeights(config=config, modules=modules)


def zero_weights(config: ModelConfig) -> ModelWeights:
    c, k = config.channels, config.dw_kernel
    modules = [
        ModuleWeights(
            dw_kernel=np.zeros((c, k, k), dtype=np.float32),
            dw_bias=np.zeros(c, dtype=np.float32),
            pw_weights=[np.zeros((c, c), dtype=np.float32) for _ in range(config.pointwise_per_module)],
            pw_biases=[np.zeros(c, dtype=np.float32) for _ in range(config.pointwise_per_module)],
        )
        for _ in range(config.n_stored_modules)
    ]
    return ModelWeights(config=config, modules=modules)


def forward(weights: ModelWeights | TensorWeights, lr_input) -> Tensor:
    """Super-resolve a [B, C, h, w] batch to [B, C, s*h, s*w].

    The bicubic base is computed once and reused for the residual sum, so the
    zero-weight identity is exact.  Input gradients are not supported (the
    bicubic stage lives outside the tape).
    """
    tw = weights.tensors() if isinstance(weights, ModelWeights) else weights
    cfg = tw.config
    if isinstance(lr_input, Tensor):
        if lr_input.requires_grad:
            raise ValueError("gradients w.r.t. the LR input are not supported")
        x = lr_input.data
    else:
        x = np.asarray(lr_input)
    if x.ndim != 4:
        raise ShapeMismatchError(f"expected [B,C,h,w] input, got shape {x.shape}")
    if x.shape[1] != cfg.channels:
        raise ShapeMismatchError(
            f"input has {x.shape[1]} channels but the model expects {cfg.channels}"
        )
    wdtype = tw.module(0)["dw_kernel"].data.dtype
    base = Tensor(bicubic_upsample(x.astype(wdtype, copy=False), cfg.scale))

    h = base
    for i in range(cfg.n_modules):
        mod = tw.module(i)
        h = relu(depthwise_conv(h, mod["dw_kernel"], mod["dw_bias"]))
        for j, (pw, pb) in enumerate(mod["pw"]):
            h = pointwise_conv(h, pw, pb)
            last = i == cfg.n_modules - 1 and j == cfg.pointwise_per_module - 1
            if not (last and cfg.final_linear):
                h = relu(h)
    return add(base, h)


def predict(weights: ModelWeights, lr_input: np.ndarray) -> np.ndarray:
    """Inference convenience: ndarray in, ndarray out, no graph kept."""
    x = np.asarray(lr_input)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    out = forward(weights, x).data
    return out[0] if squeeze else out


def fd_check_arrays(config: ModelConfig, x: np.ndarray, seed: int) -> dict[str, np.ndarray]:
    """Float64 parameter arrays at a finite-difference-safe evaluation point.

    Central differences are only defined where the loss is smooth across the
    whole stencil, and at network scale a random draw always leaves some relu
    pre-activation within a perturbation's reach of the kink.  Kernels are
    drawn randomly; each relu layer's bias then saturates every channel to a
    seeded sign at distance >= 0.5 from zero.  The masks mix active and dead
    channels and stay fixed under coordinate perturbations far below
    0.5 / (max window L1 norm), which keeps the loss locally quadratic.
    """
    rng = np.random.default_rng(seed)
    weights = init_weights(config, seed=seed)
    arrays = {n: a.astype(np.float64) for n, a in weights.param_arrays().items()}
    c = config.channels

    def mixed_signs() -> np.ndarray:
        signs = rng.choice([-1.0, 1.0], size=c)
        if c > 1 and np.all(signs == signs[0]):
            signs[0] = -signs[0]
        return signs

    def channel_reach(pre: np.ndarray) -> np.ndarray:
        return np.abs(pre).max(axis=(0, 2, 3))

    h = bicubic_upsample(np.asarray(x, dtype=np.float64), config.scale)
    for i in range(config.n_modules):
        m = 0 if config.share_module_weights else i
        pre = depthwise_conv(Tensor(h), Tensor(arrays[f"m{m}.dw_kernel"]), Tensor(np.zeros(c))).data
        db = mixed_signs() * (channel_reach(pre) + 0.5)
        arrays[f"m{m}.dw_bias"] = db
        h = np.maximum(pre + db[None, :, None, None], 0.0)
        for j in range(config.pointwise_per_module):
            pre = pointwise_conv(Tensor(h), Tensor(arrays[f"m{m}.pw{j}.weight"]), Tensor(np.zeros(c))).data
            last = i == config.n_modules - 1 and j == config.pointwise_per_module - 1
            if last and config.final_linear:
                arrays[f"m{m}.pw{j}.bias"] = 0.1 * rng.standard_normal(c)
                h = pre + arrays[f"m{m}.pw{j}.bias"][None, :, None, None]
            else:
                pb = mixed_signs() * (channel_reach(pre) + 0.5)
                arrays[f"m{m}.pw{j}.bias"] = pb
                h = np.maximum(pre + pb[None, :, None, None], 0.0)
    return arrays


def fd_check_builder(config: ModelConfig, seed: int, height: int = 8, width: int = 8):
    """Deterministic full-model loss builder for :func:`autograd.grad_check`."""
    rng = np.random.default_rng(seed)
    x = rng.random((1, config.channels, height, width))
    arrays = fd_check_arrays(config, x, seed)
    target = rng.random((1, config.channels, height * config.scale, width * config.scale))

    def builder():
        tw = TensorWeights.from_arrays(config, arrays, requires_grad=True)
        loss = mse_loss(forward(tw, x), Tensor(target))
        return loss, tw.params()

    return builder


# ---------------------------------------------------------------------------
# Weight serialization
# ---------------------------------------------------------------------------

def save_weights(weights: ModelWeights, path) -> None:
    cfg = weights.config
    flags = (_FLAG_SHARE if cfg.share_module_weights else 0) | (
        _FLAG_FINAL_LINEAR if cfg.final_linear else 0
    )
    header = struct.pack(
        _WEIGHTS_HEADER_FMT,
        WEIGHTS_MAGIC,
        WEIGHTS_VERSION,
        cfg.channels,
        cfg.n_modules,
        cfg.dw_kernel,
        cfg.pointwise_per_module,
        cfg.scale,
        flags,
    )
    with open(path, "wb") as f:
        f.write(header)
        for arr in weights.param_arrays().values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path, expect_config: ModelConfig | None = None) -> ModelWeights:
    """Read a weight file; validates header, shape consistency and size.

    When ``expect_config`` is given, any disagreement (e.g. a 497-channel
    file loaded into a 480-channel pipeline) raises ShapeMismatchError.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != WEIGHTS_MAGIC:
        raise BadMagicError(f"{path}: not a weight file (magic {raw[:4]!r})")
    if len(raw) < _WEIGHTS_HEADER_SIZE:
        raise CorruptFileError(f"{path}: header truncated")
    _, version, c, n_mod, k, m_p, s, flags = struct.unpack(
        _WEIGHTS_HEADER_FMT, raw[:_WEIGHTS_HEADER_SIZE]
    )
    if version != WEIGHTS_VERSION:
        raise UnsupportedVersionError(f"{path}: weight format version {version} not supported")
    try:
        config = ModelConfig(
            channels=c,
            n_modules=n_mod,
            dw_kernel=k,
            pointwise_per_module=m_p,
            scale=s,
            share_module_weights=bool(flags & _FLAG_SHARE),
            final_linear=bool(flags & _FLAG_FINAL_LINEAR),
        )
    except ValueError as exc:
        raise CorruptFileError(f"{path}: invalid config in header: {exc}") from exc
    if expect_config is not None and config != expect_config:
        raise ShapeMismatchError(
            f"{path}: file config {config.to_dict()} does not match expected "
            f"{expect_config.to_dict()}"
        )
    expected_bytes = param_count(config) * 4
    got = len(raw) - _WEIGHTS_HEADER_SIZE
    if got != expected_bytes:
        raise CorruptFileError(
            f"{path}: payload holds {got} bytes, config requires {expected_bytes}"
        )

    offset = _WEIGHTS_HEADER_SIZE

    def take(shape) -> np.ndarray:
        nonlocal offset
        n = int(np.prod(shape)) * 4
        arr = np.frombuffer(raw[offset : offset + n], dtype="<f4").reshape(shape).copy()
        offset += n
        return arr

    modules = []
    for _ in range(config.n_stored_modules):
        dw = take((c, k, k))
        db = take((c,))
        pws, pbs = [], []
        for _ in range(config.pointwise_per_module):
            pws.append(take((c, c)))
            pbs.append(take((c,)))
        modules.append(
            ModuleWeights(dw_kernel=dw, dw_bias=db, pw_weights=pws, pw_biases=pbs)
        )
    try:
        return ModelWeights(config=config, modules=modules)
    except ValueError as exc:
        raise CorruptFileError(f"{path}: {exc}") from exc
