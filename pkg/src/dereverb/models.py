"""Model architectures: per-frequency RIR estimator, residual Bi-GRU dry
estimator, compact U-net, and the shared-trunk joint model with the
differentiable reverberant reconstruction.

Each model exposes `kind`, `config_dict()`, `params()` (stable name order,
used by checkpoints) and `forward`. Inputs are log-magnitude spectrograms
[frames x bins].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor, as_tensor
from .errors import ShapeMismatch, WrongFrameCount

# (time extent, freq extent, output channels); the final channel count
# becomes the time axis of the estimated impulse response.
PAPER_RIR_LAYERS = ((9, 1, 16), (14, 1, 32), (27, 1, 64), (27, 1, 32),
                    (27, 1, 16), (28, 1, 4), (187, 1, 126))
DESK_RIR_LAYERS = ((9, 1, 8), (14, 1, 8), (27, 1, 8), (27, 1, 8),
                   (27, 1, 8), (28, 1, 4), (187, 1, 126))

MODEL_KINDS = ("rir", "dry-gru", "dry-unet", "joint")


def _check_closure(layers, input_frames):
    span = sum(kt - 1 for kt, _, _ in layers)
    if span != input_frames - 1:
        raise ValueError(
            f"conv stack spans {span + 1} frames but input has {input_frames}; "
            "valid convolutions must reduce the time axis to exactly 1")
    if any(kf != 1 for _, kf, _ in layers):
        raise ValueError("RIR stack kernels must span a single frequency bin")


def _conv_stack_params(rng, layers, c_in, prefix):
    params = []
    for i, (kt, kf, c_out) in enumerate(layers):
        kernel = Tensor(nn.glorot_uniform(rng, (kt, kf, c_in, c_out)))
        bias = Tensor(np.zeros(c_out))
        params.append((f"{prefix}{i}.kernel", kernel))
        params.append((f"{prefix}{i}.bias", bias))
        c_in = c_out
    return params


def _run_conv_stack(x, params, n_layers):
    # ELU between layers, ReLU after the last (non-negative magnitudes)
    h = x
    for i in range(n_layers):
        h = nn.conv2d(h, params[2 * i][1], params[2 * i + 1][1])
        h = ad.elu(h) if i < n_layers - 1 else ad.relu(h)
    return h


def _channels_to_time(h):
    # [1, F, C] -> [C, F]: the channel axis becomes the RIR time axis.
    _, f, c = h.data.shape
    return ad.transpose(ad.reshape(h, (f, c)))


@dataclass
class RirEstimatorConfig:
    layers: tuple = PAPER_RIR_LAYERS
    input_frames: int = 313
    bins: int = 257

    def to_dict(self):
        return {"layers": [list(l) for l in self.layers],
                "input_frames": self.input_frames, "bins": self.bins}

    @classmethod
    def from_dict(cls, d):
        return cls(layers=tuple(tuple(l) for l in d["layers"]),
                   input_frames=d["input_frames"], bins=d["bins"])


class RirEstimator:
    """Stack of per-frequency valid convolutions closing the time axis.

    ELU after every layer except the last, which takes a ReLU so magnitudes
    stay non-negative; the surviving channel axis is transposed into the
    impulse-response time axis.
    """

    kind = "rir"

    def __init__(self, config: RirEstimatorConfig, rng):
        _check_closure(config.layers, config.input_frames)
        self.config = config
        self._params = _conv_stack_params(rng, config.layers, 1, "conv")

    def config_dict(self):
        return self.config.to_dict()

    def params(self):
        return list(self._params)

    @property
    def rir_frames(self):
        return self.config.layers[-1][2]

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        if x.data.ndim == 2:
            x = ad.reshape(x, (*x.data.shape, 1))
        if x.data.shape[0] != self.config.input_frames:
            raise WrongFrameCount(
                f"expected {self.config.input_frames} frames, got {x.data.shape[0]}")
        h = _run_conv_stack(x, self._params, len(self.config.layers))
        return _channels_to_time(h)


@dataclass
class DryGruConfig:
    hidden: int = 64          # per direction; 380 at paper scale
    layers: int = 3
    bins: int = 257

    def to_dict(self):
        return {"hidden": self.hidden, "layers": self.layers, "bins": self.bins}

    @classmethod
    def from_dict(cls, d):
        return cls(hidden=d["hidden"], layers=d["layers"], bins=d["bins"])


class DryGruEstimator:
    """Residual bidirectional GRU stack over spectrogram frames.

    The input projection lifts each frame to twice the hidden width so the
    concatenated directions can be added back residually; a final projection
    returns to the bin count. Frame count is preserved for any input length.
    """

    kind = "dry-gru"

    def __init__(self, config: DryGruConfig, rng):
        self.config = config
        width = 2 * config.hidden
        self._params = [
            ("in.weight", Tensor(nn.glorot_uniform(rng, (config.bins, width)))),
            ("in.bias", Tensor(np.zeros(width))),
        ]
        self.grus = []
        for i in range(config.layers):
            fwd = nn.GruParams(width, config.hidden, rng)
            bwd = nn.GruParams(width, config.hidden, rng)
            self.grus.append((fwd, bwd))
            for direction, p in (("fwd", fwd), ("bwd", bwd)):
                for name in nn.GruParams.FIELDS:
                    self._params.append(
                        (f"gru{i}.{direction}.{name}", getattr(p, name)))
        self._params += [
            ("out.weight", Tensor(nn.glorot_uniform(rng, (width, config.bins)))),
            ("out.bias", Tensor(np.zeros(config.bins))),
        ]
        self._by_name = dict(self._params)

    def config_dict(self):
        return self.config.to_dict()

    def params(self):
        return list(self._params)

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        if x.data.ndim != 2 or x.data.shape[1] != self.config.bins:
            raise ShapeMismatch(
                f"expected [T, {self.config.bins}] input, got {x.data.shape}")
        h = nn.linear(x, self._by_name["in.weight"], self._by_name["in.bias"])
        for fwd, bwd in self.grus:
            h = ad.add(h, nn.bigru_layer(h, fwd, bwd))
        return nn.linear(h, self._by_name["out.weight"], self._by_name["out.bias"])


@dataclass
class UnetConfig:
    depth: int = 4
    base_channels: int = 8
    kernel: int = 4
    stride: int = 2

    def to_dict(self):
        return {"depth": self.depth, "base_channels": self.base_channels,
                "kernel": self.kernel, "stride": self.stride}

    @classmethod
    def from_dict(cls, d):
        return cls(depth=d["depth"], base_channels=d["base_channels"],
                   kernel=d["kernel"], stride=d["stride"])


class UnetEstimator:
    """Compact encoder/decoder with skip concatenation.

    The input is zero-padded up to multiples of stride**depth, halved per
    encoder level, mirrored back with transposed convolutions, and cropped to
    the original extents. The last decoder layer is linear so negative
    log-magnitudes are reachable.
    """

    kind = "dry-unet"

    def __init__(self, config: UnetConfig, rng):
        self.config = config
        k, b = config.kernel, config.base_channels
        self._params = []
        c_in = 1
        self.enc_channels = []
        for i in range(config.depth):
            c_out = b * (2 ** i)
            self._params.append(
                (f"enc{i}.kernel", Tensor(nn.glorot_uniform(rng, (k, k, c_in, c_out)))))
            self._params.append((f"enc{i}.bias", Tensor(np.zeros(c_out))))
            self.enc_channels.append(c_out)
            c_in = c_out
        for i in reversed(range(config.depth)):
            c_out = 1 if i == 0 else self.enc_channels[i - 1]
            # decoder level i consumes the skip-augmented width
            c_dec_in = self.enc_channels[i] if i == config.depth - 1 \
                else 2 * self.enc_channels[i]
            self._params.append(
                (f"dec{i}.kernel", Tensor(nn.glorot_uniform(rng, (k, k, c_out, c_dec_in)))))
            self._params.append((f"dec{i}.bias", Tensor(np.zeros(c_out))))
        self._by_name = dict(self._params)

    def config_dict(self):
        return self.config.to_dict()

    def params(self):
        return list(self._params)

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        if x.data.ndim != 2:
            raise ShapeMismatch(f"expected [T, F] input, got {x.data.shape}")
        t, f = x.data.shape
        unit = self.config.stride ** self.config.depth
        pad_t = (-t) % unit
        pad_f = (-f) % unit
        h = ad.reshape(x, (t, f, 1))
        if pad_t or pad_f:
            h = ad.pad_tail(h, pad_t, pad_f)

        s = (self.config.stride, self.config.stride)
        skips = []
        for i in range(self.config.depth):
            h = ad.elu(nn.conv2d(h, self._by_name[f"enc{i}.kernel"],
                                 self._by_name[f"enc{i}.bias"],
                                 stride=s, padding="same"))
            skips.append(h)

        trim = (self.config.kernel - self.config.stride) // 2
        for i in reversed(range(self.config.depth)):
            t_in, f_in = h.data.shape[:2]
            h = nn.conv2d_transposed(h, self._by_name[f"dec{i}.kernel"],
                                     self._by_name[f"dec{i}.bias"], stride=s)
            t_up = t_in * self.config.stride
            f_up = f_in * self.config.stride
            h = ad.slice2d(h, trim, trim + t_up, trim, trim + f_up)
            if i > 0:
                h = ad.elu(h)
                h = ad.concat([h, skips[i - 1]], axis=2)
        h = ad.reshape(h, h.data.shape[:2])
        return ad.crop(h, t, f)


@dataclass
class JointConfig:
    rir_layers: tuple = PAPER_RIR_LAYERS
    trunk_depth: int = 2
    hidden: int = 64
    gru_layers: int = 3
    input_frames: int = 313
    bins: int = 257
    weights: tuple = (1.0, 1.0, 1.0)

    def to_dict(self):
        return {"rir_layers": [list(l) for l in self.rir_layers],
                "trunk_depth": self.trunk_depth, "hidden": self.hidden,
                "gru_layers": self.gru_layers, "input_frames": self.input_frames,
                "bins": self.bins, "weights": list(self.weights)}

    @classmethod
    def from_dict(cls, d):
        return cls(rir_layers=tuple(tuple(l) for l in d["rir_layers"]),
                   trunk_depth=d["trunk_depth"], hidden=d["hidden"],
                   gru_layers=d["gru_layers"], input_frames=d["input_frames"],
                   bins=d["bins"], weights=tuple(d["weights"]))


class JointModel:
    """Shared trunk with an impulse-response head and a dry-speech head.

    The trunk is the leading slice of the RIR conv stack; the RIR head runs
    the remainder, and the dry head feeds the trunk features (flattened per
    frame) through a residual Bi-GRU. The trunk's valid convolutions shave
    frames off the time axis, so the dry estimate is edge-replicated back to
    the input frame count before the loss.
    """

    kind = "joint"

    def __init__(self, config: JointConfig, rng):
        _check_closure(config.rir_layers, config.input_frames)
        if not 0 < config.trunk_depth < len(config.rir_layers):
            raise ValueError("trunk depth must split the conv stack")
        w = config.weights
        if len(w) != 3 or any(x < 0 for x in w) or not any(w):
            raise ValueError("loss weights must be non-negative, not all zero")
        self.config = config
        trunk_layers = config.rir_layers[:config.trunk_depth]
        head_layers = config.rir_layers[config.trunk_depth:]
        self._trunk = _conv_stack_params(rng, trunk_layers, 1, "trunk")
        self._rir_head = _conv_stack_params(
            rng, head_layers, trunk_layers[-1][2], "rir")

        self.trunk_frames = config.input_frames - sum(
            kt - 1 for kt, _, _ in trunk_layers)
        trunk_width = config.bins * trunk_layers[-1][2]
        width = 2 * config.hidden
        self._dry_head = [
            ("dry.in.weight", Tensor(nn.glorot_uniform(rng, (trunk_width, width)))),
            ("dry.in.bias", Tensor(np.zeros(width))),
        ]
        self.grus = []
        for i in range(config.gru_layers):
            fwd = nn.GruParams(width, config.hidden, rng)
            bwd = nn.GruParams(width, config.hidden, rng)
            self.grus.append((fwd, bwd))
            for direction, p in (("fwd", fwd), ("bwd", bwd)):
                for name in nn.GruParams.FIELDS:
                    self._dry_head.append(
                        (f"dry.gru{i}.{direction}.{name}", getattr(p, name)))
        self._dry_head += [
            ("dry.out.weight", Tensor(nn.glorot_uniform(rng, (width, config.bins)))),
            ("dry.out.bias", Tensor(np.zeros(config.bins))),
        ]
        self._by_name = dict(self._trunk + self._rir_head + self._dry_head)

    def config_dict(self):
        return self.config.to_dict()

    def params(self):
        return self._trunk + self._rir_head + self._dry_head

    @property
    def rir_frames(self):
        return self.config.rir_layers[-1][2]

    def forward(self, x):
        x = as_tensor(x)
        if x.data.ndim == 2:
            x = ad.reshape(x, (*x.data.shape, 1))
        if x.data.shape[0] != self.config.input_frames:
            raise WrongFrameCount(
                f"expected {self.config.input_frames} frames, got {x.data.shape[0]}")
        trunk_n = self.config.trunk_depth
        h = x
        for i in range(trunk_n):
            h = ad.elu(nn.conv2d(h, self._trunk[2 * i][1], self._trunk[2 * i + 1][1]))

        head_n = len(self.config.rir_layers) - trunk_n
        r = _run_conv_stack(h, self._rir_head, head_n)
        rir_est = _channels_to_time(r)

        t, f, c = h.data.shape
        d = ad.reshape(h, (t, f * c))
        d = nn.linear(d, self._by_name["dry.in.weight"], self._by_name["dry.in.bias"])
        for fwd, bwd in self.grus:
            d = ad.add(d, nn.bigru_layer(d, fwd, bwd))
        d = nn.linear(d, self._by_name["dry.out.weight"], self._by_name["dry.out.bias"])
        missing = self.config.input_frames - t
        dry_est = ad.pad_rows_edge(d, missing // 2, missing - missing // 2)
        return dry_est, rir_est


# ---------------------------------------------------------------------------
# Reverberant reconstruction
# ---------------------------------------------------------------------------

def _frame_convolve(rir_mag: np.ndarray, dry_mag: np.ndarray) -> np.ndarray:
    """out[t,f] = sum_tau rir[tau,f] * dry[t-tau,f], truncated to dry frames."""
    k = rir_mag.shape[0]
    padded = np.concatenate([np.zeros((k - 1, dry_mag.shape[1])), dry_mag])
    windows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=0)
    return np.einsum("tfw,wf->tf", windows, rir_mag[::-1])


def reconstruct_reverb(rir_mag_est, dry_mag) -> Tensor:
    """Per-frequency causal convolution of the estimated RIR magnitude with a
    dry magnitude spectrogram, differentiable in both arguments."""
    rir_mag_est, dry_mag = as_tensor(rir_mag_est), as_tensor(dry_mag)
    if rir_mag_est.data.ndim != 2 or dry_mag.data.ndim != 2 \
            or rir_mag_est.data.shape[1] != dry_mag.data.shape[1]:
        raise ShapeMismatch(
            f"rir {rir_mag_est.data.shape} vs dry {dry_mag.data.shape}")
    rir, dry = rir_mag_est.data, dry_mag.data
    k = rir.shape[0]
    out = _frame_convolve(rir, dry)

    def bwd(g):
        padded = np.concatenate([np.zeros((k - 1, dry.shape[1])), dry])
        windows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=0)
        g_rir = np.einsum("tfw,tf->wf", windows, g)[::-1]
        ad.accumulate(rir_mag_est, g_rir)
        g_pad = np.concatenate([g, np.zeros((k - 1, g.shape[1]))])
        g_windows = np.lib.stride_tricks.sliding_window_view(g_pad, k, axis=0)
        ad.accumulate(dry_mag, np.einsum("tfw,wf->tf", g_windows, rir))

    return ad._node(out, (rir_mag_est, dry_mag), bwd)


def joint_loss(dry_est, rir_est, example, weights=(1.0, 1.0, 1.0)):
    """Weighted three-term objective.

    Returns (total, l_dry, l_rir, l_rec): MSE on the dry log-magnitude, MSE
    on the RIR magnitude, and MSE between the reverberant target and the
    estimated RIR convolved with the exp-domain dry target.
    """
    w_dry, w_rir, w_rec = weights
    l_dry = ad.mse(dry_est, example.dry_target_logmag)
    l_rir = ad.mse(rir_est, example.rir_target_mag)
    reconstruction = reconstruct_reverb(rir_est, np.exp(example.dry_target_logmag))
    l_rec = ad.mse(reconstruction, example.reverb_target_mag)
    total = ad.add(ad.add(ad.mul(l_dry, w_dry), ad.mul(l_rir, w_rir)),
                   ad.mul(l_rec, w_rec))
    return total, l_dry, l_rir, l_rec


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_model(kind: str, scale: str = "desk", rng=None, weights=None):
    """Construct a model at the given scale ("desk" shrinks widths; "paper"
    keeps every published dimension)."""
    if rng is None:
        rng = np.random.default_rng(0)
    if scale not in ("desk", "paper"):
        raise ValueError(f"unknown scale {scale!r}")
    paper = scale == "paper"
    if kind == "rir":
        layers = PAPER_RIR_LAYERS if paper else DESK_RIR_LAYERS
        return RirEstimator(RirEstimatorConfig(layers=layers), rng)
    if kind == "dry-gru":
        return DryGruEstimator(DryGruConfig(hidden=380 if paper else 64), rng)
    if kind == "dry-unet":
        return UnetEstimator(UnetConfig(), rng)
    if kind == "joint":
        config = JointConfig(
            rir_layers=PAPER_RIR_LAYERS if paper else DESK_RIR_LAYERS,
            hidden=380 if paper else 64)
        if weights is not None:
            config.weights = tuple(weights)
        return JointModel(config, rng)
    raise ValueError(f"unknown model kind {kind!r}")


def build_model_from_config(kind: str, config: dict, rng=None):
    if rng is None:
        rng = np.random.default_rng(0)
    if kind == "rir":
        return RirEstimator(RirEstimatorConfig.from_dict(config), rng)
    if kind == "dry-gru":
        return DryGruEstimator(DryGruConfig.from_dict(config), rng)
    if kind == "dry-unet":
        return UnetEstimator(UnetConfig.from_dict(config), rng)
    if kind == "joint":
        return JointModel(JointConfig.from_dict(config), rng)
    raise ValueError(f"unknown model kind {kind!r}")


def build_tiny_model(kind: str, rng=None):
    """Miniature configurations for gradient checking and smoke training."""
    if rng is None:
        rng = np.random.default_rng(0)
    if kind == "rir":
        return RirEstimator(RirEstimatorConfig(
            layers=((3, 1, 2), (2, 1, 4), (5, 1, 4)), input_frames=8, bins=5), rng)
    if kind == "dry-gru":
        return DryGruEstimator(DryGruConfig(hidden=3, layers=2, bins=5), rng)
    if kind == "dry-unet":
        return UnetEstimator(UnetConfig(depth=2, base_channels=2), rng)
    if kind == "joint":
        return JointModel(JointConfig(
            rir_layers=((3, 1, 2), (3, 1, 2), (3, 1, 2), (2, 1, 4)),
            trunk_depth=2, hidden=3, gru_layers=1, input_frames=8, bins=5), rng)
    raise ValueError(f"unknown model kind {kind!r}")


def tiny_input_shape(kind: str):
    if kind == "rir":
        return (8, 5)
    if kind == "dry-gru":
        return (6, 5)
    if kind == "dry-unet":
        return (16, 16)
    if kind == "joint":
        return (8, 5)
    raise ValueError(f"unknown model kind {kind!r}")
