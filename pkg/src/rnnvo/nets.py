"""ConvLSTM cell, recurrent depth network and recurrent pose network."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import ShapeError, get_default_dtype
from .geometry import se3_exp

PLACEMENTS = ("encoder", "decoder", "full")

PAPER_ENCODER = (32, 64, 128, 256, 256, 256, 512)
PAPER_DECODER = (256, 128, 128, 128, 64, 32)
PAPER_FINAL_DECONV = 16
PAPER_POSE = (32, 64, 128, 256, 256, 256, 512)


@dataclass(frozen=True)
class NetConfig:
    height: int = 64
    width: int = 96
    encoder_channels: tuple = PAPER_ENCODER
    decoder_channels: tuple = PAPER_DECODER
    final_deconv_channels: int = PAPER_FINAL_DECONV
    pose_channels: tuple = PAPER_POSE
    width_scale: float = 1.0 / 8
    lstm_placement: str = "encoder"
    inv_depth_min: float = 1.0 / 80
    inv_depth_max: float = 1.0 / 0.5
    rotation_scale: float = 0.01
    forget_bias: float = 1.0
    head_init_scale: float = 0.01
    init_depth: float = 10.0
    bn_min_count: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lstm_placement not in PLACEMENTS:
            raise ValueError(f"lstm_placement must be one of {PLACEMENTS}")
        if len(self.encoder_channels) != len(self.decoder_channels) + 1:
            raise ValueError("decoder needs one level fewer than the encoder")
        if not 0 < self.inv_depth_min < self.inv_depth_max:
            raise ValueError("inverse depth range must satisfy 0 < min < max")
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))
        object.__setattr__(self, "pose_channels", tuple(self.pose_channels))

    @classmethod
    def paper(cls, **kw) -> "NetConfig":
        """Full-size network on 128 x 416 inputs."""
        return cls(height=128, width=416, width_scale=1.0, **kw)

    def scaled(self, c: int) -> int:
        return max(1, int(round(c * self.width_scale)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)

    def replace(self, **kw) -> "NetConfig":
        return replace(self, **kw)


def encoder_sizes(height: int, width: int, levels: int) -> List[Tuple[int, int]]:
    sizes = []
    h, w = height, width
    for _ in range(levels):
        h, w = -(-h // 2), -(-w // 2)
        sizes.append((h, w))
    return sizes


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class Module:
    """Container of named parameters, buffers and child modules."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._buffers: Dict[str, np.ndarray] = {}
        self._children: Dict[str, "Module"] = {}
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, dtype=get_default_dtype(), name=name)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self._buffers.items()}
        for name, child in self._children.items():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.named_parameters().items()}
        out.update({k: v for k, v in self.named_buffers().items()})
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params, buffers = self.named_parameters(), self.named_buffers()
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ShapeError(f"{k}: expected {t.shape}, got {state[k].shape}")
            t.data = np.array(state[k], dtype=t.dtype)
        for k, buf in buffers.items():
            buf[...] = state[k]


def _uniform(rng, shape, fan_in) -> np.ndarray:
    limit = np.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Conv(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1):
        super().__init__()
        self.stride = stride
        self.weight = self.add_param("weight", _uniform(rng, (cout, cin, k, k), cin * k * k))
        self.bias = self.add_param("bias", np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride)


class Deconv(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 2):
        super().__init__()
        self.stride = stride
        self.weight = self.add_param("weight", _uniform(rng, (cin, cout, k, k), cin * k * k / stride ** 2))
        self.bias = self.add_param("bias", np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, stride=self.stride)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, min_count: int = 2):
        super().__init__()
        self.momentum, self.eps, self.min_count = momentum, eps, min_count
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self._buffers["running_mean"] = np.zeros(channels)
        self._buffers["running_var"] = np.ones(channels)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self._buffers["running_mean"],
                              self._buffers["running_var"], self.training, self.momentum, self.eps,
                              self.min_count)


@dataclass
class ConvLSTMState:
    h: Tensor
    c: Tensor

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ShapeError(f"hidden {self.h.shape} and cell {self.c.shape} shapes differ")

    @classmethod
    def zeros(cls, channels: int, height: int, width: int, dtype=None) -> "ConvLSTMState":
        z = np.zeros((1, channels, height, width))
        return cls(Tensor(z, dtype=dtype), Tensor(z, dtype=dtype))


class ConvLSTMCell(Module):
    """Gates i, f, o, g from one 3x3 convolution over ``concat(x, h)``."""

    def __init__(self, rng, cin: int, channels: int, forget_bias: float = 1.0):
        super().__init__()
        self.channels = channels
        fan_in = (cin + channels) * 9
        self.weight = self.add_param("weight", _uniform(rng, (4 * channels, cin + channels, 3, 3), fan_in))
        bias = np.zeros(4 * channels)
        bias[channels:2 * channels] = forget_bias
        self.bias = self.add_param("bias", bias)

    def __call__(self, x: Tensor, state: Optional[ConvLSTMState]) -> Tuple[Tensor, ConvLSTMState]:
        n, _, h, w = x.shape
        if state is None:
            state = ConvLSTMState.zeros(self.channels, h, w, dtype=x.dtype)
        if state.h.shape[2:] != (h, w):
            raise ShapeError(f"state {state.h.shape} does not match input {x.shape}")
        z = ops.conv2d(ops.concat([x, state.h], axis=1), self.weight, self.bias)
        c = self.channels
        i = ops.sigmoid(z[:, 0:c])
        f = ops.sigmoid(z[:, c:2 * c])
        o = ops.sigmoid(z[:, 2 * c:3 * c])
        g = ops.tanh(z[:, 3 * c:4 * c])
        c_new = ops.add(ops.mul(f, state.c), ops.mul(i, g))
        h_new = ops.mul(o, ops.tanh(c_new))
        return h_new, ConvLSTMState(h_new, c_new)


def convlstm_step(cell: ConvLSTMCell, x: Tensor, state: Optional[ConvLSTMState]):
    """One recurrent step: ``(y, state')`` with ``y == state'.h``."""
    return cell(x, state)


class ConvBlock(Module):
    """Convolution (or deconvolution) followed by batch norm and an activation."""

    def __init__(self, rng, cin, cout, stride=1, deconv=False, activation="leaky_relu", bn_min_count=2):
        super().__init__()
        self.conv = self.add_child("conv", (Deconv if deconv else Conv)(rng, cin, cout, 3, stride))
        self.bn = self.add_child("bn", BatchNorm(cout, min_count=bn_min_count))
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return ops.leaky_relu(y) if self.activation == "leaky_relu" else ops.relu(y)


def _crop(x: Tensor, size: Tuple[int, int]) -> Tensor:
    if x.shape[2:] == tuple(size):
        return x
    return x[:, :, :size[0], :size[1]]


def image_to_nchw(image) -> Tensor:
    """(H, W, C) array or tensor to a (1, C, H, W) tensor."""
    if isinstance(image, Tensor):
        if image.ndim == 4:
            return image
        return ops.reshape(ops.transpose(image, (2, 0, 1)), (1,) + (image.shape[2], image.shape[0], image.shape[1]))
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[..., None]
    return Tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)[None]))


def frames_to_nchw(frames) -> Tensor:
    """A sequence of (H, W, C) frames to one (T, C, H, W) batch."""
    if isinstance(frames, Tensor):
        return frames if frames.ndim == 4 else image_to_nchw(frames)
    parts = [image_to_nchw(f) for f in frames]
    if any(isinstance(f, Tensor) and f.requires_grad for f in frames):
        return ops.concat(parts, axis=0)
    return Tensor(np.concatenate([p.data for p in parts], axis=0))


def run_cell(cell: ConvLSTMCell, x: Tensor, state: Optional[ConvLSTMState]):
    """Unroll a cell over the batch axis, read as time; returns ``(outputs, last state)``."""
    if x.shape[0] == 1:
        return cell(x, state)
    outs = []
    for t in range(x.shape[0]):
        y, state = cell(x[t:t + 1], state)
        outs.append(y)
    return ops.concat(outs, axis=0), state


class DepthNet(Module):
    """U-shaped recurrent depth network emitting inverse depth."""

    def __init__(self, config: NetConfig = NetConfig()):
        super().__init__()
        self.config = cfg = config
        rng = np.random.default_rng(cfg.seed)
        enc = [cfg.scaled(c) for c in cfg.encoder_channels]
        dec = [cfg.scaled(c) for c in cfg.decoder_channels]
        fin = cfg.scaled(cfg.final_deconv_channels)
        self.enc_channels, self.dec_channels, self.final_channels = enc, dec, fin
        self.levels = len(enc)
        self.sizes = encoder_sizes(cfg.height, cfg.width, self.levels)
        enc_lstm = cfg.lstm_placement in ("encoder", "full")
        dec_lstm = cfg.lstm_placement in ("decoder", "full")
        cin = 3
        self.enc_blocks, self.enc_lstms = [], []
        for k, c in enumerate(enc):
            self.enc_blocks.append(self.add_child(f"enc{k}", ConvBlock(rng, cin, c, stride=2, bn_min_count=cfg.bn_min_count)))
            self.enc_lstms.append(self.add_child(f"enc{k}_lstm", ConvLSTMCell(rng, c, c, cfg.forget_bias))
                                  if enc_lstm else None)
            cin = c
        self.up_blocks, self.merge_blocks, self.dec_lstms = [], [], []
        for j, c in enumerate(dec):
            skip = enc[self.levels - 2 - j]
            self.up_blocks.append(self.add_child(f"up{j}", ConvBlock(rng, cin, c, stride=2, deconv=True,
                                                                 bn_min_count=cfg.bn_min_count)))
            self.merge_blocks.append(self.add_child(f"merge{j}", ConvBlock(rng, c + skip, c, bn_min_count=cfg.bn_min_count)))
            self.dec_lstms.append(self.add_child(f"dec{j}_lstm", ConvLSTMCell(rng, c, c, cfg.forget_bias))
                                  if dec_lstm else None)
            cin = c
        self.final_up = self.add_child("final_up", ConvBlock(rng, cin, fin, stride=2, deconv=True,
                                                                  bn_min_count=cfg.bn_min_count))
        self.final_lstm = (self.add_child("final_lstm", ConvLSTMCell(rng, fin, fin, cfg.forget_bias))
                           if dec_lstm else None)
        self.out = self.add_child("out", Conv(rng, fin, 1, 3, 1))
        # a near-constant initial prediction keeps early photometric gradients coherent
        self.out.weight.data *= cfg.head_init_scale
        u = (1.0 / cfg.init_depth - cfg.inv_depth_min) / (cfg.inv_depth_max - cfg.inv_depth_min)
        u = float(np.clip(u, 1e-3, 1 - 1e-3))
        self.out.bias.data[...] = np.log(u / (1.0 - u))

    @property
    def cells(self) -> List[ConvLSTMCell]:
        return [c for c in self.enc_lstms + self.dec_lstms + [self.final_lstm] if c is not None]

    def __call__(self, image, states: Optional[Sequence] = None, return_features: bool = False):
        """Return ``(inverse depth (H, W), sigmoid output (1,1,H,W), states')`` for one frame."""
        out = self.forward(image_to_nchw(image), states, return_features)
        xi = ops.reshape(out[0], out[0].shape[1:]) if out[0].shape[0] == 1 else out[0]
        return (xi,) + tuple(out[1:])

    def forward(self, x: Tensor, states: Optional[Sequence] = None, return_features: bool = False):
        """Frames stacked on the batch axis are consecutive time steps.

        Plain layers see the whole stack at once, so batch-norm statistics pool
        over time and space; ConvLSTM cells step through it in order. Returns
        inverse depth of shape (T, H, W).
        """
        cfg = self.config
        if x.shape[1:] != (3, cfg.height, cfg.width):
            raise ShapeError(f"depth net expects 3x{cfg.height}x{cfg.width}, got {x.shape[1:]}")
        cells = self.cells
        states = list(states) if states is not None else [None] * len(cells)
        if len(states) != len(cells):
            raise ShapeError(f"expected {len(cells)} states, got {len(states)}")
        new_states = []
        it = iter(states)

        skips = []
        for block, cell in zip(self.enc_blocks, self.enc_lstms):
            e = block(x)
            skips.append(e)
            if cell is not None:
                e, st = run_cell(cell, e, next(it))
                new_states.append(st)
            x = e
        for j, (up, merge, cell) in enumerate(zip(self.up_blocks, self.merge_blocks, self.dec_lstms)):
            skip = skips[self.levels - 2 - j]
            u = _crop(up(x), skip.shape[2:])
            x = merge(ops.concat([u, skip], axis=1))
            if cell is not None:
                x, st = run_cell(cell, x, next(it))
                new_states.append(st)
        x = _crop(self.final_up(x), (cfg.height, cfg.width))
        if self.final_lstm is not None:
            x, st = run_cell(self.final_lstm, x, next(it))
            new_states.append(st)
        sig = ops.sigmoid(self.out(x))
        n = x.shape[0]
        xi = ops.add(ops.mul(ops.reshape(sig, (n, cfg.height, cfg.width)), cfg.inv_depth_max - cfg.inv_depth_min),
                     cfg.inv_depth_min)
        if return_features:
            return xi, sig, new_states, skips
        return xi, sig, new_states


class PoseNet(Module):
    """Recurrent VGG-style pose regressor over ``concat(image, depth)``."""

    def __init__(self, config: NetConfig = NetConfig()):
        super().__init__()
        self.config = cfg = config
        rng = np.random.default_rng(cfg.seed + 1)
        chans = [cfg.scaled(c) for c in cfg.pose_channels]
        cin = 4
        self.blocks, self.lstms = [], []
        for k, c in enumerate(chans):
            self.blocks.append(self.add_child(f"conv{k}", ConvBlock(rng, cin, c, stride=2, activation="relu",
                                                                    bn_min_count=cfg.bn_min_count)))
            self.lstms.append(self.add_child(f"conv{k}_lstm", ConvLSTMCell(rng, c, c, cfg.forget_bias)))
            cin = c
        self.out = self.add_child("out", Conv(rng, cin, 6, 1, 1))
        self.out.weight.data *= cfg.head_init_scale

    @property
    def cells(self) -> List[ConvLSTMCell]:
        return list(self.lstms)

    def __call__(self, image, depth, states: Optional[Sequence] = None):
        """Return ``(6-vector (rotation, translation), 4x4 matrix, states')`` for one frame."""
        dep = depth if isinstance(depth, Tensor) else Tensor(depth)
        vecs, mats, new_states = self.forward(image_to_nchw(image), ops.reshape(dep, (1,) + dep.shape[-2:]), states)
        return ops.reshape(vecs, (6,)), mats[0], new_states

    def forward(self, images: Tensor, depths: Tensor, states: Optional[Sequence] = None):
        """Time-stacked ``(T, 3, H, W)`` frames and ``(T, H, W)`` depths to ``(T, 6)`` vectors and T matrices."""
        cfg = self.config
        if depths.ndim != 3 or depths.shape[0] != images.shape[0]:
            raise ShapeError(f"expected one (H, W) depth per frame, got {depths.shape}")
        dep = ops.reshape(depths, (depths.shape[0], 1) + depths.shape[1:])
        if images.shape[2:] != dep.shape[2:]:
            raise ShapeError(f"image {images.shape} and depth {dep.shape} sizes differ")
        x = ops.concat([images, dep], axis=1)
        if x.shape[1] != 4:
            raise ShapeError(f"pose net expects 4 input channels, got {x.shape[1]}")
        states = list(states) if states is not None else [None] * len(self.lstms)
        if len(states) != len(self.lstms):
            raise ShapeError(f"expected {len(self.lstms)} states, got {len(states)}")
        new_states = []
        for block, cell, st in zip(self.blocks, self.lstms, states):
            x, st = run_cell(cell, block(x), st)
            new_states.append(st)
        raw = ops.mean(self.out(x), axis=(2, 3))
        scale = np.array([cfg.rotation_scale] * 3 + [1.0] * 3)
        vecs = ops.mul(raw, scale)
        if vecs.shape[0] == 1:
            return vecs, [se3_exp(ops.reshape(vecs, (6,)))], new_states
        return vecs, [se3_exp(vecs[t]) for t in range(vecs.shape[0])], new_states


@dataclass
class RolloutStep:
    inverse_depth: Tensor
    pose_vector: Tensor
    pose_matrix: Tensor


class RecurrentModel:
    """Depth and pose networks run together over a stream of frames."""

    def __init__(self, config: NetConfig = NetConfig()):
        self.config = config
        self.depth_net = DepthNet(config)
        self.pose_net = PoseNet(config)
        self.reset()

    def reset(self) -> None:
        self.depth_states = None
        self.pose_states = None

    def named_parameters(self) -> Dict[str, Tensor]:
        out = self.depth_net.named_parameters("depth.")
        out.update(self.pose_net.named_parameters("pose."))
        return out

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return self.depth_net.parameter_count() + self.pose_net.parameter_count()

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {f"depth.{k}": v for k, v in self.depth_net.state_dict().items()}
        out.update({f"pose.{k}": v for k, v in self.pose_net.state_dict().items()})
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.depth_net.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("depth.")})
        self.pose_net.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("pose.")})

    def train(self, mode: bool = True) -> "RecurrentModel":
        self.depth_net.train(mode)
        self.pose_net.train(mode)
        return self

    def eval(self) -> "RecurrentModel":
        return self.train(False)

    def step(self, image) -> RolloutStep:
        """Advance the hidden states by one frame."""
        xi, _, self.depth_states = self.depth_net(image, self.depth_states)
        vec, mat, self.pose_states = self.pose_net(image, ops.reciprocal(xi), self.pose_states)
        return RolloutStep(xi, vec, mat)

    def rollout(self, images: Sequence) -> List[RolloutStep]:
        """Run a whole sequence from zero hidden states.

        In training mode the frames go through as one time-stacked batch, so
        batch norm pools statistics over the sequence. In inference mode the
        result equals calling :meth:`step` frame by frame, and is computed
        that way.
        """
        self.reset()
        if not self.depth_net.training:
            return [self.step(im) for im in images]
        x = frames_to_nchw(images)
        xi, _, self.depth_states = self.depth_net.forward(x)
        vecs, mats, self.pose_states = self.pose_net.forward(x, ops.reciprocal(xi))
        return [RolloutStep(xi[t], vecs[t], mats[t]) for t in range(x.shape[0])]
