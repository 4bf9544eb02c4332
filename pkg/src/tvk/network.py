"""Desk-scale two-view depth and motion networks.

Three components chained at inference time: a bootstrap stage computing
initial optical flow and then depth/normals/motion from the image pair, a
weight-shared iterative stage that refines those estimates (fed with
geometric conversions of the previous prediction), and a refinement stage
that upsamples the low-resolution depth to full resolution.

Each stage is an encoder-decoder over 1D convolution pairs (a wide-kernel
first level, stride 2 per level) with skip connections and stride-2
transposed convolutions in the decoder. The depth/motion encoder-decoders
carry an extra head (global average pool + 3 fully connected layers) that
outputs the angle-axis rotation, a unit-norm translation and a positive
depth scale factor.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .geometry import (
    CameraMotion,
    DegenerateMotionError,
    FlowField,
    Intrinsics,
    InverseDepthMap,
    depth_from_flow_motion,
    flow_from_depth_motion,
)

XI_FLOOR = 1e-6  # floor for inverse depth when converting to metric depth


@dataclass
class NetConfig:
    width: int = 64
    height: int = 48
    channels: tuple[int, ...] = (16, 32, 64, 128)
    first_kernel: int = 7
    kernel: int = 3
    refine_factor: int = 4
    refine_channels: tuple[int, ...] = (8, 16)
    iterations: int = 3
    use_flow_confidence_input: bool = True
    single_image: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        levels = len(self.channels)
        if self.width % (2 ** levels) or self.height % (2 ** levels):
            raise ValueError(
                f"resolution {self.width}x{self.height} not divisible by "
                f"2^{levels}")
        if self.first_kernel % 2 == 0 or self.kernel % 2 == 0:
            raise ValueError("1D filter lengths must be odd")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @staticmethod
    def from_dict(d: dict) -> "NetConfig":
        cfg = NetConfig()
        unknown = set(d) - set(cfg.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown net config keys: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("channels", "refine_channels"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return replace(cfg, **kwargs)


@dataclass
class Prediction:
    """Network outputs for one image pair (numpy, image layout H x W x C).

    ``xi`` is the raw depth-head output; geometric consumers clamp it to
    be nonnegative via ``inverse_depth``. ``t`` is unit norm and ``s`` is
    positive by construction.
    """

    flow: np.ndarray
    flow_confidence: np.ndarray
    xi: np.ndarray
    normals: np.ndarray
    r: np.ndarray
    t: np.ndarray
    s: float
    refined_xi: np.ndarray | None = None

    def motion(self) -> CameraMotion:
        return CameraMotion(self.r, self.t)

    def inverse_depth(self, apply_scale: bool = False) -> InverseDepthMap:
        xi = np.clip(self.xi.astype(np.float64), 0.0, None)
        if apply_scale:
            return InverseDepthMap(xi * self.s)
        return InverseDepthMap(xi, scale=self.s)

    def metric_depth(self) -> np.ndarray:
        """z = 1 / (s * xi), floored to stay positive."""
        sxi = np.clip(self.xi.astype(np.float64) * self.s, XI_FLOOR, None)
        return 1.0 / sxi


def _kaiming_pairs(rng, shape, fan_in, dtype):
    return ad.fanin_uniform(rng, shape, fan_in, dtype)


class EncoderDecoder:
    """Encoder-decoder over 1D convolution pairs with skip connections."""

    def __init__(self, params: ParameterStore, prefix: str, in_channels: int,
                 out_channels: int, cfg: NetConfig,
                 rng: np.random.Generator, motion_head: bool):
        self.prefix = prefix
        self.cfg = cfg
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.motion_head = motion_head
        self.p: dict[str, Tensor] = {}
        dt = cfg.np_dtype

        def conv_param(name, o, c, kh, kw):
            self.p[name + ".w"] = params.add(
                f"{prefix}.{name}.w",
                _kaiming_pairs(rng, (o, c, kh, kw), c * kh * kw, dt))
            self.p[name + ".b"] = params.add(
                f"{prefix}.{name}.b", np.zeros(o, dtype=dt))

        def upconv_param(name, c_in, c_out, k):
            # transposed-conv kernels keep the conv layout: the leading
            # axis matches the op input, the second the op output
            self.p[name + ".w"] = params.add(
                f"{prefix}.{name}.w",
                _kaiming_pairs(rng, (c_in, c_out, k, k), c_in * k * k, dt))
            self.p[name + ".b"] = params.add(
                f"{prefix}.{name}.b", np.zeros(c_out, dtype=dt))

        chans = cfg.channels
        c_prev = in_channels
        for i, c in enumerate(chans):
            k = cfg.first_kernel if i == 0 else cfg.kernel
            conv_param(f"enc{i}.x", c, c_prev, 1, k)
            conv_param(f"enc{i}.y", c, c, k, 1)
            c_prev = c
        for i in range(len(chans) - 1, 0, -1):
            upconv_param(f"up{i}", chans[i], chans[i - 1], 4)
            conv_param(f"merge{i}", chans[i - 1], 2 * chans[i - 1], 3, 3)
        upconv_param("up0", chans[0], chans[0], 4)
        conv_param("head0", chans[0], chans[0], 3, 3)
        conv_param("head1", out_channels, chans[0], 3, 3)
        if motion_head:
            c4 = chans[-1]
            self.p["fc0.w"] = params.add(f"{prefix}.fc0.w",
                                         _kaiming_pairs(rng, (c4, 64), c4, dt))
            self.p["fc0.b"] = params.add(f"{prefix}.fc0.b",
                                         np.zeros(64, dtype=dt))
            self.p["fc1.w"] = params.add(f"{prefix}.fc1.w",
                                         _kaiming_pairs(rng, (64, 32), 64, dt))
            self.p["fc1.b"] = params.add(f"{prefix}.fc1.b",
                                         np.zeros(32, dtype=dt))
            self.p["fc2.w"] = params.add(f"{prefix}.fc2.w",
                                         _kaiming_pairs(rng, (32, 7), 32, dt))
            self.p["fc2.b"] = params.add(f"{prefix}.fc2.b",
                                         np.zeros(7, dtype=dt))

    def parameter_names(self) -> list[str]:
        return [f"{self.prefix}.{k}" for k in self.p]

    def forward(self, x: Tensor):
        """Returns (output map Tensor (N,out,H,W), motion tuple or None)."""
        cfg = self.cfg
        if x.data.shape[1] != self.in_channels:
            raise ValueError(
                f"{self.prefix}: expected {self.in_channels} input channels, "
                f"got {x.data.shape[1]}")
        act = lambda t: ad.activation(t, "leaky_relu")  # noqa: E731
        skips = []
        h = x
        for i in range(len(cfg.channels)):
            k = cfg.first_kernel if i == 0 else cfg.kernel
            h = act(ad.conv2d(h, self.p[f"enc{i}.x.w"], self.p[f"enc{i}.x.b"],
                              stride=(1, 2), padding=(0, k // 2)))
            h = act(ad.conv2d(h, self.p[f"enc{i}.y.w"], self.p[f"enc{i}.y.b"],
                              stride=(2, 1), padding=(k // 2, 0)))
            skips.append(h)

        bottleneck = h
        for i in range(len(cfg.channels) - 1, 0, -1):
            h = act(ad.upconv2d(h, self.p[f"up{i}.w"], self.p[f"up{i}.b"],
                                stride=2, padding=1))
            h = ad.concat_channels([h, skips[i - 1]])
            h = act(ad.conv2d(h, self.p[f"merge{i}.w"], self.p[f"merge{i}.b"],
                              stride=1, padding=1))
        h = act(ad.upconv2d(h, self.p["up0.w"], self.p["up0.b"],
                            stride=2, padding=1))
        h = act(ad.conv2d(h, self.p["head0.w"], self.p["head0.b"],
                          stride=1, padding=1))
        out = ad.conv2d(h, self.p["head1.w"], self.p["head1.b"],
                        stride=1, padding=1)

        motion = None
        if self.motion_head:
            g = ad.global_avg_pool(bottleneck)
            g = act(ad.fully_connected(g, self.p["fc0.w"], self.p["fc0.b"]))
            g = act(ad.fully_connected(g, self.p["fc1.w"], self.p["fc1.b"]))
            g = ad.fully_connected(g, self.p["fc2.w"], self.p["fc2.b"])
            r = _slice_cols(g, 0, 3)
            t = ad.l2_normalize_rows(_slice_cols(g, 3, 6))
            s = ad.activation(_slice_cols(g, 6, 7), "exp")
            motion = (r, t, s)
        return out, motion


def _slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[:, start:stop]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return ad.Tensor(out, requires_grad=x.requires_grad, _parents=(x,),
                     _vjp=vjp if x.requires_grad else None)


class RefinementNet:
    """Small encoder-decoder upscaling depth to full resolution."""

    def __init__(self, params: ParameterStore, prefix: str, cfg: NetConfig,
                 rng: np.random.Generator):
        self.prefix = prefix
        self.cfg = cfg
        self.in_channels = 7  # full-res image + upsampled depth and normals
        self.p: dict[str, Tensor] = {}
        dt = cfg.np_dtype
        k = cfg.kernel

        def conv_param(name, o, c, kh, kw):
            self.p[name + ".w"] = params.add(
                f"{prefix}.{name}.w",
                _kaiming_pairs(rng, (o, c, kh, kw), c * kh * kw, dt))
            self.p[name + ".b"] = params.add(
                f"{prefix}.{name}.b", np.zeros(o, dtype=dt))

        def upconv_param(name, c_in, c_out, kk):
            self.p[name + ".w"] = params.add(
                f"{prefix}.{name}.w",
                _kaiming_pairs(rng, (c_in, c_out, kk, kk), c_in * kk * kk, dt))
            self.p[name + ".b"] = params.add(
                f"{prefix}.{name}.b", np.zeros(c_out, dtype=dt))

        chans = cfg.refine_channels
        c_prev = self.in_channels
        for i, c in enumerate(chans):
            conv_param(f"enc{i}.x", c, c_prev, 1, k)
            conv_param(f"enc{i}.y", c, c, k, 1)
            c_prev = c
        for i in range(len(chans) - 1, 0, -1):
            upconv_param(f"up{i}", chans[i], chans[i - 1], 4)
            conv_param(f"merge{i}", chans[i - 1], 2 * chans[i - 1], 3, 3)
        upconv_param("up0", chans[0], chans[0], 4)
        conv_param("head0", chans[0], chans[0], 3, 3)
        conv_param("head1", 1, chans[0], 3, 3)

    def parameter_names(self) -> list[str]:
        return [f"{self.prefix}.{k}" for k in self.p]

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        act = lambda t: ad.activation(t, "leaky_relu")  # noqa: E731
        k = cfg.kernel
        skips = []
        h = x
        for i in range(len(cfg.refine_channels)):
            h = act(ad.conv2d(h, self.p[f"enc{i}.x.w"], self.p[f"enc{i}.x.b"],
                              stride=(1, 2), padding=(0, k // 2)))
            h = act(ad.conv2d(h, self.p[f"enc{i}.y.w"], self.p[f"enc{i}.y.b"],
                              stride=(2, 1), padding=(k // 2, 0)))
            skips.append(h)
        for i in range(len(cfg.refine_channels) - 1, 0, -1):
            h = act(ad.upconv2d(h, self.p[f"up{i}.w"], self.p[f"up{i}.b"],
                                stride=2, padding=1))
            h = ad.concat_channels([h, skips[i - 1]])
            h = act(ad.conv2d(h, self.p[f"merge{i}.w"], self.p[f"merge{i}.b"],
                              stride=1, padding=1))
        h = act(ad.upconv2d(h, self.p["up0.w"], self.p["up0.b"],
                            stride=2, padding=1))
        h = act(ad.conv2d(h, self.p["head0.w"], self.p["head0.b"],
                          stride=1, padding=1))
        return ad.conv2d(h, self.p["head1.w"], self.p["head1.b"],
                         stride=1, padding=1)


# --- batched numpy helpers (constant inputs, no gradients) -----------------

def images_to_nchw(imgs: list[np.ndarray], dtype) -> np.ndarray:
    """List of (H, W, C) -> (N, C, H, W)."""
    arr = np.stack([np.asarray(im) for im in imgs])
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2)).astype(dtype)


def warp_batch(img2: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Bilinear warp of (N,C,H,W) images by (N,2,H,W) flow; zeros outside."""
    N, C, H, W = img2.shape
    ys, xs = np.meshgrid(np.arange(H, dtype=img2.dtype),
                         np.arange(W, dtype=img2.dtype), indexing="ij")
    x = xs[None] + flow[:, 0] * W
    y = ys[None] + flow[:, 1] * H
    valid = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    x0 = np.clip(np.floor(x), 0, W - 1).astype(np.int64)
    y0 = np.clip(np.floor(y), 0, H - 1).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    ax = (np.clip(x - x0, 0, 1))[:, None]
    ay = (np.clip(y - y0, 0, 1))[:, None]
    ns = np.arange(N)[:, None, None, None]
    cs = np.arange(C)[None, :, None, None]
    g00 = img2[ns, cs, y0[:, None], x0[:, None]]
    g01 = img2[ns, cs, y0[:, None], x1[:, None]]
    g10 = img2[ns, cs, y1[:, None], x0[:, None]]
    g11 = img2[ns, cs, y1[:, None], x1[:, None]]
    out = ((g00 * (1 - ax) + g01 * ax) * (1 - ay)
           + (g10 * (1 - ax) + g11 * ax) * ay)
    return (out * valid[:, None]).astype(img2.dtype)


class TwoViewNet:
    """Bootstrap + weight-shared iterative + refinement networks."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ParameterStore()
        rng = np.random.Generator(np.random.Philox(key=seed))
        self.boot_flow = EncoderDecoder(self.params, "boot_flow", 6, 4, cfg,
                                        rng, motion_head=False)
        self.boot_dm = EncoderDecoder(self.params, "boot_dm", 13, 4, cfg,
                                      rng, motion_head=True)
        self.iter_flow = EncoderDecoder(self.params, "iter_flow", 8, 4, cfg,
                                        rng, motion_head=False)
        self.iter_dm = EncoderDecoder(self.params, "iter_dm", 14, 4, cfg,
                                      rng, motion_head=True)
        self.refine = RefinementNet(self.params, "refine", cfg, rng)

    # --- input assembly -----------------------------------------------

    def _prep_images(self, img1, img2) -> tuple[np.ndarray, np.ndarray]:
        dt = self.cfg.np_dtype
        i1 = images_to_nchw(img1, dt) - np.asarray(0.5, dt)
        i2 = images_to_nchw(img2, dt) - np.asarray(0.5, dt)
        if self.cfg.single_image:
            i2 = np.zeros_like(i2)
        return i1, i2

    def _flow_stage(self, ed: EncoderDecoder, parts: list[np.ndarray]):
        x = Tensor(np.concatenate(parts, axis=1))
        out, _ = ed.forward(x)
        flow = ad.slice_channels(out, 0, 2)
        conf = ad.slice_channels(out, 2, 4)
        return flow, conf

    def _dm_stage(self, ed: EncoderDecoder, parts: list[np.ndarray]):
        x = Tensor(np.concatenate(parts, axis=1))
        out, motion = ed.forward(x)
        xi = ad.slice_channels(out, 0, 1)
        normals = ad.slice_channels(out, 1, 4)
        return xi, normals, motion

    def _conf_input(self, conf_np: np.ndarray) -> np.ndarray:
        if self.cfg.use_flow_confidence_input:
            return conf_np
        return np.zeros_like(conf_np)

    # --- forward passes -------------------------------------------------

    def bootstrap_tensors(self, img1, img2):
        """Graph outputs of the bootstrap stage for a batch of samples."""
        i1, i2 = self._prep_images(img1, img2)
        flow, conf = self._flow_stage(self.boot_flow, [i1, i2])
        flow_np = flow.data
        warped = warp_batch(i2, flow_np)
        dm_parts = [flow_np, self._conf_input(conf.data), i1, i2, warped]
        xi, normals, motion = self._dm_stage(self.boot_dm, dm_parts)
        return {"flow": flow, "conf": conf, "xi": xi, "normals": normals,
                "r": motion[0], "t": motion[1], "s": motion[2]}

    def iterative_tensors(self, img1, img2, prev: list[Prediction],
                          K: Intrinsics):
        """Graph outputs of one iterative refinement step.

        Previous predictions enter only as constants: an optical flow
        proposal rendered from the previous depth and motion, and a depth
        proposal triangulated from the fresh flow with the previous
        motion. A degenerate previous motion falls back to zero proposals.
        """
        i1, i2 = self._prep_images(img1, img2)
        dt = self.cfg.np_dtype
        N, _, H, W = i1.shape
        flow_prop = np.zeros((N, 2, H, W), dtype=dt)
        for n, p in enumerate(prev):
            prop, valid = flow_from_depth_motion(
                p.inverse_depth(apply_scale=True), p.motion(), K)
            w = np.where(valid[..., None], prop.w, 0.0)
            flow_prop[n] = w.transpose(2, 0, 1).astype(dt)
        flow, conf = self._flow_stage(self.iter_flow, [i1, i2, flow_prop])
        flow_np = flow.data

        depth_prop = np.zeros((N, 1, H, W), dtype=dt)
        for n, p in enumerate(prev):
            try:
                w = flow_np[n].transpose(1, 2, 0).astype(np.float64)
                dep, valid = depth_from_flow_motion(
                    FlowField(w), p.motion().normalized(), K)
                depth_prop[n, 0] = np.where(valid, dep.xi, 0.0).astype(dt)
            except DegenerateMotionError:
                pass  # zero proposal
        warped = warp_batch(i2, flow_np)
        dm_parts = [flow_np, self._conf_input(conf.data), i1, i2, warped,
                    depth_prop]
        xi, normals, motion = self._dm_stage(self.iter_dm, dm_parts)
        return {"flow": flow, "conf": conf, "xi": xi, "normals": normals,
                "r": motion[0], "t": motion[1], "s": motion[2],
                "flow_proposal": flow_prop, "depth_proposal": depth_prop}

    def refine_tensors(self, img1_full, predictions: list[Prediction]):
        """Graph output of the refinement stage (full-resolution depth)."""
        dt = self.cfg.np_dtype
        f = self.cfg.refine_factor
        i1 = images_to_nchw(img1_full, dt) - np.asarray(0.5, dt)
        N = i1.shape[0]
        H, W = self.cfg.height, self.cfg.width
        low = np.zeros((N, 4, H, W), dtype=dt)
        for n, p in enumerate(predictions):
            low[n, 0] = np.clip(p.xi * p.s, 0.0, None).astype(dt)
            low[n, 1:4] = p.normals.transpose(2, 0, 1).astype(dt)
        up = np.repeat(np.repeat(low, f, axis=2), f, axis=3)
        x = Tensor(np.concatenate([i1, up], axis=1))
        return self.refine.forward(x)

    @staticmethod
    def tensors_to_predictions(t: dict) -> list[Prediction]:
        """Detach batched graph outputs into per-sample predictions."""
        flow = t["flow"].data
        conf = t["conf"].data
        xi = t["xi"].data
        normals = t["normals"].data
        r = t["r"].data
        tt = t["t"].data
        s = t["s"].data
        preds = []
        for n in range(flow.shape[0]):
            preds.append(Prediction(
                flow=flow[n].transpose(1, 2, 0).astype(np.float64),
                flow_confidence=conf[n].transpose(1, 2, 0).astype(np.float64),
                xi=xi[n, 0].astype(np.float64),
                normals=normals[n].transpose(1, 2, 0).astype(np.float64),
                r=r[n].astype(np.float64),
                t=tt[n].astype(np.float64),
                s=float(s[n, 0]),
            ))
        return preds

    # --- inference API ----------------------------------------------------

    def bootstrap_forward(self, img1, img2) -> list[Prediction]:
        return self.tensors_to_predictions(self.bootstrap_tensors(img1, img2))

    def iterative_forward(self, img1, img2, prev: list[Prediction],
                          K: Intrinsics) -> list[Prediction]:
        return self.tensors_to_predictions(
            self.iterative_tensors(img1, img2, prev, K))

    def refine_forward(self, img1_full,
                       predictions: list[Prediction]) -> list[np.ndarray]:
        out = self.refine_tensors(img1_full, predictions).data
        return [out[n, 0].astype(np.float64) for n in range(out.shape[0])]

    def predict(self, img1, img2, K: Intrinsics, n_iters: int | None = None,
                img1_full=None, keep_history: bool = False):
        """Bootstrap, iterate, optionally refine.

        Returns the final per-sample predictions; with ``keep_history``
        the per-iteration prediction lists are returned instead
        (history[0] is the bootstrap output).
        """
        if n_iters is None:
            n_iters = self.cfg.iterations
        preds = self.bootstrap_forward(img1, img2)
        history = [preds]
        for _ in range(n_iters):
            preds = self.iterative_forward(img1, img2, preds, K)
            history.append(preds)
        if img1_full is not None:
            refined = self.refine_forward(img1_full, preds)
            for p, rx in zip(preds, refined):
                p.refined_xi = rx
        return history if keep_history else preds

    # --- persistence ------------------------------------------------------

    def component_parameters(self, component: str) -> dict[str, Tensor]:
        ed = {"boot_flow": self.boot_flow, "boot_dm": self.boot_dm,
              "iter_flow": self.iter_flow, "iter_dm": self.iter_dm,
              "refine": self.refine}[component]
        return {name: self.params[name] for name in ed.parameter_names()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.params.state_dict()

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.params.load_state_dict(state)

