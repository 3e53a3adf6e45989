"""Tiny unidirectional recurrent x4 super-resolution network.

The architecture is deliberately minimal: per frame, features are extracted
at LR resolution, fused with the previous frame's hidden state by channel
concat + conv, refined by a couple of residual blocks, upsampled twice by
conv + pixel-shuffle, and added to the nearest-upsampled input. The trunk
output doubles as the hidden state carried to the next frame. Training is
full backpropagation through time over the hidden-state chain.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tz

LEAKY_SLOPE = 0.1


@dataclass
class TinyRvsrParams:
    """All network weights keyed by layer name, plus the build recipe."""

    channels: int
    blocks: int
    seed: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype) -> "TinyRvsrParams":
        return TinyRvsrParams(self.channels, self.blocks, self.seed,
                              {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "TinyRvsrParams":
        return TinyRvsrParams(self.channels, self.blocks, self.seed,
                              {k: v.copy() for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def count(self) -> int:
        return sum(v.size for v in self.tensors.values())


def _layer_shapes(channels: int, blocks: int) -> dict[str, tuple[int, ...]]:
    c = channels
    shapes: dict[str, tuple[int, ...]] = {
        "feat.w": (c, 3, 3, 3), "feat.b": (c,),
        "fuse.w": (c, 2 * c, 3, 3), "fuse.b": (c,),
    }
    for i in range(blocks):
        shapes[f"block{i}.conv1.w"] = (c, c, 3, 3)
        shapes[f"block{i}.conv1.b"] = (c,)
        shapes[f"block{i}.conv2.w"] = (c, c, 3, 3)
        shapes[f"block{i}.conv2.b"] = (c,)
    shapes.update({
        "up1.w": (4 * c, c, 3, 3), "up1.b": (4 * c,),
        "up2.w": (4 * c, c, 3, 3), "up2.b": (4 * c,),
        "out.w": (3, c, 3, 3), "out.b": (3,),
    })
    return shapes


def param_count(channels: int, blocks: int) -> int:
    """Closed-form parameter count for a (channels, blocks) build."""
    return sum(int(np.prod(s)) for s in _layer_shapes(channels, blocks).values())


def init_params(seed: int, channels: int = 16, blocks: int = 2,
                dtype=np.float32) -> TinyRvsrParams:
    """Kaiming-uniform fan-in conv weights, zero biases, fixed by seed.

    Two recurrence-stability tweaks on top: each residual block's second
    conv starts at zero (blocks begin as identity), and the hidden half of
    the fusion conv is halved, keeping the frame-to-frame hidden gain
    below one so long unrolls do not blow up at initialization.
    """
    if channels < 1 or blocks < 0:
        raise ValueError(f"need channels >= 1 and blocks >= 0, got {channels}/{blocks}")
    rng = np.random.Generator(np.random.PCG64(seed))
    tensors = {}
    for name, shape in _layer_shapes(channels, blocks).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        arr = rng.uniform(-bound, bound, size=shape).astype(dtype)
        if name.startswith("block") and name.endswith("conv2.w"):
            arr[:] = 0.0
        elif name == "fuse.w":
            arr[:, channels:] *= 0.5
        tensors[name] = arr
    return TinyRvsrParams(channels=channels, blocks=blocks, seed=seed, tensors=tensors)


def zero_grads(params: TinyRvsrParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def forward_sequence(params: TinyRvsrParams,
                     lr_clip: np.ndarray) -> tuple[np.ndarray, dict]:
    """Run the recurrence over a (T,N,3,h,w) clip.

    Returns the (T,N,3,4h,4w) SR clip and the activation cache needed by
    backward_sequence. Hidden state starts at zeros. Only the fuse/residual
    trunk is inherently sequential; feature extraction and the upsample
    head run on all T*N frames in one batched pass.
    """
    if lr_clip.ndim != 5 or lr_clip.shape[2] != 3:
        raise tz.ShapeError(f"expected (T,N,3,h,w) clip, got {lr_clip.shape}")
    t_len, n, _, h, w = lr_clip.shape
    if h < 1 or w < 1 or t_len < 1:
        raise tz.ShapeError(f"non-positive clip dims {lr_clip.shape}")
    p = params.tensors
    c = params.channels
    x_flat = np.ascontiguousarray(lr_clip.reshape(t_len * n, 3, h, w))
    feat_flat = tz.leaky_relu(tz.conv2d_forward(x_flat, p["feat.w"], p["feat.b"]),
                              LEAKY_SLOPE)
    feat = feat_flat.reshape(t_len, n, c, h, w)
    hidden = np.zeros((n, c, h, w), dtype=lr_clip.dtype)
    trunks = np.empty((t_len, n, c, h, w), dtype=lr_clip.dtype)
    frames: list[dict] = []
    for t in range(t_len):
        merged = tz.concat_channels(feat[t], hidden)
        trunk = tz.leaky_relu(tz.conv2d_forward(merged, p["fuse.w"], p["fuse.b"]),
                              LEAKY_SLOPE)
        block_in = []
        block_a1 = []
        for i in range(params.blocks):
            block_in.append(trunk)
            a1 = tz.leaky_relu(
                tz.conv2d_forward(trunk, p[f"block{i}.conv1.w"], p[f"block{i}.conv1.b"]),
                LEAKY_SLOPE)
            block_a1.append(a1)
            a2 = tz.conv2d_forward(a1, p[f"block{i}.conv2.w"], p[f"block{i}.conv2.b"])
            trunk = tz.add(trunk, a2)
        trunks[t] = trunk
        frames.append({"merged": merged, "block_in": block_in,
                       "block_a1": block_a1, "fused": block_in[0] if block_in
                       else trunk})
        hidden = trunks[t]
    trunk_flat = trunks.reshape(t_len * n, c, h, w)
    u1 = tz.leaky_relu(
        tz.pixel_shuffle(tz.conv2d_forward(trunk_flat, p["up1.w"], p["up1.b"]), 2),
        LEAKY_SLOPE)
    u2 = tz.leaky_relu(
        tz.pixel_shuffle(tz.conv2d_forward(u1, p["up2.w"], p["up2.b"]), 2),
        LEAKY_SLOPE)
    sr_flat = tz.add(tz.conv2d_forward(u2, p["out.w"], p["out.b"]),
                     tz.nearest_upsample(x_flat, 4))
    sr = sr_flat.reshape(t_len, n, 3, 4 * h, 4 * w)
    tz.assert_finite(sr, "forward_sequence output")
    cache = {"shape": (t_len, n, h, w), "x_flat": x_flat, "feat_flat": feat_flat,
             "trunks": trunks, "u1": u1, "u2": u2, "frames": frames}
    return sr, cache


def backward_sequence(params: TinyRvsrParams, cache: dict,
                      grad_sr: np.ndarray) -> dict[str, np.ndarray]:
    """Full-gradient BPTT: hidden-state gradients accumulate backward
    across all frames. Returns per-parameter gradients."""
    t_len, n, h, w = cache["shape"]
    if grad_sr.shape != (t_len, n, 3, 4 * h, 4 * w):
        raise tz.ShapeError(
            f"grad_sr shape {grad_sr.shape} inconsistent with cached "
            f"{(t_len, n, 3, 4 * h, 4 * w)}")
    p = params.tensors
    c = params.channels
    grads = zero_grads(params)
    g_flat = np.ascontiguousarray(grad_sr.reshape(t_len * n, 3, 4 * h, 4 * w))
    g_u2, grads["out.w"], grads["out.b"] = \
        tz.conv2d_backward(cache["u2"], p["out.w"], g_flat)
    g = tz.leaky_relu_backward(cache["u2"], LEAKY_SLOPE, g_u2)
    g = tz.pixel_shuffle_backward(g, 2)
    g_u1, grads["up2.w"], grads["up2.b"] = \
        tz.conv2d_backward(cache["u1"], p["up2.w"], g)
    g = tz.leaky_relu_backward(cache["u1"], LEAKY_SLOPE, g_u1)
    g = tz.pixel_shuffle_backward(g, 2)
    trunk_flat = cache["trunks"].reshape(t_len * n, c, h, w)
    g_trunk_flat, grads["up1.w"], grads["up1.b"] = \
        tz.conv2d_backward(trunk_flat, p["up1.w"], g)
    g_trunks = g_trunk_flat.reshape(t_len, n, c, h, w)
    g_feat = np.empty((t_len, n, c, h, w), dtype=grad_sr.dtype)
    grad_hidden = np.zeros((n, c, h, w), dtype=grad_sr.dtype)
    for t in reversed(range(t_len)):
        fr = cache["frames"][t]
        # the trunk output of frame t is also frame t+1's hidden state
        g_trunk = g_trunks[t] + grad_hidden
        for i in reversed(range(params.blocks)):
            g_a1, gw, gb = tz.conv2d_backward(fr["block_a1"][i],
                                              p[f"block{i}.conv2.w"], g_trunk)
            grads[f"block{i}.conv2.w"] += gw
            grads[f"block{i}.conv2.b"] += gb
            g_a1 = tz.leaky_relu_backward(fr["block_a1"][i], LEAKY_SLOPE, g_a1)
            g_in, gw, gb = tz.conv2d_backward(fr["block_in"][i],
                                              p[f"block{i}.conv1.w"], g_a1)
            grads[f"block{i}.conv1.w"] += gw
            grads[f"block{i}.conv1.b"] += gb
            g_trunk = g_trunk + g_in  # residual skip
        g_fused = tz.leaky_relu_backward(fr["fused"], LEAKY_SLOPE, g_trunk)
        g_merged, gw, gb = tz.conv2d_backward(fr["merged"], p["fuse.w"], g_fused)
        grads["fuse.w"] += gw
        grads["fuse.b"] += gb
        g_feat[t], grad_hidden = tz.split_channels(g_merged, c)
    g_feat_flat = tz.leaky_relu_backward(cache["feat_flat"], LEAKY_SLOPE,
                                         g_feat.reshape(t_len * n, c, h, w))
    _, grads["feat.w"], grads["feat.b"] = \
        tz.conv2d_backward(cache["x_flat"], p["feat.w"], g_feat_flat,
                           need_input_grad=False)
    for name, g in grads.items():
        tz.assert_finite(g, f"gradient of {name}")
    return grads


def save_checkpoint(params: TinyRvsrParams, ckpt_dir: str | Path) -> Path:
    """One raw tensor file per parameter plus a JSON manifest."""
    ckpt = Path(ckpt_dir)
    ckpt.mkdir(parents=True, exist_ok=True)
    names = []
    for name, arr in params.tensors.items():
        fname = name.replace(".", "_") + ".bin"
        tz.save_tensor(ckpt / fname, arr)
        names.append({"name": name, "file": fname, "shape": list(arr.shape)})
    manifest = {"channels": params.channels, "blocks": params.blocks,
                "seed": params.seed, "tensors": names}
    (ckpt / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return ckpt


def load_checkpoint(ckpt_dir: str | Path, dtype=np.float32) -> TinyRvsrParams:
    ckpt = Path(ckpt_dir)
    manifest = json.loads((ckpt / "manifest.json").read_text())
    tensors = {}
    for entry in manifest["tensors"]:
        arr = tz.load_tensor(ckpt / entry["file"]).astype(dtype)
        if list(arr.shape) != entry["shape"]:
            raise tz.ShapeError(
                f"checkpoint tensor {entry['name']} has shape {arr.shape}, "
                f"manifest says {entry['shape']}")
        tensors[entry["name"]] = arr
    return TinyRvsrParams(channels=manifest["channels"], blocks=manifest["blocks"],
                          seed=manifest["seed"], tensors=tensors)
