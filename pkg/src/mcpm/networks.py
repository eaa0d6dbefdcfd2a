"""Segmentation U-Net, meta mask network, and the per-pixel loss map.

Parameters are plain ordered ``dict[str, np.ndarray]``.  The graph builders
(``seg_net``, ``mask_net``, ``loss_map``) take nodes on an autodiff tape; the
``*_forward`` helpers wrap them for one-off array evaluation.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import tensorio
from .autodiff import Node, ShapeError, Tape

PROB_EPS = 1e-7

Params = dict  # name -> np.ndarray, insertion ordered


@dataclass(frozen=True)
class ShapeSpec:
    h: int
    w: int
    c: int = 1

    def validate(self, depth: int) -> None:
        step = 2 ** depth
        if self.h < 8 or self.w < 8:
            raise ShapeError(f"image must be at least 8x8, got {self.h}x{self.w}")
        if self.h % step or self.w % step:
            raise ShapeError(f"image {self.h}x{self.w} not divisible by 2**{depth}")
        if self.c < 1:
            raise ShapeError("need at least one class")


# -- layouts ------------------------------------------------------------------

def seg_layout(depth: int = 2, base: int = 8, classes: int = 1) -> list[tuple[str, tuple]]:
    """Names and shapes of the U-Net parameters, in canonical order."""
    if depth < 1 or base < 1 or classes < 1:
        raise ValueError("depth, base and classes must be positive")
    layout = []

    def conv(name, cin, cout, k=3):
        layout.append((f"{name}.w", (cout, cin, k, k)))
        layout.append((f"{name}.b", (cout,)))

    cin = 1
    for lvl in range(depth):
        width = base * 2 ** lvl
        conv(f"enc{lvl}.conv1", cin, width)
        conv(f"enc{lvl}.conv2", width, width)
        cin = width
    width = base * 2 ** depth
    conv("mid.conv1", cin, width)
    conv("mid.conv2", width, width)
    for lvl in reversed(range(depth)):
        skip = base * 2 ** lvl
        conv(f"dec{lvl}.up", 2 * skip, skip)
        conv(f"dec{lvl}.conv1", 2 * skip, skip)
        conv(f"dec{lvl}.conv2", skip, skip)
    conv("head", base, classes, k=1)
    return layout


def mask_layout(k: int = 8) -> list[tuple[str, tuple]]:
    if k < 1:
        raise ValueError("mask branch width must be positive")
    return [
        ("branch3.w", (k, 1, 3, 3)), ("branch3.b", (k,)),
        ("branch5.w", (k, 1, 5, 5)), ("branch5.b", (k,)),
        ("fuse.w", (1, 2 * k + 1, 1, 1)), ("fuse.b", (1,)),
    ]


def _uniform_init(rng: np.random.Generator, layout) -> Params:
    params = {}
    for name, shape in layout:
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            # He-uniform: variance 2 / fan_in keeps ReLU activations from vanishing
            bound = np.sqrt(6.0 / np.prod(shape[1:]))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def init_seg_params(rng: np.random.Generator, depth: int = 2, base: int = 8,
                    classes: int = 1) -> Params:
    return _uniform_init(rng, seg_layout(depth, base, classes))


def init_mask_params(rng: np.random.Generator, k: int = 8) -> Params:
    """Random branches, zero fusion layer: the initial weight map is exactly 0.5."""
    params = _uniform_init(rng, mask_layout(k))
    params["fuse.w"] = np.zeros_like(params["fuse.w"])
    return params


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def count(params: Params) -> int:
    return int(sum(v.size for v in params.values()))


def seg_depth(params: Params) -> int:
    return len({name.split(".")[0] for name in params if name.startswith("enc")})


def check_layout(params: Params, layout) -> None:
    names = [n for n, _ in layout]
    if list(params) != names:
        raise ShapeError(f"parameter names {list(params)} do not match layout {names}")
    for name, shape in layout:
        if params[name].shape != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")


def seg_layout_of(params: Params):
    depth = seg_depth(params)
    base = params["enc0.conv1.w"].shape[0]
    classes = params["head.w"].shape[0]
    return seg_layout(depth, base, classes)


# -- graph builders -----------------------------------------------------------

def leaves(tape: Tape, params: Params) -> dict[str, Node]:
    return {name: tape.leaf(value) for name, value in params.items()}


def consts(tape: Tape, params: Params) -> dict[str, Node]:
    return {name: tape.const(value) for name, value in params.items()}


def _conv(x, p, name, padding):
    return ad.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], padding)


def seg_net(x: Node, p: dict[str, Node], head: str = "sigmoid") -> Node:
    """U-Net forward; ``x`` is ``[1,h,w]`` or ``[n,1,h,w]``."""
    depth = seg_depth(p)
    h, w = x.shape[-2:]
    classes = p["head.w"].shape[0]
    ShapeSpec(h, w, classes).validate(depth)
    if x.shape[-3] != 1:
        raise ShapeError(f"expected a single-channel image, got {x.shape}")

    skips = []
    for lvl in range(depth):
        x = ad.relu(_conv(x, p, f"enc{lvl}.conv1", 1))
        x = ad.relu(_conv(x, p, f"enc{lvl}.conv2", 1))
        skips.append(x)
        x = ad.maxpool2(x)
    x = ad.relu(_conv(x, p, "mid.conv1", 1))
    x = ad.relu(_conv(x, p, "mid.conv2", 1))
    for lvl in reversed(range(depth)):
        x = ad.relu(_conv(ad.upsample2(x), p, f"dec{lvl}.up", 1))
        x = ad.concat([skips[lvl], x])
        x = ad.relu(_conv(x, p, f"dec{lvl}.conv1", 1))
        x = ad.relu(_conv(x, p, f"dec{lvl}.conv2", 1))
    logits = _conv(x, p, "head", 0)
    if head == "softmax":
        return ad.softmax(logits, axis=-3)
    return ad.sigmoid(logits)


def mask_net(loss: Node, p: dict[str, Node]) -> Node:
    """Weight map from a ``[1,h,w]`` or ``[n,1,h,w]`` loss map."""
    if loss.shape[-3] != 1:
        raise ShapeError(f"loss map must have one channel, got {loss.shape}")
    a = ad.relu(_conv(loss, p, "branch3", 1))
    b = ad.relu(_conv(loss, p, "branch5", 2))
    fused = _conv(ad.concat([a, b, loss]), p, "fuse", 0)
    return ad.sigmoid(fused)


def check_binary(y: np.ndarray) -> None:
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary (0/1)")


def loss_map(prob: Node, y: np.ndarray) -> Node:
    """Per-pixel cross-entropy, shape ``[..., 1, h, w]``.

    One channel uses the binary form; more channels sum ``-y_k ln p_k``.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != prob.shape:
        raise ShapeError(f"label shape {y.shape} does not match prediction {prob.shape}")
    check_binary(y)
    tape = prob.tape
    pc = ad.clamp(prob, PROB_EPS, 1.0 - PROB_EPS)
    if prob.shape[-3] == 1:
        # y*p + (1-y)*(1-p), exact for binary y
        likelihood = tape.const(1.0 - y) + tape.const(2.0 * y - 1.0) * pc
        return -ad.log(likelihood)
    return -ad.channel_sum(tape.const(y) * ad.log(pc))


# -- array-level wrappers -------------------------------------------------------

def seg_forward(x, params: Params, head: str = "sigmoid") -> np.ndarray:
    tape = Tape()
    return seg_net(tape.const(x), consts(tape, params), head).value


def mask_forward(loss, params: Params) -> np.ndarray:
    """Weight map for an ``[h,w]`` (or ``[1,h,w]`` / batched) loss map."""
    loss = np.asarray(loss, dtype=np.float64)
    if np.any(loss < 0):
        raise ValueError("loss map must be non-negative")
    squeeze = loss.ndim == 2
    tape = Tape()
    out = mask_net(tape.const(loss[None] if squeeze else loss), consts(tape, params)).value
    return out[0] if squeeze else out


def pixel_loss(prob, y) -> np.ndarray:
    """Loss map ``[h,w]`` for a ``[c,h,w]`` prediction (batched input keeps ``[n,1,h,w]``)."""
    prob = np.asarray(prob, dtype=np.float64)
    tape = Tape()
    out = loss_map(tape.const(prob), y).value
    return out[0] if prob.ndim == 3 else out


# -- checkpoints ----------------------------------------------------------------
#
# File layout: b"MPCK\x01", u32 little-endian manifest length, UTF-8 JSON
# manifest, then concatenated MPTD tensors.  Manifest offsets are relative to
# the first byte after the manifest.

CKPT_MAGIC = b"MPCK\x01"


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, Params],
                    meta: dict | None = None) -> None:
    """``tensors`` maps a role (e.g. ``"seg"``) to that role's parameters."""
    entries, blobs, offset = [], [], 0
    for role, params in tensors.items():
        for name, value in params.items():
            blob = tensorio.to_bytes(value)
            entries.append({"name": name, "role": role, "offset": offset,
                            "shape": list(value.shape)})
            blobs.append(blob)
            offset += len(blob)
    manifest = json.dumps({"format": "mpck-v1", "meta": meta or {}, "tensors": entries},
                          sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(manifest)) + manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, Params], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != CKPT_MAGIC:
        raise tensorio.FormatError("not a parameter checkpoint")
    (mlen,) = struct.unpack_from("<I", data, 5)
    manifest = json.loads(data[9:9 + mlen])
    base = 9 + mlen
    out: dict[str, Params] = {}
    for entry in manifest["tensors"]:
        arr = tensorio.read_at(data, base + entry["offset"])
        if list(arr.shape) != entry["shape"]:
            raise tensorio.FormatError(f"{entry['name']}: shape disagrees with manifest")
        out.setdefault(entry["role"], {})[entry["name"]] = arr
    return out, manifest.get("meta", {})
