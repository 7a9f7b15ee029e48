"""Low-level tensor operations with hand-written backward passes.

Convolutions are im2col + one GEMM. 3x3x3 kernels use padding 1 and stride
1 or 2; 1x1x1 kernels are plain channel mixes. The im2col column matrix is
returned by the forward pass so the backward pass can reuse it for the
weight gradient instead of rebuilding it.
"""

from __future__ import annotations

import numpy as np

LEAKY_SLOPE = 0.01


def _out_size(n: int, stride: int) -> int:
    # kernel 3, pad 1: stride 1 preserves n; stride 2 halves even n
    if stride == 1:
        return n
    return n // 2


def im2col3(x: np.ndarray, stride: int) -> np.ndarray:
    """(B, D, H, W, C) -> (B*Do*Ho*Wo, 27*C) for a 3^3 kernel, pad 1."""
    b, d, h, w, c = x.shape
    do, ho, wo = _out_size(d, stride), _out_size(h, stride), _out_size(w, stride)
    xp = np.zeros((b, d + 2, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, 1:-1, :] = x
    # overlapping-window view; the reshape performs the one unavoidable copy
    sb, sd, sh, sw, sc = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, do, ho, wo, 3, 3, 3, c),
        strides=(sb, sd * stride, sh * stride, sw * stride, sd, sh, sw, sc),
        writeable=False,
    )
    return view.reshape(b * do * ho * wo, 27 * c)


def conv3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    """3x3x3 convolution. w: (3,3,3,Cin,Cout). Returns (out, cols)."""
    bs, d, h, ww, cin = x.shape
    cout = w.shape[-1]
    cols = im2col3(x, stride)
    w2 = w.reshape(27 * cin, cout)
    out = cols @ w2
    out += b
    do, ho, wo = _out_size(d, stride), _out_size(h, stride), _out_size(ww, stride)
    return out.reshape(bs, do, ho, wo, cout), cols


def conv3_backward(gout: np.ndarray, x_shape: tuple, cols: np.ndarray,
                   w: np.ndarray, stride: int):
    """Gradients for conv3_forward. Returns (gx, gw, gb)."""
    b, d, h, ww, cin = x_shape
    cout = w.shape[-1]
    do, ho, wo = _out_size(d, stride), _out_size(h, stride), _out_size(ww, stride)
    g2 = gout.reshape(-1, cout)
    gb = g2.sum(axis=0)
    gw = (cols.T @ g2).reshape(w.shape)
    if stride == 1:
        # the input gradient of a stride-1 pad-1 conv is itself a stride-1
        # pad-1 conv of gout with the offset-flipped, channel-swapped kernel
        wf = w.reshape(27, cin, cout)[::-1].transpose(0, 2, 1)
        gcols = im2col3(gout, 1)
        gx = (gcols @ wf.reshape(27 * cout, cin)).reshape(x_shape)
        return gx, gw, gb
    # strided conv: one small GEMM per kernel offset, accumulated into the
    # padded buffer (never materializes the (N, 27*C) column gradient)
    w27t = np.ascontiguousarray(
        w.reshape(27, cin, cout).transpose(0, 2, 1)
    )
    gxp = np.zeros((b, d + 2, h + 2, ww + 2, cin), dtype=gout.dtype)
    j = 0
    for dz in range(3):
        for dy in range(3):
            for dx in range(3):
                gxp[
                    :,
                    dz : dz + do * stride : stride,
                    dy : dy + ho * stride : stride,
                    dx : dx + wo * stride : stride,
                    :,
                ] += (g2 @ w27t[j]).reshape(b, do, ho, wo, cin)
                j += 1
    gx = gxp[:, 1:-1, 1:-1, 1:-1, :]
    return gx, gw, gb


def conv1_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """1x1x1 convolution (channel mix). w: (Cin, Cout)."""
    out = x @ w
    out += b
    return out


def conv1_backward(gout: np.ndarray, x: np.ndarray, w: np.ndarray):
    cin = x.shape[-1]
    g2 = gout.reshape(-1, gout.shape[-1])
    x2 = x.reshape(-1, cin)
    gb = g2.sum(axis=0)
    gw = x2.T @ g2
    gx = (g2 @ w.T).reshape(x.shape)
    return gx, gw, gb


def leaky_forward(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, z * z.dtype.type(LEAKY_SLOPE))


def leaky_backward(g: np.ndarray, z: np.ndarray) -> np.ndarray:
    return g * np.where(z > 0, z.dtype.type(1.0), z.dtype.type(LEAKY_SLOPE))


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbor doubling of the three spatial axes."""
    b, d, h, w, c = x.shape
    expanded = np.broadcast_to(
        x[:, :, None, :, None, :, None, :], (b, d, 2, h, 2, w, 2, c)
    )
    return expanded.reshape(b, 2 * d, 2 * h, 2 * w, c).copy()


def upsample2_backward(g: np.ndarray) -> np.ndarray:
    b, d2, h2, w2, c = g.shape
    return g.reshape(b, d2 // 2, 2, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4, 6))


def softmax_lastaxis(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)
