"""Plain-numpy reference implementations the tests compare against, independent of ndcore."""
import numpy as np
from scipy.signal import correlate2d


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def w(conv):
    return conv.weight.data.astype(np.float64)


def b(conv):
    return 0.0 if conv.bias is None else conv.bias.data.astype(np.float64)


def pointwise(conv, x):
    """1×1 conv on N×C×H×W as a per-pixel matrix product."""
    out = np.einsum("oc,nchw->nohw", w(conv)[:, :, 0, 0], x)
    return out + np.reshape(b(conv), (1, -1, 1, 1))


def same_conv(conv, x):
    """Stride-1 'same' convolution by per-channel 2-D correlation; reduces to pointwise for 1×1."""
    k = w(conv)
    if k.shape[2:] == (1, 1):
        return pointwise(conv, x)
    out = np.zeros((x.shape[0], k.shape[0]) + x.shape[2:])
    for n in range(x.shape[0]):
        for o in range(k.shape[0]):
            out[n, o] = sum(correlate2d(x[n, c], k[o, c], mode="same") for c in range(x.shape[1]))
    return out + np.reshape(b(conv), (1, -1, 1, 1))


def channel_attention(cbam, f):
    def mlp(v):
        hidden = np.maximum(pointwise(cbam.mlp_in, v), 0.0)
        return pointwise(cbam.mlp_out, hidden)
    avg = f.mean(axis=(2, 3), keepdims=True)
    mx = f.max(axis=(2, 3), keepdims=True)
    return sig(mlp(avg) + mlp(mx))


def spatial_attention(cbam, f):
    pooled = [f.mean(axis=1), f.max(axis=1)]
    kernel = w(cbam.spatial)[0]
    out = np.zeros((f.shape[0], 1) + f.shape[2:])
    for n in range(f.shape[0]):
        acc = sum(correlate2d(pooled[c][n], kernel[c], mode="same") for c in range(2))
        out[n, 0] = acc + b(cbam.spatial)
    return sig(out)


def gru_cell(cell, x, h):
    """The GRU recurrences with every gate convolution evaluated by ``same_conv``."""
    z = sig(same_conv(cell.w_z, x) + same_conv(cell.u_z, h))
    r = sig(same_conv(cell.w_r, x) + same_conv(cell.u_r, h))
    cand = np.tanh(same_conv(cell.w_h, x) + same_conv(cell.u_h, r * h))
    return (1 - z) * h + z * cand


def csag(gate, e, d):
    ce, cd = channel_attention(gate.cbam, e), channel_attention(gate.cbam, d)
    cf = gru_cell(gate.gru_channel, ce, cd)
    se, sd = spatial_attention(gate.cbam, e), spatial_attention(gate.cbam, d)
    sf = gru_cell(gate.gru_spatial, se, sd)
    return (e + d) * cf * sf


# -- connected components ------------------------------------------------------------
def flood_fill_regions(mask):
    """Recursive 8-connected flood fill, scanning in raster order."""
    import sys
    sys.setrecursionlimit(20000)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=int)
    out = []

    def fill(r, c, lab, acc):
        labels[r, c] = lab
        acc.append((r, c))
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not labels[rr, cc]:
                    fill(rr, cc, lab, acc)

    for r in range(h):
        for c in range(w):
            if mask[r, c] and not labels[r, c]:
                acc = []
                fill(r, c, len(out) + 1, acc)
                rows = [p[0] for p in acc]
                cols = [p[1] for p in acc]
                out.append((len(out) + 1, len(acc), (sum(cols) / len(acc), sum(rows) / len(acc))))
    return labels, out


# -- stains ----------------------------------------------------------------------------
OTHER_STAINS = np.array([[0.65, 0.07], [0.70, 0.99], [0.29, 0.11]])
OTHER_STAINS = OTHER_STAINS / np.linalg.norm(OTHER_STAINS, axis=0)


def synthetic_concentrations(rng, shape=(128, 128), scale=1.0):
    h = rng.gamma(2.0, 0.4, size=shape)
    e = rng.gamma(2.0, 0.25, size=shape)
    kind = rng.uniform(size=shape)
    h[kind < 0.25] = 0            # eosin only
    e[(kind >= 0.25) & (kind < 0.5)] = 0  # hematoxylin only
    h[kind > 0.9] = e[kind > 0.9] = 0     # background
    return scale * np.stack([h, e], axis=-1)


def angle_deg(a, b):
    cos = np.dot(a, b) / np.linalg.norm(a) / np.linalg.norm(b)
    return np.degrees(np.arccos(np.clip(cos, -1, 1)))


def column_errors(found, truth):
    straight = [angle_deg(found[:, k], truth[:, k]) for k in range(2)]
    crossed = [angle_deg(found[:, k], truth[:, 1 - k]) for k in range(2)]
    return min(straight, crossed, key=max)
