"""Reference evaluation of the recognition transformer in plain numpy.

Writes transformer_golden.json: f32-representable weights, five keypoints,
and the expected positional encoding, tokens, probabilities and labels.
"""
import json

import numpy as np

D, H, HEADS, BLOCKS, C = 8, 16, 4, 2, 5
IMAGE = (640, 480)
EPS = 1e-5
rng = np.random.default_rng(3)


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


tensors = {}


def linear(name, out_dim, in_dim, scale=0.5):
    tensors[name + ".weight"] = f32(rng.uniform(-scale, scale, (out_dim, in_dim)))
    tensors[name + ".bias"] = f32(rng.uniform(-0.1, 0.1, out_dim))


def norm(name):
    tensors[name + ".weight"] = f32(1.0 + rng.uniform(-0.2, 0.2, H))
    tensors[name + ".bias"] = f32(rng.uniform(-0.1, 0.1, H))


linear("input_proj", H, D)
for i, (o, n) in enumerate([(32, 2), (64, 32), (128, 64), (H, 128)]):
    linear(f"pos.{i}", o, n, scale=1.0 / np.sqrt(n))
for b in range(BLOCKS):
    p = f"blocks.{b}"
    norm(p + ".norm1")
    for m in ("q", "k", "v", "out"):
        linear(f"{p}.attn.{m}", H, H)
    norm(p + ".norm2")
    linear(p + ".ffn.0", 2 * H, H)
    linear(p + ".ffn.1", H, 2 * H)
norm("norm")
linear("head", C, H, scale=1.5)

desc = rng.normal(size=(5, D))
desc = f32(desc / np.linalg.norm(desc, axis=1, keepdims=True))
uv = np.array([[320.0, 240.0], [12.5, 400.25], [600.0, 30.0], [100.0, 100.0], [511.75, 333.5]])


def lin(name, x):
    return x @ tensors[name + ".weight"].T + tensors[name + ".bias"]


def layer_norm(name, x):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + EPS) * tensors[name + ".weight"] + tensors[name + ".bias"]


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def pos_encode(u, v):
    x = np.array([(2 * u - IMAGE[0]) / IMAGE[0], (2 * v - IMAGE[1]) / IMAGE[1]])
    for i in range(4):
        x = lin(f"pos.{i}", x)
        if i < 3:
            x = np.maximum(x, 0.0)
    return x


pos = np.stack([pos_encode(u, v) for u, v in uv])
tokens = lin("input_proj", desc) + pos

x = tokens.copy()
dh = H // HEADS
for b in range(BLOCKS):
    p = f"blocks.{b}"
    y = layer_norm(p + ".norm1", x)
    q, k, v = (lin(f"{p}.attn.{m}", y) for m in ("q", "k", "v"))
    ctx = np.zeros_like(x)
    for h in range(HEADS):
        s = slice(h * dh, (h + 1) * dh)
        a = softmax(q[:, s] @ k[:, s].T / np.sqrt(dh))
        ctx[:, s] = a @ v[:, s]
    x = x + lin(p + ".attn.out", ctx)
    x = x + lin(p + ".ffn.1", np.maximum(lin(p + ".ffn.0", layer_norm(p + ".norm2", x)), 0.0))
probs = softmax(lin("head", layer_norm("norm", x)))

out = {
    "descriptor_dim": D,
    "hidden": H,
    "num_heads": HEADS,
    "num_classes": C,
    "image_size": list(IMAGE),
    "tensors": {k: {"shape": list(v.shape), "data": [float(t) for t in v.ravel()]} for k, v in tensors.items()},
    "keypoints": [{"u": float(u), "v": float(v), "desc": [float(t) for t in d]} for (u, v), d in zip(uv, desc)],
    "positional": pos.tolist(),
    "tokens": tokens.tolist(),
    "probabilities": probs.tolist(),
    "labels": [int(i) for i in probs.argmax(axis=1)],
}
with open("transformer_golden.json", "w") as f:
    json.dump(out, f)
print(out["labels"], probs.max(axis=1))
