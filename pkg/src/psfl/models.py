"""Semantic-communication models: attention-based mentors and a conv student.

Every model is the same five-stage pipeline::

    image -> semantic encoder -> channel encoder -> channel -> channel decoder
          -> semantic decoder -> reconstruction -> classifier head

The semantic encoding ``S`` and the channel decoding ``C`` have the same
width (``semantic_dim``) in every family so that a mentor and a student can
be compared coordinate by coordinate.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    conv2d,
    conv_transpose2d,
    layer_norm,
    linear,
    matmul,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    transpose,
)
from .channel import ChannelRealization
from .errors import ConfigError, ContractError
from .params import ParameterSet

FAMILIES = ("GSC-M", "GSC-L", "GSC-H", "CSC")
PARTS = ("sem_enc", "chan_enc", "chan_dec", "sem_dec", "classifier")

# Parameter counts of the full-scale models; used only for payload accounting.
FULL_SCALE_PARAMS = {
    "GSC-M": 112_442_112,
    "GSC-L": 330_287_872,
    "GSC-H": 657_924_684,
    "CSC": 54_721_065,
}

GSC_DEPTHS = {"GSC-M": 2, "GSC-L": 3, "GSC-H": 4}


@dataclass(frozen=True)
class ImageSpec:
    height: int = 16
    width: int = 16
    channels: int = 1
    classes: int = 10

    @property
    def pixels(self):
        return self.height * self.width * self.channels


@dataclass(frozen=True)
class ModelProfile:
    """Architecture knobs for one model family.

    ``depth`` counts attention blocks for GSC families (in each of the
    encoder and decoder) and conv layers in the CSC encoder.
    """

    family: str
    depth: int
    embed_dim: int = 16
    heads: int = 2
    patch_size: int = 4
    ffn_mult: int = 2
    semantic_dim: int = 32
    conv_channels: tuple = (4, 8)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}", "family")
        for name in ("depth", "embed_dim", "heads", "patch_size", "ffn_mult", "semantic_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError("must be a positive integer", name)
        if self.is_gsc and self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}", "heads")
        if not self.is_gsc and self.depth != 2:
            raise ConfigError("the CSC encoder has exactly two conv layers", "depth")
        if not self.is_gsc and len(self.conv_channels) != self.depth:
            raise ConfigError("CSC needs one channel count per conv layer", "conv_channels")

    @property
    def is_gsc(self):
        return self.family.startswith("GSC")

    def check_image(self, image: ImageSpec):
        if self.is_gsc:
            p = self.patch_size
            if image.height % p or image.width % p:
                raise ConfigError(
                    f"{image.height}x{image.width} image does not split into {p}x{p} patches", "patch_size")
        else:
            scale_ = 2 ** self.depth
            if image.height % scale_ or image.width % scale_:
                raise ConfigError(f"image sides must be divisible by {scale_} for CSC", "depth")

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["conv_channels"] = tuple(d.get("conv_channels", (4, 8)))
        return cls(**d)


def desk_profile(family, **overrides):
    """Desk-scale profile: 16-wide embeddings, 2 heads, 4x4 patches."""
    if family in GSC_DEPTHS:
        return ModelProfile(family, GSC_DEPTHS[family], **overrides)
    if family == "CSC":
        return ModelProfile("CSC", 2, **overrides)
    raise ConfigError(f"unknown model family {family!r}", "family")


# ---------------------------------------------------------------------------
# attention-model building blocks


def patchify(images, patch_size):
    """``(B, H, W, C)`` images to ``(B, N, P*P*C)`` flattened patches, row-major."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    B, H, W, C = images.shape
    P = patch_size
    if H % P or W % P:
        raise ConfigError(f"{H}x{W} image does not split into {P}x{P} patches", "patch_size")
    x = images.reshape(B, H // P, P, W // P, P, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // P) * (W // P), P * P * C)


def unpatchify(tokens, height, width, channels, patch_size):
    """Differentiable inverse of :func:`patchify` for ``(B, N, P*P*C)`` tensors."""
    P = patch_size
    B = tokens.shape[0]
    x = reshape(tokens, (B, height // P, width // P, P, P, channels))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (B, height, width, channels))


def patch_embed(images, E, bias=None, patch_size=4):
    """Linear embedding of every flattened patch: ``Z0[i] = patch_i @ E (+ bias)``."""
    return linear(Tensor(patchify(images, patch_size)), E, bias)


def add_positional(Z0, positions):
    if tuple(Z0.shape[-2:]) != tuple(positions.shape):
        raise ContractError(f"positional shape {positions.shape} does not match {Z0.shape}")
    return add(Z0, positions)


def attention_head(Z, Wq, Wk, Wv):
    """``softmax(Q K^T / sqrt(d_k)) V`` with ``Q, K, V = Z Wq, Z Wk, Z Wv``."""
    Q, K, V = matmul(Z, Wq), matmul(Z, Wk), matmul(Z, Wv)
    d_k = Wq.shape[-1]
    scores = scale(matmul(Q, transpose(K, _swap_last(K.ndim))), 1.0 / math.sqrt(d_k))
    return matmul(softmax(scores, axis=-1), V)


def multi_head_attention(Z, heads, W_mha):
    """``concat(head_1..head_h) @ W_mha`` for ``heads = [(Wq, Wk, Wv), ...]``."""
    outs = [attention_head(Z, *h) for h in heads]
    cat = outs[0] if len(outs) == 1 else concat(outs, axis=-1)
    return matmul(cat, W_mha)


def fused_multi_head_attention(Z, Wq, Wk, Wv, Wo, heads):
    """All heads at once; head ``i`` owns columns ``i*d_k:(i+1)*d_k`` of Wq/Wk/Wv.

    Equal to :func:`multi_head_attention` with the per-head matrices sliced
    out of the combined ones.
    """
    B, N, D = Z.shape
    d_k = D // heads

    def split(t):
        return transpose(reshape(t, (B, N, heads, d_k)), (0, 2, 1, 3))

    Q, K, V = split(matmul(Z, Wq)), split(matmul(Z, Wk)), split(matmul(Z, Wv))
    scores = scale(matmul(Q, transpose(K, (0, 1, 3, 2))), 1.0 / math.sqrt(d_k))
    out = matmul(softmax(scores, axis=-1), V)
    out = reshape(transpose(out, (0, 2, 1, 3)), (B, N, D))
    return matmul(out, Wo)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ---------------------------------------------------------------------------
# model


@dataclass
class SCOutput:
    m_hat: Tensor
    y_hat: Tensor
    S: Tensor
    X: Tensor
    Y: Tensor
    C: Tensor


@dataclass
class SCModel:
    profile: ModelProfile
    image: ImageSpec
    params: ParameterSet
    meta: dict = field(default_factory=dict)

    @property
    def semantic_dim(self):
        return self.profile.semantic_dim

    def parts(self):
        """``{part: [names]}``: a disjoint cover of every parameter name."""
        out = {p: [] for p in PARTS}
        for name in self.params:
            out[name.split(".", 1)[0]].append(name)
        return out

    def fl_names(self):
        """Names of the transmitted model w = (alpha, theta, beta, delta)."""
        return [n for n in self.params if not n.startswith("classifier.")]

    def parameter_count(self):
        return self.params.size()

    def copy(self):
        return SCModel(self.profile, self.image, self.params.copy(), dict(self.meta))

    # -- stages -------------------------------------------------------------

    def semantic_encode(self, images):
        p = self.params
        prof = self.profile
        if prof.is_gsc:
            Z = patch_embed(images, p["sem_enc.embed.w"], p["sem_enc.embed.b"], prof.patch_size)
            Z = add_positional(Z, p["sem_enc.pos"])
            Z = self._blocks(Z, "sem_enc")
            Z = layer_norm(Z, p["sem_enc.ln.g"], p["sem_enc.ln.b"])
            B = Z.shape[0]
            return linear(reshape(Z, (B, -1)), p["sem_enc.proj.w"], p["sem_enc.proj.b"])
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        h = Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))
        for i in range(prof.depth):
            h = relu(conv2d(h, p[f"sem_enc.conv{i + 1}.w"], p[f"sem_enc.conv{i + 1}.b"], stride=2, padding=1))
        B = h.shape[0]
        return linear(reshape(h, (B, -1)), p["sem_enc.proj.w"], p["sem_enc.proj.b"])

    def channel_encode(self, S):
        p = self.params
        h = relu(linear(S, p["chan_enc.fc1.w"], p["chan_enc.fc1.b"]))
        return linear(h, p["chan_enc.fc2.w"], p["chan_enc.fc2.b"])

    def channel_decode(self, Y):
        p = self.params
        h = relu(linear(Y, p["chan_dec.fc1.w"], p["chan_dec.fc1.b"]))
        return linear(h, p["chan_dec.fc2.w"], p["chan_dec.fc2.b"])

    def semantic_decode(self, C):
        p = self.params
        prof, img = self.profile, self.image
        B = C.shape[0]
        if prof.is_gsc:
            n = (img.height // prof.patch_size) * (img.width // prof.patch_size)
            Z = reshape(linear(C, p["sem_dec.proj.w"], p["sem_dec.proj.b"]), (B, n, prof.embed_dim))
            Z = add(Z, p["sem_dec.pos"])
            Z = self._blocks(Z, "sem_dec")
            Z = layer_norm(Z, p["sem_dec.ln.g"], p["sem_dec.ln.b"])
            tokens = sigmoid(linear(Z, p["sem_dec.head.w"], p["sem_dec.head.b"]))
            return unpatchify(tokens, img.height, img.width, img.channels, prof.patch_size)
        chans = prof.conv_channels
        s = 2 ** prof.depth
        h = relu(linear(C, p["sem_dec.proj.w"], p["sem_dec.proj.b"]))
        h = reshape(h, (B, chans[-1], img.height // s, img.width // s))
        h = relu(conv_transpose2d(h, p["sem_dec.deconv1.w"], p["sem_dec.deconv1.b"], stride=1, padding=1))
        h = relu(conv_transpose2d(h, p["sem_dec.deconv2.w"], p["sem_dec.deconv2.b"], stride=2, padding=1))
        h = sigmoid(conv_transpose2d(h, p["sem_dec.deconv3.w"], p["sem_dec.deconv3.b"], stride=2, padding=1))
        return transpose(h, (0, 2, 3, 1))

    def classify(self, m_hat):
        p = self.params
        B = m_hat.shape[0]
        return softmax(linear(reshape(m_hat, (B, -1)), p["classifier.w"], p["classifier.b"]), axis=-1)

    def forward(self, images, channel=None):
        S = self.semantic_encode(images)
        X = self.channel_encode(S)
        if channel is None:
            channel = ChannelRealization.noiseless()
        Y = channel.apply(X)
        C = self.channel_decode(Y)
        m_hat = self.semantic_decode(C)
        return SCOutput(m_hat, self.classify(m_hat), S, X, Y, C)

    def _blocks(self, Z, prefix):
        p = self.params
        for i in range(self.profile.depth):
            b = f"{prefix}.block{i}"
            h = layer_norm(Z, p[f"{b}.ln1.g"], p[f"{b}.ln1.b"])
            Z = add(Z, fused_multi_head_attention(
                h, p[f"{b}.attn.wq"], p[f"{b}.attn.wk"], p[f"{b}.attn.wv"], p[f"{b}.attn.wo"],
                self.profile.heads))
            h = layer_norm(Z, p[f"{b}.ln2.g"], p[f"{b}.ln2.b"])
            h = relu(linear(h, p[f"{b}.ffn.w1"], p[f"{b}.ffn.b1"]))
            Z = add(Z, linear(h, p[f"{b}.ffn.w2"], p[f"{b}.ffn.b2"]))
        return Z


def sc_forward(model, images, channel=None):
    """Run the full pipeline; returns reconstruction, class probabilities, S and C."""
    return model.forward(images, channel)


# ---------------------------------------------------------------------------
# construction


def _is_prunable(name):
    return not name.startswith("classifier.") and ".ln" not in name


def _init_shapes(profile, image):
    """Ordered ``[(name, shape, init)]`` where init is 'w' (scaled normal), 'pos', 'one' or 'zero'."""
    sd = profile.semantic_dim
    spec = []
    if profile.is_gsc:
        D, P, C = profile.embed_dim, profile.patch_size, image.channels
        n = (image.height // P) * (image.width // P)
        F = profile.ffn_mult * D

        def blocks(prefix):
            for i in range(profile.depth):
                b = f"{prefix}.block{i}"
                spec.extend([
                    (f"{b}.ln1.g", (D,), "one"), (f"{b}.ln1.b", (D,), "zero"),
                    (f"{b}.attn.wq", (D, D), "w"), (f"{b}.attn.wk", (D, D), "w"),
                    (f"{b}.attn.wv", (D, D), "w"), (f"{b}.attn.wo", (D, D), "w"),
                    (f"{b}.ln2.g", (D,), "one"), (f"{b}.ln2.b", (D,), "zero"),
                    (f"{b}.ffn.w1", (D, F), "w"), (f"{b}.ffn.b1", (F,), "zero"),
                    (f"{b}.ffn.w2", (F, D), "w"), (f"{b}.ffn.b2", (D,), "zero"),
                ])

        spec += [("sem_enc.embed.w", (P * P * C, D), "w"), ("sem_enc.embed.b", (D,), "zero"),
                 ("sem_enc.pos", (n, D), "pos")]
        blocks("sem_enc")
        spec += [("sem_enc.ln.g", (D,), "one"), ("sem_enc.ln.b", (D,), "zero"),
                 ("sem_enc.proj.w", (n * D, sd), "w"), ("sem_enc.proj.b", (sd,), "zero")]
        spec += _channel_shapes(sd)
        spec += [("sem_dec.proj.w", (sd, n * D), "w"), ("sem_dec.proj.b", (n * D,), "zero"),
                 ("sem_dec.pos", (n, D), "pos")]
        blocks("sem_dec")
        spec += [("sem_dec.ln.g", (D,), "one"), ("sem_dec.ln.b", (D,), "zero"),
                 ("sem_dec.head.w", (D, P * P * C), "w"), ("sem_dec.head.b", (P * P * C,), "zero")]
    else:
        chans = profile.conv_channels
        cin = image.channels
        for i, c in enumerate(chans):
            spec += [(f"sem_enc.conv{i + 1}.w", (c, cin, 3, 3), "w"), (f"sem_enc.conv{i + 1}.b", (c,), "zero")]
            cin = c
        s = 2 ** profile.depth
        flat = chans[-1] * (image.height // s) * (image.width // s)
        spec += [("sem_enc.proj.w", (flat, sd), "w"), ("sem_enc.proj.b", (sd,), "zero")]
        spec += _channel_shapes(sd)
        c_last, c_first = chans[-1], chans[0]
        spec += [("sem_dec.proj.w", (sd, flat), "w"), ("sem_dec.proj.b", (flat,), "zero"),
                 ("sem_dec.deconv1.w", (c_last, c_last, 3, 3), "w"), ("sem_dec.deconv1.b", (c_last,), "zero"),
                 ("sem_dec.deconv2.w", (c_last, c_first, 4, 4), "w"), ("sem_dec.deconv2.b", (c_first,), "zero"),
                 ("sem_dec.deconv3.w", (c_first, image.channels, 4, 4), "w"),
                 ("sem_dec.deconv3.b", (image.channels,), "zero")]
    spec += [("classifier.w", (image.pixels, image.classes), "w"),
             ("classifier.b", (image.classes,), "zero")]
    return spec


def _channel_shapes(sd):
    return [("chan_enc.fc1.w", (sd, sd), "w"), ("chan_enc.fc1.b", (sd,), "zero"),
            ("chan_enc.fc2.w", (sd, sd), "w"), ("chan_enc.fc2.b", (sd,), "zero"),
            ("chan_dec.fc1.w", (sd, sd), "w"), ("chan_dec.fc1.b", (sd,), "zero"),
            ("chan_dec.fc2.w", (sd, sd), "w"), ("chan_dec.fc2.b", (sd,), "zero")]


def _fan_in(name, shape):
    if len(shape) == 4:
        if "deconv" in name:
            # transposed conv: each output sees in_ch * k*k / stride^2 inputs on average
            return max(1, shape[0] * shape[2] * shape[3] // 4)
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def count_parameters(profile, image=ImageSpec()):
    """Parameter count by enumerating the layer shapes (no allocation)."""
    profile.check_image(image)
    return int(sum(np.prod(shape) for _, shape, _ in _init_shapes(profile, image)))


def build_model(profile, image=ImageSpec(), seed=0):
    """Deterministically initialized model; same ``seed`` gives identical weights."""
    profile.check_image(image)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), FAMILIES.index(profile.family)]))
    values = {}
    for name, shape, kind in _init_shapes(profile, image):
        if kind == "w":
            values[name] = rng.standard_normal(shape) * math.sqrt(1.0 / _fan_in(name, shape))
        elif kind == "pos":
            values[name] = rng.standard_normal(shape) * 0.02
        elif kind == "one":
            values[name] = np.ones(shape)
        else:
            values[name] = np.zeros(shape)
    params = ParameterSet(values, prunable=[n for n in values if _is_prunable(n)])
    return SCModel(profile, image, params, {"seed": int(seed)})


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"PSFLCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params, profile=None, image=None, extra=None):
    """Write weights (little-endian float64) and masks (uint8) with a JSON header.

    Layout: magic, u32 version, u32 header length, header, weights in
    header order, then masks in header order.
    """
    header = {
        "version": CKPT_VERSION,
        "profile": None if profile is None else profile.to_dict(),
        "image": None if image is None else asdict(image),
        "extra": extra or {},
        "params": [{"name": n, "shape": list(t.shape), "prunable": n in params.prunable}
                   for n, t in params.items()],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(hb)))
        f.write(hb)
        for _, t in params.items():
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        for n in params:
            f.write(params.masks[n].astype(np.uint8).tobytes())


def load_checkpoint(path):
    """Return ``(ParameterSet, header)``; see :func:`save_checkpoint` for the layout."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CKPT_MAGIC:
        raise ContractError(f"{path}: not a psfl checkpoint")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != CKPT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    off = 16 + hlen
    sizes = [int(np.prod(e["shape"])) for e in header["params"]]
    if len(blob) != off + 9 * sum(sizes):
        raise ContractError(f"{path}: checkpoint length mismatch")
    values, masks, prunable = {}, {}, []
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        values[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
        if entry.get("prunable"):
            prunable.append(entry["name"])
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        masks[entry["name"]] = np.frombuffer(blob, dtype=np.uint8, count=n, offset=off).reshape(shape).astype(bool)
        off += n
    return ParameterSet(values, masks, prunable), header


def load_model(path):
    params, header = load_checkpoint(path)
    if header.get("profile") is None:
        raise ContractError(f"{path}: checkpoint has no profile metadata")
    profile = ModelProfile.from_dict(header["profile"])
    image = ImageSpec(**header["image"])
    return SCModel(profile, image, params, dict(header.get("extra", {})))
