"""Minimal dense feed-forward kernel with manual backpropagation.

One topology: grouped feature embeddings -> concatenation -> ReLU hidden
layer -> softmax. Feature groups are either sparse (rows are vocabulary ids
selecting embedding rows) or dense (rows are vectors, multiplied by the group
embedding matrix, or passed through unembedded). Dense groups also expose
gradients with respect to their input rows so a loss can be backpropagated
into whatever produced them.

Training is mini-batched averaged SGD with momentum; every parameter block
carries its own velocity, running average, and average count so that updates
restricted to a subset of blocks leave the rest bit-identical.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from typing import BinaryIO, Optional, Sequence, Union

import numpy as np

from stackprop.errors import ModelError, StackpropError

DTYPE = np.float64

MAGIC = b"STPM"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class FeatureGroupSpec:
    """Shape of one feature group: F templates over a V-sized space, embedded
    into D dimensions. Dense groups take vector rows of width V instead of
    ids; an unembedded dense group feeds its rows straight to the hidden
    layer."""

    name: str
    num_templates: int
    vocab_size: int
    embed_dim: int
    dense: bool = False
    embedded: bool = True

    def __post_init__(self):
        # sparse vocabularies always reserve a NULL id, hence the >= 2 floor;
        # dense groups take raw vector rows, which may legitimately be width 1
        min_vocab = 1 if self.dense else 2
        if self.num_templates < 1 or self.vocab_size < min_vocab or self.embed_dim < 1:
            raise StackpropError(f"bad group spec {self}")
        if not self.embedded and not self.dense:
            raise StackpropError(f"sparse group {self.name} must be embedded")

    @property
    def row_width(self) -> int:
        return self.embed_dim if self.embedded else self.vocab_size

    @property
    def width(self) -> int:
        return self.num_templates * self.row_width


@dataclass
class FeatureMatrix:
    """Per-example input for one group: (F,) int ids or an (F, V) dense array."""

    group: FeatureGroupSpec
    rows: np.ndarray

    def __post_init__(self):
        if self.group.dense:
            if self.rows.shape != (self.group.num_templates, self.group.vocab_size):
                raise StackpropError(
                    f"dense rows for {self.group.name} have shape {self.rows.shape}"
                )
        else:
            if self.rows.shape != (self.group.num_templates,):
                raise StackpropError(
                    f"id rows for {self.group.name} have shape {self.rows.shape}"
                )
            if self.rows.max(initial=0) >= self.group.vocab_size:
                raise StackpropError(f"id out of range for group {self.group.name}")


@dataclass
class OptimizerConfig:
    eta0: float = 0.05
    gamma: float = 10000.0
    mu: float = 0.9
    batch_size: int = 32
    averaging_start: int = 0

    def __post_init__(self):
        if self.eta0 <= 0 or not 0 <= self.mu < 1 or self.gamma <= 0 or self.batch_size < 1:
            raise StackpropError(f"bad optimizer config {self}")


class Network:
    """Parameters and optimizer shadow state for one feed-forward unit.

    Blocks: one embedding matrix per embedded group (``E_<group>``), hidden
    ``W1``/``b1``, softmax ``W2``/``b2``, plus any extra caller-managed blocks
    (updated by the optimizer and serialized, but not used by the forward
    pass here).
    """

    def __init__(
        self,
        groups: Sequence[FeatureGroupSpec],
        n_hidden: int,
        n_out: int,
        rng: np.random.Generator,
        extra_blocks: Optional[dict[str, tuple[int, ...]]] = None,
        init_scale: float = 0.01,
        hidden_bias: float = 0.2,
    ):
        self.groups = list(groups)
        self.n_hidden = n_hidden
        self.n_out = n_out
        self.input_width = sum(g.width for g in self.groups)
        self.params: dict[str, np.ndarray] = {}
        for g in self.groups:
            if g.embedded:
                self.params[f"E_{g.name}"] = rng.uniform(
                    -init_scale, init_scale, size=(g.vocab_size, g.embed_dim)
                ).astype(DTYPE)
        self.params["W1"] = rng.uniform(
            -init_scale, init_scale, size=(self.input_width, n_hidden)
        ).astype(DTYPE)
        self.params["b1"] = np.full(n_hidden, hidden_bias, dtype=DTYPE)
        self.params["W2"] = rng.uniform(
            -init_scale, init_scale, size=(n_hidden, n_out)
        ).astype(DTYPE)
        self.params["b2"] = np.zeros(n_out, dtype=DTYPE)
        for name, shape in (extra_blocks or {}).items():
            self.params[name] = rng.uniform(-init_scale, init_scale, size=shape).astype(
                DTYPE
            )
        self.block_names = list(self.params)
        self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.average = {k: v.copy() for k, v in self.params.items()}
        self.avg_count = {k: 0 for k in self.params}
        self.step = 0

    def group(self, name: str) -> FeatureGroupSpec:
        for g in self.groups:
            if g.name == name:
                return g
        raise StackpropError(f"no feature group named {name}")

    def inference_params(self, averaged: bool = True) -> dict[str, np.ndarray]:
        """Averaged parameters when averaging has begun, else the raw ones."""
        if not averaged:
            return self.params
        return {
            k: (self.average[k] if self.avg_count[k] > 0 else self.params[k])
            for k in self.block_names
        }

    def count_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class ForwardCache:
    inputs: dict[str, np.ndarray]
    h0: np.ndarray
    z1: np.ndarray
    h1: np.ndarray
    logits: np.ndarray


def embed_forward_batch(
    net: Network, inputs: dict[str, np.ndarray], params: Optional[dict] = None
) -> np.ndarray:
    """Concatenated embedding layer for a batch: (B, sum_g F_g * D_g)."""
    params = params if params is not None else net.params
    parts = []
    batch = None
    for g in net.groups:
        try:
            x = inputs[g.name]
        except KeyError:
            raise StackpropError(f"missing input for feature group {g.name}")
        if batch is None:
            batch = x.shape[0]
        if g.dense:
            if x.shape[1:] != (g.num_templates, g.vocab_size):
                raise StackpropError(
                    f"dense input for {g.name} has shape {x.shape}"
                )
            out = x @ params[f"E_{g.name}"] if g.embedded else x
        else:
            if x.shape[1:] != (g.num_templates,):
                raise StackpropError(f"id input for {g.name} has shape {x.shape}")
            out = params[f"E_{g.name}"][x]
        parts.append(np.ascontiguousarray(out, dtype=DTYPE).reshape(batch, -1))
    return np.concatenate(parts, axis=1)


def forward_batch(
    net: Network, inputs: dict[str, np.ndarray], params: Optional[dict] = None
) -> ForwardCache:
    params = params if params is not None else net.params
    h0 = embed_forward_batch(net, inputs, params)
    z1 = h0 @ params["W1"] + params["b1"]
    h1 = np.maximum(z1, 0.0)
    logits = h1 @ params["W2"] + params["b2"]
    return ForwardCache(inputs, h0, z1, h1, logits)


def softmax_batch(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent_batch(
    logits: np.ndarray, gold: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(probabilities, per-example loss, per-example dlogits) for gold ids."""
    probs = softmax_batch(logits)
    b = np.arange(logits.shape[0])
    losses = -np.log(np.maximum(probs[b, gold], 1e-300))
    dlogits = probs.copy()
    dlogits[b, gold] -= 1.0
    return probs, losses, dlogits


def backward_batch(
    net: Network, cache: ForwardCache, dlogits: np.ndarray
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Gradients for all blocks plus gradients w.r.t. dense group inputs.

    ``dlogits`` carries whatever scaling the caller wants (e.g. 1/B for a
    batch mean); everything downstream inherits it.
    """
    grads: dict[str, np.ndarray] = {}
    grads["W2"] = cache.h1.T @ dlogits
    grads["b2"] = dlogits.sum(axis=0)
    dh1 = dlogits @ net.params["W2"].T
    return _backward_hidden(net, cache, dh1, grads)


def backward_from_hidden(
    net: Network, cache: ForwardCache, dh1: np.ndarray
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Backward pass entered at the hidden activations, skipping the softmax
    layer entirely (its blocks do not appear in the result)."""
    return _backward_hidden(net, cache, dh1, {})


def _backward_hidden(
    net: Network,
    cache: ForwardCache,
    dh1: np.ndarray,
    grads: dict[str, np.ndarray],
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    dz1 = dh1 * (cache.z1 > 0)
    grads["W1"] = cache.h0.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    dh0 = dz1 @ net.params["W1"].T
    dense_grads: dict[str, np.ndarray] = {}
    offset = 0
    batch = dh0.shape[0]
    for g in net.groups:
        seg = dh0[:, offset : offset + g.width]
        offset += g.width
        seg = seg.reshape(batch, g.num_templates, g.row_width)
        x = cache.inputs[g.name]
        if g.dense:
            if g.embedded:
                grads[f"E_{g.name}"] = np.einsum("bfv,bfd->vd", x, seg)
                dense_grads[g.name] = seg @ net.params[f"E_{g.name}"].T
            else:
                dense_grads[g.name] = seg
        else:
            de = np.zeros_like(net.params[f"E_{g.name}"])
            np.add.at(de, x.ravel(), seg.reshape(-1, g.embed_dim))
            grads[f"E_{g.name}"] = de
    return grads, dense_grads


def pack_inputs(examples: Sequence[Sequence[FeatureMatrix]]) -> dict[str, np.ndarray]:
    """Stack per-example FeatureMatrix lists into batched input arrays."""
    out: dict[str, np.ndarray] = {}
    for i in range(len(examples[0])):
        group = examples[0][i].group
        rows = np.stack([ex[i].rows for ex in examples])
        dtype = DTYPE if group.dense else np.int64
        out[group.name] = rows.astype(dtype)
    return out


# single-example views of the batched operations


def embed_forward(inputs: Sequence[FeatureMatrix], net: Network) -> np.ndarray:
    return embed_forward_batch(net, pack_inputs([inputs]))[0]


def hidden_forward(h0: np.ndarray, net: Network) -> np.ndarray:
    if h0.shape != (net.input_width,):
        raise StackpropError(f"h0 has shape {h0.shape}, expected ({net.input_width},)")
    return np.maximum(h0 @ net.params["W1"] + net.params["b1"], 0.0)


def softmax_xent(
    h1: np.ndarray, net: Network, gold: int
) -> tuple[np.ndarray, float, dict[str, np.ndarray]]:
    """Probabilities, loss, and gradients (dh1, dW2, db2) for one example."""
    logits = h1 @ net.params["W2"] + net.params["b2"]
    probs, losses, dlogits = softmax_xent_batch(logits[None, :], np.array([gold]))
    d = dlogits[0]
    grads = {
        "dh1": net.params["W2"] @ d,
        "dW2": np.outer(h1, d),
        "db2": d,
    }
    return probs[0], float(losses[0]), grads


def backprop(
    inputs: Sequence[FeatureMatrix], net: Network, gold: int
) -> tuple[float, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Full single-example forward/backward: loss, block gradients, and dense
    input gradients."""
    packed = pack_inputs([inputs])
    cache = forward_batch(net, packed)
    _, losses, dlogits = softmax_xent_batch(cache.logits, np.array([gold]))
    grads, dense = backward_batch(net, cache, dlogits)
    return float(losses[0]), grads, {k: v[0] for k, v in dense.items()}


def asgd_step(
    net: Network,
    grads: dict[str, np.ndarray],
    config: OptimizerConfig,
    scope: Optional[Sequence[str]] = None,
) -> None:
    """One momentum step with running-average maintenance on ``scope`` blocks.

    Blocks outside the scope keep their parameters, velocities, averages, and
    counts bit-identical. The learning rate decays as eta0 / (1 + step/gamma)
    on this network's own step counter.
    """
    blocks = list(scope) if scope is not None else net.block_names
    lr = config.eta0 / (1.0 + net.step / config.gamma)
    net.step += 1
    for name in blocks:
        g = grads.get(name)
        if g is None:
            raise StackpropError(f"no gradient supplied for block {name}")
        v = net.velocity[name]
        v *= config.mu
        v -= lr * g
        self_p = net.params[name]
        self_p += v
        if net.step > config.averaging_start:
            net.avg_count[name] += 1
            avg = net.average[name]
            avg += (self_p - avg) / net.avg_count[name]


# serialization: versioned container holding any number of networks


def _group_to_json(g: FeatureGroupSpec) -> dict:
    return {
        "name": g.name,
        "num_templates": g.num_templates,
        "vocab_size": g.vocab_size,
        "embed_dim": g.embed_dim,
        "dense": g.dense,
        "embedded": g.embedded,
    }


def _group_from_json(d: dict) -> FeatureGroupSpec:
    return FeatureGroupSpec(
        d["name"],
        d["num_templates"],
        d["vocab_size"],
        d["embed_dim"],
        d["dense"],
        d["embedded"],
    )


def save_model(
    dest: Union[str, BinaryIO], networks: dict[str, Network], meta: dict
) -> None:
    """Write networks and metadata as a checksummed binary container.

    Layout: magic, format version, length-prefixed JSON header, float64
    little-endian blocks (parameters, averages, velocities per network, in
    declared order), and a trailing SHA-256 of everything before it.
    """
    header = {
        "meta": meta,
        "networks": [
            {
                "name": name,
                "groups": [_group_to_json(g) for g in net.groups],
                "n_hidden": net.n_hidden,
                "n_out": net.n_out,
                "step": net.step,
                "blocks": [
                    {
                        "name": b,
                        "shape": list(net.params[b].shape),
                        "avg_count": net.avg_count[b],
                    }
                    for b in net.block_names
                ],
            }
            for name, net in networks.items()
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode(
        "utf-8"
    )
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<Q", len(header_bytes)))
    buf.write(header_bytes)
    for net in networks.values():
        for store in (net.params, net.average, net.velocity):
            for b in net.block_names:
                buf.write(np.ascontiguousarray(store[b], dtype="<f8").tobytes())
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    if isinstance(dest, str):
        with open(dest, "wb") as f:
            f.write(payload)
            f.write(digest)
    else:
        dest.write(payload)
        dest.write(digest)


def load_model(src: Union[str, BinaryIO]) -> tuple[dict[str, Network], dict]:
    if isinstance(src, str):
        with open(src, "rb") as f:
            raw = f.read()
    else:
        raw = src.read()
    if len(raw) < len(MAGIC) + 4 + 8 + 32:
        raise ModelError("model file truncated")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ModelError("model file checksum mismatch")
    view = io.BytesIO(payload)
    if view.read(len(MAGIC)) != MAGIC:
        raise ModelError("not a model file (bad magic bytes)")
    (version,) = struct.unpack("<I", view.read(4))
    if version != FORMAT_VERSION:
        raise ModelError(f"unsupported model format version {version}")
    (header_len,) = struct.unpack("<Q", view.read(8))
    try:
        header = json.loads(view.read(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelError(f"corrupt model header: {e}")
    networks: dict[str, Network] = {}
    for spec in header["networks"]:
        groups = [_group_from_json(d) for d in spec["groups"]]
        net = Network.__new__(Network)
        net.groups = groups
        net.n_hidden = spec["n_hidden"]
        net.n_out = spec["n_out"]
        net.input_width = sum(g.width for g in groups)
        net.step = spec["step"]
        net.block_names = [b["name"] for b in spec["blocks"]]
        shapes = {b["name"]: tuple(b["shape"]) for b in spec["blocks"]}
        net.avg_count = {b["name"]: b["avg_count"] for b in spec["blocks"]}
        net.params, net.average, net.velocity = {}, {}, {}
        for store in (net.params, net.average, net.velocity):
            for name in net.block_names:
                shape = shapes[name]
                count = int(np.prod(shape)) if shape else 1
                data = view.read(count * 8)
                if len(data) != count * 8:
                    raise ModelError("model file truncated inside parameter blocks")
                store[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
        networks[spec["name"]] = net
    return networks, header["meta"]
