"""The full hierarchical capsule classifier and its composite loss.

Pipeline per forward pass: conv feature block -> one shared primary capsule
layer -> one routed secondary capsule layer per hierarchy level -> per-level
class scores (capsule norms) -> per-level masked decoder heads fused by
concatenation into a single reconstruction of the input image.

The training loss is
    total = tau * reconstruction + (1 - tau) * sum_n lambda_n * margin_n
with the margin (hinge) loss per level
    L = sum_k T_k max(0, m_plus - ||v_k||)^2
        + gamma (1 - T_k) max(0, ||v_k|| - m_minus)^2
averaged over the batch.  T_k may be soft (mixup), in which case the same
rows also weight the decoder masks and the reconstruction target is the
mixed image.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .capsule import PrimaryCapsuleLayer, SecondaryCapsuleLayer
from .hierarchy import LabelTree, format_tree

CHECKPOINT_MAGIC = b"MLCP"
CHECKPOINT_VERSION = 1

DATASET_IMAGE_SHAPES = {
    "mnist": (1, 28, 28),
    "fashion_mnist": (1, 28, 28),
    "cifar10": (3, 32, 32),
    "cifar100": (3, 32, 32),
}

PROFILES = ("default", "reduced", "tiny")


class CheckpointError(ValueError):
    """Raised for malformed checkpoint files or fingerprint mismatches."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture + loss constants for one dataset."""

    dataset: str
    image_shape: tuple  # (C, H, W)
    conv_filters: tuple
    primary_channels: int
    primary_dim: int = 8
    secondary_dim: int = 16
    routing_iters: int = 3
    decoder_hidden: tuple = (512, 512)
    m_plus: float = 0.9
    m_minus: float = 0.1
    gamma: float = 0.5
    tau: float = 0.0005
    caps_weight_std: float = 0.1
    differentiate_couplings: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("image_shape", "conv_filters", "decoder_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return ModelConfig(**d)


def config_for(dataset: str, profile: str = "default", **overrides) -> ModelConfig:
    """Built-in architecture for a dataset name.

    Profiles: "default" (full widths), "reduced" (halved conv widths and
    primary channels, for desk-scale runs), "tiny" (smoke tests).
    """
    if dataset not in DATASET_IMAGE_SHAPES:
        raise ValueError(
            f"unknown dataset {dataset!r}; have {sorted(DATASET_IMAGE_SHAPES)}"
        )
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; have {PROFILES}")
    if dataset == "mnist":
        conv, primary = (32, 64), 4
    else:
        conv, primary = (32, 64, 128, 256, 512), 32
    cfg = ModelConfig(
        dataset=dataset,
        image_shape=DATASET_IMAGE_SHAPES[dataset],
        conv_filters=conv,
        primary_channels=primary,
    )
    if profile == "reduced":
        cfg = replace(
            cfg,
            conv_filters=tuple(max(1, f // 2) for f in cfg.conv_filters),
            primary_channels=max(1, cfg.primary_channels // 2),
        )
    elif profile == "tiny":
        cfg = replace(
            cfg,
            conv_filters=(8, 16),
            primary_channels=2,
            decoder_hidden=(128, 128),
        )
    return replace(cfg, **overrides) if overrides else cfg


def fingerprint(config: ModelConfig, tree: LabelTree) -> str:
    """Hex digest binding a checkpoint to its architecture and hierarchy."""
    blob = config.to_json() + "\n" + format_tree(tree)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class ForwardOutput:
    capsules: list  # per level, Tensor [B, K_n, secondary_dim]
    scores: list  # per level, Tensor [B, K_n] (capsule norms, in [0,1))
    reconstruction: Tensor  # [B, C, H, W], sigmoid range
    mask_rows: list = field(default_factory=list)  # per level, np [B, K_n]

    def predictions(self) -> np.ndarray:
        """Per-level argmax ids, [B, num_levels]; no consistency coercion."""
        return np.stack([s.data.argmax(axis=1) for s in self.scores], axis=1)

    def probabilities(self, level: int) -> np.ndarray:
        """Reported class probabilities: softmax over capsule norms."""
        x = self.scores[level].data
        e = np.exp(x - x.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)


class HierarchicalCapsNet:
    """Capsule classifier emitting one prediction per hierarchy level."""

    def __init__(self, config: ModelConfig, tree: LabelTree, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        self.tree = tree
        C, H, W = config.image_shape
        self.conv = []
        in_ch = C
        for i, out_ch in enumerate(config.conv_filters):
            std = np.sqrt(2.0 / (in_ch * 9))
            kernel = T.tensor(
                rng.normal(0.0, std, size=(out_ch, in_ch, 3, 3)), requires_grad=True
            )
            bias = T.tensor(np.zeros(out_ch), requires_grad=True)
            self.conv.append((kernel, bias))
            in_ch = out_ch
        self.primary = PrimaryCapsuleLayer(
            in_ch, config.primary_channels, rng, capsule_dim=config.primary_dim
        )
        num_caps = self.primary.capsule_count(H, W)
        self.secondary = [
            SecondaryCapsuleLayer(
                num_caps,
                k,
                rng,
                in_dim=config.primary_dim,
                out_dim=config.secondary_dim,
                routing_iters=config.routing_iters,
                weight_std=config.caps_weight_std,
                differentiate_couplings=config.differentiate_couplings,
            )
            for k in tree.class_counts
        ]
        self.decoders = []
        for k in tree.class_counts:
            widths = (config.secondary_dim * k,) + tuple(config.decoder_hidden)
            layers = []
            for w_in, w_out in zip(widths[:-1], widths[1:]):
                std = np.sqrt(2.0 / w_in)
                layers.append(
                    (
                        T.tensor(rng.normal(0.0, std, size=(w_in, w_out)),
                                 requires_grad=True),
                        T.tensor(np.zeros(w_out), requires_grad=True),
                    )
                )
            self.decoders.append(layers)
        fused_in = len(tree.class_counts) * config.decoder_hidden[-1]
        fused_out = C * H * W
        std = np.sqrt(1.0 / fused_in)
        self.fused = (
            T.tensor(rng.normal(0.0, std, size=(fused_in, fused_out)),
                     requires_grad=True),
            T.tensor(np.zeros(fused_out), requires_grad=True),
        )

    # -- parameters ---------------------------------------------------------

    def params(self) -> dict:
        out = {}
        for i, (k, b) in enumerate(self.conv):
            out[f"conv{i}.kernel"] = k
            out[f"conv{i}.bias"] = b
        out.update(self.primary.params("primary"))
        for n, layer in enumerate(self.secondary):
            out.update(layer.params(f"secondary{n}"))
        for n, layers in enumerate(self.decoders):
            for j, (w, b) in enumerate(layers):
                out[f"decoder{n}.h{j}.weight"] = w
                out[f"decoder{n}.h{j}.bias"] = b
        out["fused.weight"] = self.fused[0]
        out["fused.bias"] = self.fused[1]
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params().values())

    def zero_grads(self):
        for p in self.params().values():
            p.zero_grad()

    def load_state(self, state: dict):
        params = self.params()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise CheckpointError(
                f"parameter set mismatch: missing {missing}, unexpected {extra}"
            )
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"parameter {name}: shape {arr.shape} != {p.data.shape}"
                )
            p.data = arr.astype(p.data.dtype, copy=True)
            p.grad = None

    # -- forward ------------------------------------------------------------

    def forward(self, x, mask_rows=None) -> ForwardOutput:
        """Run the network on normalized images x:[B,C,H,W].

        ``mask_rows`` selects which capsules feed the decoders: a list of
        per-level [B, K_n] rows (one-hot true labels during training, soft
        rows under mixup).  When None, the per-level argmax of the scores is
        used, which is the inference behaviour.
        """
        if not isinstance(x, Tensor):
            x = T.tensor(x)
        if x.data.ndim != 4 or x.data.shape[1:] != tuple(self.config.image_shape):
            raise T.ShapeError(
                f"forward: expected [B,{','.join(map(str, self.config.image_shape))}]"
                f", got {x.data.shape}"
            )
        h = x
        for kernel, bias in self.conv:
            h = T.relu(T.conv2d(h, kernel, bias))
        u = self.primary.forward(h)

        capsules = [layer.forward(u) for layer in self.secondary]
        scores = [T.l2_norm(v, axis=-1) for v in capsules]

        if mask_rows is None:
            mask_rows = []
            for s, k in zip(scores, self.tree.class_counts):
                rows = np.zeros_like(s.data)
                rows[np.arange(rows.shape[0]), s.data.argmax(axis=1)] = 1.0
                mask_rows.append(rows)
        else:
            mask_rows = [np.asarray(m) for m in mask_rows]
            for m, k in zip(mask_rows, self.tree.class_counts):
                if m.shape != (x.data.shape[0], k):
                    raise T.ShapeError(
                        f"mask rows shape {m.shape} != ({x.data.shape[0]}, {k})"
                    )

        recon = self.decode(capsules, mask_rows)
        return ForwardOutput(capsules, scores, recon, mask_rows)

    def decode(self, capsules, mask_rows) -> Tensor:
        """Masked per-level decoder heads fused into one reconstruction.

        Gradients reach only the capsules selected by ``mask_rows``; the
        fused layer ends in a sigmoid so outputs live in (0,1).
        """
        B = capsules[0].data.shape[0]
        C, H, W = self.config.image_shape
        heads = []
        for v, rows, layers, k in zip(
            capsules, mask_rows, self.decoders, self.tree.class_counts
        ):
            masked = T.mul_const(v, np.asarray(rows)[:, :, None])
            flat = T.reshape(masked, (B, k * self.config.secondary_dim))
            h = flat
            for w, b in layers:
                h = T.relu(T.dense(h, w, b))
            heads.append(h)
        fused = T.concat(heads, axis=1)
        img = T.sigmoid(T.dense(fused, self.fused[0], self.fused[1]))
        return T.reshape(img, (B, C, H, W))


def one_hot_rows(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.zeros((labels.shape[0], num_classes), dtype=T.default_dtype())
    rows[np.arange(labels.shape[0]), labels] = 1.0
    return rows


# ---------------------------------------------------------------------------
# losses


def margin_loss(scores: Tensor, target_rows, m_plus=0.9, m_minus=0.1,
                gamma=0.5) -> Tensor:
    """Two-sided hinge on capsule norms, summed over classes, batch-averaged.

    ``target_rows`` is a constant [B, K] array; rows are one-hot or soft
    (the loss is affine in the targets, so soft rows are the exact convex
    combination of the hard-label losses).
    """
    rows = np.asarray(target_rows)
    if rows.shape != scores.data.shape:
        raise T.ShapeError(
            f"margin_loss: targets {rows.shape} != scores {scores.data.shape}"
        )
    present = T.square(T.relu(T.affine(scores, -1.0, m_plus)))
    absent = T.square(T.relu(T.affine(scores, 1.0, -m_minus)))
    per_class = T.add(
        T.mul_const(present, rows),
        T.scale(T.mul_const(absent, 1.0 - rows), gamma),
    )
    total = T.sum_along(per_class)
    return T.scale(total, 1.0 / scores.data.shape[0])


def reconstruction_loss(x_raw, x_hat: Tensor) -> Tensor:
    """Squared L2 distance to the raw [0,1] image, batch-averaged."""
    target = np.asarray(x_raw)
    if target.shape != x_hat.data.shape:
        raise T.ShapeError(
            f"reconstruction_loss: target {target.shape} != output "
            f"{x_hat.data.shape}"
        )
    diff = T.add_const(x_hat, -target.astype(x_hat.data.dtype))
    return T.scale(T.sum_along(T.square(diff)), 1.0 / target.shape[0])


def total_loss(level_losses, recon: Tensor, lambdas, tau: float) -> Tensor:
    """tau-weighted reconstruction plus (1-tau)-weighted level mixture."""
    if len(level_losses) != len(lambdas):
        raise ValueError(
            f"{len(level_losses)} level losses but {len(lambdas)} lambdas"
        )
    out = T.scale(recon, tau)
    for lam, loss in zip(lambdas, level_losses):
        out = T.add(out, T.scale(loss, (1.0 - tau) * float(lam)))
    return out


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (little-endian):
#   4s   magic "MLCP"
#   u32  format version
#   32s  sha256 fingerprint of (config JSON + hierarchy dump)
#   u32  parameter count
#   per parameter, sorted by name:
#     u32 name length, name bytes (utf-8)
#     u32 rank, u32 extents...
#     float32 payload, row-major


def save_checkpoint(path, model: HierarchicalCapsNet):
    fp = bytes.fromhex(fingerprint(model.config, model.tree))
    params = model.params()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(fp)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = params[name].data.astype("<f4", copy=False)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes(order="C"))


def read_checkpoint(path):
    """Parse a checkpoint; returns (fingerprint_hex, {name: float32 array})."""

    def take(fh, n, what):
        buf = fh.read(n)
        if len(buf) != n:
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        return buf

    with open(path, "rb") as fh:
        if take(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", take(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        fp = take(fh, 32, "fingerprint").hex()
        (count,) = struct.unpack("<I", take(fh, 4, "parameter count"))
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", take(fh, 4, "name length"))
            name = take(fh, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", take(fh, 4, "rank"))
            shape = struct.unpack(f"<{rank}I", take(fh, 4 * rank, "extents"))
            n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
            payload = take(fh, 4 * n_items, f"payload of {name}")
            params[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last parameter")
    return fp, params


def load_checkpoint(path, model: HierarchicalCapsNet):
    """Load parameters into ``model``; refuses on fingerprint mismatch."""
    fp, params = read_checkpoint(path)
    expected = fingerprint(model.config, model.tree)
    if fp != expected:
        raise CheckpointError(
            f"{path}: fingerprint {fp[:12]}... does not match the requested "
            f"config/hierarchy ({expected[:12]}...); refusing to load"
        )
    model.load_state(params)
    return model
