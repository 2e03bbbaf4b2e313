"""SwiGLU experts, the pre-LN MoE block and a small feed-forward stack for toy tasks."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .balance import BalanceConfig, LoadStats, layer_balance_loss
from .estimators import EstimatorConfig, EstimatorKind, RoutingTrace, gshard_forward, inference, route_train
from .routing import RouterParams, router_logits

HEADS = ("regression", "classification")


@dataclass
class ExpertParams:
    w_gate: Tensor  # (d_inner, d_model)
    w_up: Tensor  # (d_inner, d_model)
    w_down: Tensor  # (d_model, d_inner)

    @classmethod
    def init(cls, d_model: int, d_inner: int, rng: np.random.Generator, std: float) -> ExpertParams:
        def draw(shape, name):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)

        return cls(draw((d_inner, d_model), "w_gate"), draw((d_inner, d_model), "w_up"), draw((d_model, d_inner), "w_down"))

    def tensors(self) -> list[Tensor]:
        return [self.w_gate, self.w_up, self.w_down]

    def __call__(self, x: Tensor) -> Tensor:
        return expert_forward(x, self)


def expert_forward(x, w: ExpertParams) -> Tensor:
    """W_down (silu(W_gate x) * (W_up x)), row-wise for a batch."""
    x = ad.as_tensor(x)
    d_model = w.w_gate.shape[1]
    if x.shape[-1] != d_model:
        raise ad.ShapeError(f"expert expects d_model={d_model}, got input shape {x.shape}")
    gate = ad.silu(ad.matmul(x, ad.transpose(w.w_gate)))
    up = ad.matmul(x, ad.transpose(w.w_up))
    return ad.matmul(ad.mul(gate, up), ad.transpose(w.w_down))


@dataclass(frozen=True)
class MoELayerSpec:
    n_expert: int = 8
    top_k: int = 2
    d_model: int = 16
    d_inner: int = 32
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    balance: BalanceConfig = field(default_factory=BalanceConfig)

    def __post_init__(self):
        if min(self.n_expert, self.top_k, self.d_model, self.d_inner) < 1:
            raise ValueError("layer dimensions must be positive")
        if self.top_k > self.n_expert:
            raise ValueError(f"top_k={self.top_k} exceeds n_expert={self.n_expert}")


@dataclass(frozen=True)
class ToyModelSpec:
    layers: tuple[MoELayerSpec, ...]
    d_out: int = 4
    head: str = "regression"

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValueError("depth must be >= 1")
        d = {ls.d_model for ls in self.layers}
        if len(d) != 1:
            raise ValueError("all blocks must share d_model")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.d_out < 1:
            raise ValueError("d_out must be positive")

    @classmethod
    def build(cls, depth: int = 2, d_out: int = 4, head: str = "regression", **layer_kwargs) -> ToyModelSpec:
        if depth < 1:
            raise ValueError("depth must be >= 1")
        layer = MoELayerSpec(**layer_kwargs)
        return cls(tuple(layer for _ in range(depth)), d_out, head)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def d_model(self) -> int:
        return self.layers[0].d_model

    def to_dict(self) -> dict:
        d = asdict(self)
        for layer in d["layers"]:
            layer["estimator"]["kind"] = EstimatorKind(layer["estimator"]["kind"]).value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ToyModelSpec:
        layers = tuple(
            MoELayerSpec(
                **{k: v for k, v in ls.items() if k not in ("estimator", "balance")},
                estimator=EstimatorConfig(**ls["estimator"]),
                balance=BalanceConfig(**ls["balance"]),
            )
            for ls in d["layers"]
        )
        return cls(layers, d["d_out"], d["head"])


@dataclass
class BlockParams:
    ln_gain: Tensor
    ln_bias: Tensor
    router: RouterParams
    experts: list[ExpertParams]

    def named_tensors(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.ln_gain", self.ln_gain), (f"{prefix}.ln_bias", self.ln_bias), (f"{prefix}.router", self.router.weight)]
        for i, e in enumerate(self.experts):
            out += [(f"{prefix}.expert{i}.{n}", t) for n, t in zip(("w_gate", "w_up", "w_down"), e.tensors())]
        return out


@dataclass
class ModelParams:
    blocks: list[BlockParams]
    head_w: Tensor
    head_b: Tensor

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for i, b in enumerate(self.blocks):
            out += b.named_tensors(f"block{i}")
        return out + [("head.w", self.head_w), ("head.b", self.head_b)]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]


def init_params(spec: ToyModelSpec, rng: np.random.Generator, router_std: float = 0.02, head_std: float = 0.02) -> ModelParams:
    """Gaussian init; expert weights use std 0.02 / sqrt(2 * depth)."""
    expert_std = 0.02 / math.sqrt(2 * spec.depth)
    blocks = []
    for ls in spec.layers:
        blocks.append(
            BlockParams(
                ln_gain=Tensor(np.ones(ls.d_model), requires_grad=True),
                ln_bias=Tensor(np.zeros(ls.d_model), requires_grad=True),
                router=RouterParams.init(ls.n_expert, ls.d_model, rng, router_std),
                experts=[ExpertParams.init(ls.d_model, ls.d_inner, rng, expert_std) for _ in range(ls.n_expert)],
            )
        )
    head_w = Tensor(rng.normal(0.0, head_std, size=(spec.d_out, spec.d_model)), requires_grad=True)
    head_b = Tensor(np.zeros(spec.d_out), requires_grad=True)
    return ModelParams(blocks, head_w, head_b)


class BlockOutput(NamedTuple):
    y: Tensor
    trace: RoutingTrace
    logits: Tensor


def moe_block_forward(
    x,
    spec: MoELayerSpec,
    params: BlockParams,
    rng: np.random.Generator | None,
    training: bool,
    inference_mode: str | None = None,
    frozen_mask: np.ndarray | None = None,
) -> BlockOutput:
    """x + MoE(LayerNorm(x)) for a (T, d_model) batch.

    ``frozen_mask`` pins a GShard layer's TopK selection (for gradient checks).
    """
    x = ad.as_tensor(x)
    h = ad.layer_norm(x, params.ln_gain, params.ln_bias)
    z = router_logits(h, params.router)
    experts = params.experts
    if frozen_mask is not None:
        if spec.estimator.kind is not EstimatorKind.GSHARD:
            raise ValueError("frozen_mask applies to GShard layers only")
        moe, trace = gshard_forward(h, z, spec.top_k, experts, rng, training, spec.estimator, frozen_mask)
    elif training:
        moe, trace = route_train(h, z, spec.top_k, spec.estimator, experts, rng)
    else:
        moe, trace = inference(h, z, spec.top_k, spec.estimator, experts, rng, mode=inference_mode)
    return BlockOutput(ad.add(x, moe), trace, z)


@dataclass
class ModelOutput:
    outputs: Tensor
    traces: list[RoutingTrace]
    logits: list[Tensor]
    balance_losses: list[Tensor]
    stats: list[LoadStats]

    @property
    def balance_total(self) -> Tensor:
        total = self.balance_losses[0]
        for b in self.balance_losses[1:]:
            total = ad.add(total, b)
        return total


def model_forward(
    batch,
    spec: ToyModelSpec,
    params: ModelParams,
    rng: np.random.Generator | None,
    training: bool,
    inference_mode: str | None = None,
    frozen_masks: Sequence[np.ndarray] | None = None,
) -> ModelOutput:
    """Run the block stack and the linear head; collect traces and per-layer balance losses.

    Each balance loss already carries its layer's alpha, so the training
    objective is ``task_loss + sum(balance_losses)``.
    """
    h = ad.as_tensor(batch)
    if h.ndim != 2 or h.shape[1] != spec.d_model:
        raise ad.ShapeError(f"model expects (T, {spec.d_model}) inputs, got {h.shape}")
    traces, logits, losses, stats = [], [], [], []
    for i, (ls, bp) in enumerate(zip(spec.layers, params.blocks)):
        fm = None if frozen_masks is None else frozen_masks[i]
        h, trace, z = moe_block_forward(h, ls, bp, rng, training, inference_mode, fm)
        loss, st = layer_balance_loss(z, trace, ls.balance)
        traces.append(trace)
        logits.append(z)
        losses.append(loss)
        stats.append(st)
    out = ad.add(ad.matmul(h, ad.transpose(params.head_w)), params.head_b)
    return ModelOutput(out, traces, logits, losses, stats)


def task_loss(outputs: Tensor, targets: np.ndarray, head: str) -> Tensor:
    if head == "classification":
        return ad.cross_entropy(outputs, targets)
    return ad.mse_loss(outputs, Tensor(targets))


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"SRMOECK1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, spec: ToyModelSpec, params: ModelParams, seed: int, extra: dict | None = None) -> None:
    """Write ``MAGIC | u64 header length | JSON header | little-endian f64 blobs``.

    Blobs follow ``params.named_tensors()`` order; the header lists each name,
    shape and byte offset relative to the start of the blob section.
    """
    entries = []
    blobs = []
    offset = 0
    for name, t in params.named_tensors():
        raw = np.ascontiguousarray(t.values, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": "sparse-routing-checkpoint",
        "version": CHECKPOINT_VERSION,
        "estimator": spec.layers[0].estimator.kind.value,
        "seed": int(seed),
        "model": spec.to_dict(),
        "tensors": entries,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path) -> tuple[ToyModelSpec, ModelParams, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    spec = ToyModelSpec.from_dict(header["model"])
    params = init_params(spec, np.random.default_rng(0))
    base = 16 + hlen
    by_name = dict(params.named_tensors())
    if [e["name"] for e in header["tensors"]] != list(by_name):
        raise ValueError(f"{path}: tensor list does not match the model spec")
    for e in header["tensors"]:
        t = by_name[e["name"]]
        arr = np.frombuffer(data, dtype="<f8", count=e["nbytes"] // 8, offset=base + e["offset"])
        arr = arr.reshape(e["shape"]).astype(np.float64)
        if arr.shape != t.shape:
            raise ValueError(f"{path}: tensor {e['name']} has shape {arr.shape}, expected {t.shape}")
        t.values = arr
    return spec, params, header
