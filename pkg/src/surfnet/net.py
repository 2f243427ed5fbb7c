"""Trainable surface-network layers and models.

Two layer APIs coexist:

* standalone layers in equation form, post-activation:
  ``x' = rho(A (op x) + B x)`` and the Dirac down/up pair;
* pre-activation ResNet-v2 blocks (BN -> ELU -> 1x1 -> operator-combine,
  twice, plus residual add), assembled into networks by ``Network``.

Channel mixing on Dirac paths acts on quaternion slots (channels/4),
replicated identically across the four lanes, so it commutes with the
quaternion structure of the operator.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import DimensionMismatch, NonQuadChannels, ShapeMismatch
from .la import SparseOperator, power_iteration_norm, read_tnsr, write_tnsr
from .ops import DiracPack, LaplacePack

KIND_CHOICES = ("laplace", "dirac", "avgpool", "mlp")


# -- standalone layers (equation form) ----------------------------------------


def linear1x1(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    out = ad.matmul_nt(x, W)
    return ad.add_bias(out, b) if b is not None else out


def elu(x: Tensor) -> Tensor:
    return ad.elu(x)


def laplace_layer(x: Tensor, pack: LaplacePack, A: Tensor, B: Tensor,
                  rho=ad.elu) -> Tensor:
    """x' = rho(A Delta x + B x); Delta is constant, gradients reach x, A, B."""
    pre = ad.add(ad.matmul_nt(ad.spmv_apply(pack.delta, x), A),
                 ad.matmul_nt(x, B))
    return rho(pre) if rho is not None else pre


def dirac_down_layer(x: Tensor, y: Tensor, pack: DiracPack, C: Tensor,
                     E: Tensor, rho=ad.elu) -> Tensor:
    """Vertex-to-face layer y' = rho(C D x + E y) with slot-wise mixing."""
    pre = ad.add(ad.quat_channel_mix(ad.quat_spmv_apply(pack.D, x), C),
                 ad.quat_channel_mix(y, E))
    return rho(pre) if rho is not None else pre


def dirac_up_layer(y: Tensor, x: Tensor, pack: DiracPack, A: Tensor,
                   B: Tensor, rho=ad.elu) -> Tensor:
    """Face-to-vertex layer x' = rho(A D* y + B x)."""
    pre = ad.add(ad.quat_channel_mix(ad.quat_spmv_apply(pack.Dadj, y), A),
                 ad.quat_channel_mix(x, B))
    return rho(pre) if rho is not None else pre


def avgpool_layer(x: Tensor, A: Tensor, B: Tensor, rho=ad.elu,
                  segments=None) -> Tensor:
    """x' = rho(x B^T + broadcast(mean rows) A^T), per mesh segment."""
    seg = segments if segments is not None else np.array([0, x.value.shape[0]])
    pre = ad.add(ad.matmul_nt(x, B),
                 ad.matmul_nt(ad.segment_mean_broadcast(x, seg), A))
    return rho(pre) if rho is not None else pre


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: dict,
               train: bool, momentum: float = 0.9) -> Tensor:
    """Batch normalization over all rows with running statistics.

    ``state`` holds "mean" and "var" arrays; train mode normalizes by batch
    statistics and updates the running ones in place.
    """
    if train:
        out, mean, var = ad.batch_norm_train(x, gamma, beta)
        state["mean"] *= momentum
        state["mean"] += (1.0 - momentum) * mean
        state["var"] *= momentum
        state["var"] += (1.0 - momentum) * var
        return out
    return ad.batch_norm_eval(x, gamma, beta, state["mean"], state["var"])


# -- network specification -----------------------------------------------------


@dataclass
class NetworkSpec:
    """Declarative stack of ResNet-v2 blocks.

    ``avgpool_period`` > 0 replaces every period-th block with an
    average-pooling block (applies to laplace/dirac kinds). Dirac kind
    requires channel counts divisible by 4.
    """

    kind: str
    blocks: int
    channels: int
    in_channels: int
    out_channels: int
    avgpool_period: int = 3
    zero_init_output: bool = False

    def __post_init__(self):
        if self.kind not in KIND_CHOICES:
            raise DimensionMismatch(f"unknown network kind {self.kind!r}")
        if self.kind == "dirac":
            for label, c in (("channels", self.channels),
                             ("in_channels", self.in_channels),
                             ("out_channels", self.out_channels)):
                if c % 4:
                    raise NonQuadChannels(f"dirac {label}={c} not divisible by 4")

    def block_kinds(self) -> list[str]:
        kinds = []
        for i in range(self.blocks):
            if (self.kind in ("laplace", "dirac") and self.avgpool_period > 0
                    and (i + 1) % self.avgpool_period == 0):
                kinds.append("avgpool")
            else:
                kinds.append(self.kind)
        return kinds

    @property
    def lifted(self) -> bool:
        return self.kind == "dirac"


def receptive_field_hops(spec: NetworkSpec) -> int:
    """Operator-hop count: each Laplace sub-layer moves one ring, a Dirac
    down/up pair moves one; pooling and MLP blocks add none. Diagnostic only."""
    hops = {"laplace": 2, "dirac": 1, "avgpool": 0, "mlp": 0}
    return sum(hops[k] for k in spec.block_kinds())


class Network:
    """Parameter container plus forward pass for a NetworkSpec."""

    def __init__(self, spec: NetworkSpec, params: dict[str, np.ndarray],
                 bn_state: dict[str, dict[str, np.ndarray]]):
        self.spec = spec
        self.params = params
        self.bn_state = bn_state

    # -- construction ----------------------------------------------------

    @classmethod
    def init(cls, spec: NetworkSpec, seed: int = 0,
             weight_scale: float = 1.0, op_path_scale: float = 0.1) -> "Network":
        rng = np.random.default_rng(seed)
        p: dict[str, np.ndarray] = {}
        bn: dict[str, dict[str, np.ndarray]] = {}
        c = spec.channels

        def dense(shape, scale):
            fan_in = shape[1]
            return rng.standard_normal(shape) * (scale / np.sqrt(fan_in))

        def add_bn(name):
            p[f"{name}.gamma"] = np.ones(c)
            p[f"{name}.beta"] = np.zeros(c)
            bn[name] = {"mean": np.zeros(c), "var": np.ones(c)}

        if spec.lifted:
            m = c // 4
            p["in.W"] = dense((m, spec.in_channels // 4), weight_scale)
            p["out.W"] = (np.zeros((spec.out_channels // 4, m))
                          if spec.zero_init_output
                          else dense((spec.out_channels // 4, m), weight_scale))
        else:
            p["in.W"] = dense((c, spec.in_channels), weight_scale)
            p["in.b"] = np.zeros(c)
            p["out.W"] = (np.zeros((spec.out_channels, c))
                          if spec.zero_init_output
                          else dense((spec.out_channels, c), weight_scale))
            p["out.b"] = np.zeros(spec.out_channels)

        for i, kind in enumerate(spec.block_kinds()):
            pre = f"b{i}"
            if kind == "dirac":
                m = c // 4
                for sub, names in (("s1", ("bnx", "bny")), ("s2", ("bny2", "bnx2"))):
                    for n in names:
                        add_bn(f"{pre}.{sub}.{n}")
                p[f"{pre}.s1.linx.W"] = dense((m, m), weight_scale)
                p[f"{pre}.s1.liny.W"] = dense((m, m), weight_scale)
                p[f"{pre}.s1.C"] = dense((m, m), op_path_scale)
                p[f"{pre}.s1.E"] = dense((m, m), weight_scale)
                p[f"{pre}.s2.liny2.W"] = dense((m, m), weight_scale)
                p[f"{pre}.s2.linx2.W"] = dense((m, m), weight_scale)
                p[f"{pre}.s2.A"] = dense((m, m), op_path_scale)
                p[f"{pre}.s2.B"] = dense((m, m), weight_scale)
            else:
                # no biases on block linears: the following BN subtracts them
                mixdim = c // 4 if spec.lifted else c
                for sub in ("s1", "s2"):
                    add_bn(f"{pre}.{sub}.bn")
                    p[f"{pre}.{sub}.lin.W"] = dense((mixdim, mixdim), weight_scale)
                    if kind == "laplace":
                        p[f"{pre}.{sub}.A"] = dense((mixdim, mixdim), op_path_scale)
                    elif kind == "avgpool":
                        p[f"{pre}.{sub}.A"] = dense((mixdim, mixdim), weight_scale)
                    p[f"{pre}.{sub}.B"] = dense((mixdim, mixdim), weight_scale)
        return cls(spec, p, bn)

    def wrap(self, tape: Tape) -> dict[str, Tensor]:
        return {k: ad.leaf(tape, v, requires_grad=True)
                for k, v in self.params.items()}

    # -- forward ----------------------------------------------------------

    def forward(self, tape: Tape, x, pt: dict[str, Tensor], *,
                lap: LaplacePack | None = None,
                dirac: DiracPack | None = None,
                segments=None, train: bool = False,
                collect: list | None = None) -> Tensor:
        """Run the block stack. ``x`` is a Tensor or an (N, in_channels)
        array; ``segments`` are vertex row boundaries for batched meshes."""
        spec = self.spec
        if not isinstance(x, Tensor):
            x = ad.leaf(tape, x)
        if x.value.shape[1] != spec.in_channels:
            raise DimensionMismatch(
                f"input has {x.value.shape[1]} channels, spec wants {spec.in_channels}")
        if spec.kind == "laplace" and lap is None:
            raise DimensionMismatch("laplace network needs a LaplacePack")
        if spec.kind == "dirac" and dirac is None:
            raise DimensionMismatch("dirac network needs a DiracPack")
        seg = segments if segments is not None else np.array([0, x.value.shape[0]])

        mix = ad.quat_channel_mix if spec.lifted else ad.matmul_nt
        h = mix(x, pt["in.W"])
        if "in.b" in pt:
            h = ad.add_bias(h, pt["in.b"])
        y = None
        if spec.kind == "dirac":
            y = ad.leaf(tape, np.zeros((dirac.Mf.shape[0], spec.channels)))

        for i, kind in enumerate(spec.block_kinds()):
            pre = f"b{i}"
            if kind == "dirac":
                h, y = self._dirac_block(pre, h, y, pt, dirac, train)
            else:
                h = self._scalar_block(pre, kind, h, pt, lap, seg, train)
            if collect is not None:
                collect.append(h.value.copy())

        out = mix(h, pt["out.W"])
        if "out.b" in pt:
            out = ad.add_bias(out, pt["out.b"])
        return out

    def _bn(self, name, x, pt, train):
        return batch_norm(x, pt[f"{name}.gamma"], pt[f"{name}.beta"],
                          self.bn_state[name], train)

    def _scalar_block(self, pre, kind, h, pt, lap, seg, train):
        spec = self.spec
        mix = ad.quat_channel_mix if spec.lifted else ad.matmul_nt

        def sub(name, u):
            v = ad.elu(self._bn(f"{pre}.{name}.bn", u, pt, train))
            v = mix(v, pt[f"{pre}.{name}.lin.W"])
            if f"{pre}.{name}.lin.b" in pt:
                v = ad.add_bias(v, pt[f"{pre}.{name}.lin.b"])
            bpath = mix(v, pt[f"{pre}.{name}.B"])
            if kind == "laplace":
                return ad.add(mix(ad.spmv_apply(lap.delta, v), pt[f"{pre}.{name}.A"]), bpath)
            if kind == "avgpool":
                pooled = ad.segment_mean_broadcast(v, seg)
                return ad.add(mix(pooled, pt[f"{pre}.{name}.A"]), bpath)
            return bpath  # mlp

        branch = sub("s2", sub("s1", h))
        return ad.add(h, branch)

    def _dirac_block(self, pre, x, y, pt, dirac, train):
        hx = ad.quat_channel_mix(
            ad.elu(self._bn(f"{pre}.s1.bnx", x, pt, train)), pt[f"{pre}.s1.linx.W"])
        hy = ad.quat_channel_mix(
            ad.elu(self._bn(f"{pre}.s1.bny", y, pt, train)), pt[f"{pre}.s1.liny.W"])
        down = ad.add(ad.quat_channel_mix(ad.quat_spmv_apply(dirac.D, hx),
                                          pt[f"{pre}.s1.C"]),
                      ad.quat_channel_mix(hy, pt[f"{pre}.s1.E"]))
        y_new = ad.add(y, down)
        hy2 = ad.quat_channel_mix(
            ad.elu(self._bn(f"{pre}.s2.bny2", y_new, pt, train)), pt[f"{pre}.s2.liny2.W"])
        hx2 = ad.quat_channel_mix(
            ad.elu(self._bn(f"{pre}.s2.bnx2", x, pt, train)), pt[f"{pre}.s2.linx2.W"])
        up = ad.add(ad.quat_channel_mix(ad.quat_spmv_apply(dirac.Dadj, hy2),
                                        pt[f"{pre}.s2.A"]),
                    ad.quat_channel_mix(hx2, pt[f"{pre}.s2.B"]))
        return ad.add(x, up), y_new

    def forward_plain(self, x, *, lap=None, dirac=None, segments=None,
                      collect: list | None = None) -> np.ndarray:
        """Inference forward (eval-mode BN, no gradients)."""
        tape = Tape()
        pt = {k: ad.leaf(tape, v) for k, v in self.params.items()}
        out = self.forward(tape, np.asarray(x, float), pt, lap=lap,
                           dirac=dirac, segments=segments, train=False,
                           collect=collect)
        return out.value


# -- Lipschitz bound -----------------------------------------------------------


def _sigma(M: np.ndarray) -> float:
    return float(np.linalg.svd(M, compute_uv=False)[0]) if M.size else 0.0


def lipschitz_bound(net: Network, *, lap: LaplacePack | None = None,
                    dirac: DiracPack | None = None, iters: int = 2000,
                    seed: int = 0) -> float:
    """Analytic input-Lipschitz bound of the eval-mode network.

    Per block the residual branch contributes the product of its sub-layer
    bounds: BN eval scale x ELU (1) x 1x1 spectral norm x operator-combine
    (sigma(A) ||op|| + sigma(B)); the block is 1 + branch. Dirac blocks track
    both streams through a nonnegative 2x2 transfer matrix. Operator norms
    come from power iteration, weight norms from exact SVD.
    """
    spec = net.spec
    p = net.params

    def bn_scale(name):
        st = net.bn_state[name]
        return float(np.max(np.abs(p[f"{name}.gamma"])
                            / np.sqrt(st["var"] + ad.BN_EPS)))

    norm_delta = (power_iteration_norm(lap.delta, iters=iters, seed=seed)
                  if lap is not None else 0.0)
    norm_D = (power_iteration_norm(dirac.D, iters=iters, seed=seed)
              if dirac is not None else 0.0)
    norm_Dadj = (power_iteration_norm(dirac.Dadj, iters=iters, seed=seed)
                 if dirac is not None else 0.0)

    total = np.eye(2)
    for i, kind in enumerate(spec.block_kinds()):
        pre = f"b{i}"
        if kind == "dirac":
            lx = bn_scale(f"{pre}.s1.bnx") * _sigma(p[f"{pre}.s1.linx.W"])
            ly = bn_scale(f"{pre}.s1.bny") * _sigma(p[f"{pre}.s1.liny.W"])
            ly2 = bn_scale(f"{pre}.s2.bny2") * _sigma(p[f"{pre}.s2.liny2.W"])
            lx2 = bn_scale(f"{pre}.s2.bnx2") * _sigma(p[f"{pre}.s2.linx2.W"])
            cD = _sigma(p[f"{pre}.s1.C"]) * norm_D * lx
            eE = _sigma(p[f"{pre}.s1.E"]) * ly
            aD = _sigma(p[f"{pre}.s2.A"]) * norm_Dadj * ly2
            bB = _sigma(p[f"{pre}.s2.B"]) * lx2
            T = np.array([
                [1.0 + bB + cD * aD, (1.0 + eE) * aD],
                [cD, 1.0 + eE],
            ])
        else:
            branch = 1.0
            for sub in ("s1", "s2"):
                lin = bn_scale(f"{pre}.{sub}.bn") * _sigma(p[f"{pre}.{sub}.lin.W"])
                a_key = f"{pre}.{sub}.A"
                if kind == "laplace":
                    combine = _sigma(p[a_key]) * norm_delta + _sigma(p[f"{pre}.{sub}.B"])
                elif kind == "avgpool":
                    combine = _sigma(p[a_key]) + _sigma(p[f"{pre}.{sub}.B"])
                else:
                    combine = _sigma(p[f"{pre}.{sub}.B"])
                branch *= lin * combine
            T = np.array([[1.0 + branch, 0.0], [0.0, 1.0]])
        total = T @ total
    bound = _sigma(p["in.W"]) * _sigma(total) * _sigma(p["out.W"])
    return float(bound)


# -- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float = 1e-3, weight_decay: float = 1e-5,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One Adam update with decoupled weight decay, in place; deterministic."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name in sorted(params):
        g = np.asarray(grads[name], dtype=np.float64)
        pv = params[name]
        if g.shape != pv.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {pv.shape}")
        m = state.m.setdefault(name, np.zeros_like(pv))
        v = state.v.setdefault(name, np.zeros_like(pv))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            pv -= lr * weight_decay * pv
        pv -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


# -- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    adam: AdamState
    bn_state: dict[str, dict[str, np.ndarray]]
    step: int
    seed: int
    rng_state: dict | None = None
    extra_params: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def network(self) -> Network:
        return Network(self.spec, self.params, self.bn_state)


def save_checkpoint(directory, ckpt: Checkpoint) -> None:
    """Directory of TNSR tensors plus a JSON manifest; reload is bit-exact."""
    os.makedirs(directory, exist_ok=True)
    groups = {
        "params": ckpt.params,
        "adam_m": ckpt.adam.m,
        "adam_v": ckpt.adam.v,
        "extra": ckpt.extra_params,
    }
    for bn_name, st in ckpt.bn_state.items():
        groups[f"bn/{bn_name}"] = st
    manifest = {
        "format": "surfnet-checkpoint-v1",
        "spec": asdict(ckpt.spec),
        "step": ckpt.step,
        "adam_step": ckpt.adam.step,
        "seed": ckpt.seed,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "tensors": {},
    }
    idx = 0
    for group, tensors in groups.items():
        for name, arr in tensors.items():
            fname = f"t{idx:04d}.tnsr"
            idx += 1
            write_tnsr(os.path.join(directory, fname), np.asarray(arr, float))
            manifest["tensors"][f"{group}:{name}"] = fname
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(directory) -> Checkpoint:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "surfnet-checkpoint-v1":
        raise ValueError(f"{directory}: not a surfnet checkpoint")
    groups: dict[str, dict[str, np.ndarray]] = {}
    for key, fname in manifest["tensors"].items():
        group, name = key.split(":", 1)
        groups.setdefault(group, {})[name] = read_tnsr(os.path.join(directory, fname))
    bn_state = {}
    for group, tensors in groups.items():
        if group.startswith("bn/"):
            bn_state[group[3:]] = tensors
    adam = AdamState(step=manifest["adam_step"],
                     m=groups.get("adam_m", {}), v=groups.get("adam_v", {}))
    return Checkpoint(
        spec=NetworkSpec(**manifest["spec"]),
        params=groups.get("params", {}),
        adam=adam,
        bn_state=bn_state,
        step=manifest["step"],
        seed=manifest["seed"],
        rng_state=manifest.get("rng_state"),
        extra_params=groups.get("extra", {}),
        meta=manifest.get("meta", {}),
    )
