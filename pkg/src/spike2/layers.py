"""Composite spiking layers with dual execution modes.

Every layer runs in two modes driven by an ExecContext:

  * train: values are autodiff Vars carrying normalized quantized
    activations (multiples of 1/D); convolutions are ordinary dense ops.
  * infer: values are SpikePlans whose expanded form holds D binary slices;
    weight layers fold their BatchNorm and consume the slices as spike-gated
    accumulations with per-slice weights w/D, so no multiplication by an
    activation value remains.

Linear layers are realized as pointwise convolutions on a (B, C, N, 1)
token layout so one BN-folding path serves everything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from . import autodiff as ad
from . import tensor as tk
from .instrument import Recorder
from .neurons import (
    NeuronConfig,
    QuantizationError,
    SpikePlan,
    assert_binary,
    expand_to_spikes,
    lif_step,
    init_state,
    reparam_scale_into_threshold,
)


@dataclass
class ExecContext:
    """Execution switches threaded through every forward call."""

    mode: str = "train"          # train | infer
    bn_training: bool = False    # batch statistics + running updates
    relaxed: bool = False        # relaxed quantizer (gradient checking)
    rec: Recorder | None = None
    t: int = 0

    @property
    def infer(self) -> bool:
        return self.mode == "infer"


class Module:
    """Parameter/buffer registry with hierarchical names."""

    def __init__(self, name: str):
        self.name = name
        self._params: dict[str, ad.Var] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: list["Module"] = []

    def add_param(self, short: str, value: np.ndarray) -> ad.Var:
        v = ad.param(value, f"{self.name}.{short}")
        self._params[short] = v
        return v

    def add_buffer(self, short: str, value: np.ndarray) -> np.ndarray:
        self._buffers[short] = value
        return value

    def child(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def parameters(self) -> dict[str, ad.Var]:
        out = {f"{self.name}.{k}": v for k, v in self._params.items()}
        for c in self._children:
            out.update(c.parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {f"{self.name}.{k}": v for k, v in self._buffers.items()}
        for c in self._children:
            out.update(c.buffers())
        return out

    def modules(self) -> list["Module"]:
        out = [self]
        for c in self._children:
            out.extend(c.modules())
        return out

    def reset_states(self) -> None:
        for m in self.modules():
            if isinstance(m, SpikeNeuron):
                m.reset()

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.parameters().items()}
        out.update(self.buffers())
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        own = self.parameters()
        bufs = self.buffers()
        missing = (set(own) | set(bufs)) - set(tensors)
        extra = set(tensors) - (set(own) | set(bufs))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
        for k, v in own.items():
            if v.data.shape != tensors[k].shape:
                raise tk.DimensionError(k, v.data.shape, tensors[k].shape)
            v.data = np.array(tensors[k], dtype=np.float64)
        for k, b in bufs.items():
            b[...] = tensors[k]


# ---------------------------------------------------------------------------
# Spiking neuron layer
# ---------------------------------------------------------------------------


class SpikeNeuron(Module):
    """Stateful quantizing activation; one instance must not be stepped
    concurrently. Training emits the normalized Var, inference emits an
    expanded SpikePlan."""

    def __init__(self, cfg: NeuronConfig, name: str):
        super().__init__(name)
        self.cfg = cfg
        self._h_var = None
        self._h_arr = None

    def reset(self) -> None:
        self._h_var = None
        self._h_arr = None

    def forward(self, x, ctx: ExecContext, cfg_override: NeuronConfig | None = None):
        cfg = cfg_override if cfg_override is not None else self.cfg
        if ctx.infer:
            return self._forward_infer(x, ctx, cfg)
        return self._forward_train(x, ctx, cfg)

    def _forward_train(self, x: ad.Var, ctx: ExecContext, cfg: NeuronConfig) -> ad.Var:
        u = ad.div(x, cfg.theta)
        if self._h_var is not None:
            u = ad.add(self._h_var, u)
        m = ad.round_clip(u, cfg.D, relaxed=ctx.relaxed)
        s = ad.div(m, cfg.D) if cfg.variant == "ni_lif" else m
        if cfg.beta != 0.0:
            self._h_var = ad.mul(ad.sub(u, m), cfg.beta)
        else:
            self._h_var = ad.const(np.zeros_like(u.data))
        if ctx.rec is not None:
            plan = SpikePlan("normalized", s.data, cfg.D,
                             integer_valued=cfg.variant == "i_lif")
            ctx.rec.spikes(self.name, plan)
        return s

    def _forward_infer(self, x: np.ndarray, ctx: ExecContext, cfg: NeuronConfig) -> SpikePlan:
        if self._h_arr is None:
            self._h_arr = init_state(x.shape)
        plan, self._h_arr = lif_step(x, self._h_arr, cfg)
        plan = expand_to_spikes(plan, cfg)
        if ctx.rec is not None:
            ctx.rec.spikes(self.name, plan)
        return plan


# ---------------------------------------------------------------------------
# Weight layers
# ---------------------------------------------------------------------------


def _plan_to_maps(plan: SpikePlan) -> SpikePlan:
    """(.., N, C) token plan -> (.., C, N, 1) map plan."""
    norm = np.expand_dims(np.swapaxes(plan.normalized, -1, -2), -1)
    exp = None
    if plan.expanded is not None:
        exp = np.expand_dims(np.swapaxes(plan.expanded, -1, -2), -1)
    return SpikePlan(plan.mode, norm, plan.D, plan.integer_valued, exp)


def _conv_event_adds(bits: np.ndarray, spec: tk.ConvSpec) -> int:
    """Gated accumulations a binary input causes: for each output element,
    the number of active inputs in its window, summed over out channels."""
    if spec.kernel == (1, 1) and spec.groups == 1:
        return int(bits.sum()) * spec.out_channels
    ones = np.ones(spec.weight_shape)
    cnt, _ = tk.conv2d_forward(bits, spec, ones)
    return int(round(float(cnt.sum())))


class ConvBN(Module):
    """Convolution plus BatchNorm; folds to a single accumulate op at
    inference. Continuous (non-spike) inputs are only legal for layers
    constructed mac_designated (e.g. the image stem)."""

    def __init__(self, spec: tk.ConvSpec, name: str, rng: np.random.Generator,
                 bn: bool = True, bias: bool = False, mac_designated: bool = False,
                 w_scale: float | None = None, zero_gamma: bool = False):
        super().__init__(name)
        self.spec = spec
        self.bn = bn
        self.mac_designated = mac_designated
        fan_in = (spec.in_channels // spec.groups) * spec.kernel[0] * spec.kernel[1]
        scale = w_scale if w_scale is not None else math.sqrt(2.0 / fan_in)
        self.w = self.add_param("w", rng.normal(size=spec.weight_shape) * scale)
        self.b = self.add_param("b", np.zeros(spec.out_channels)) if bias else None
        if bn:
            self.gamma = self.add_param("gamma", np.zeros(spec.out_channels) if zero_gamma
                                        else np.ones(spec.out_channels))
            self.beta = self.add_param("beta", np.zeros(spec.out_channels))
            self.running_mean = self.add_buffer("running_mean", np.zeros(spec.out_channels))
            self.running_var = self.add_buffer("running_var", np.ones(spec.out_channels))
            self.epsilon = 1e-5
            self.momentum = 0.1

    def forward(self, x, ctx: ExecContext, gain: float = 1.0):
        if ctx.infer:
            return self._forward_infer(x, ctx, gain)
        y = ad.conv2d(x, self.spec, self.w, self.b)
        if self.bn:
            y = ad.batchnorm(y, self.gamma, self.beta, self.running_mean,
                             self.running_var, self.epsilon, self.momentum,
                             ctx.bn_training)
        return y

    def folded(self, gain: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        """BN (and any scalar output gain) folded into plain conv weights."""
        bias = None if self.b is None else self.b.data
        if not self.bn:
            w_f = self.w.data
            b_f = np.zeros(self.spec.out_channels) if bias is None else bias
        else:
            params = tk.BatchNormParams(self.gamma.data, self.beta.data,
                                        self.running_mean, self.running_var,
                                        self.epsilon, self.momentum)
            w_f, b_f = tk.fold_bn_into_conv(self.w.data, bias, params)
        if gain != 1.0:
            w_f = w_f * gain
            b_f = b_f * gain
        return w_f, b_f

    def dense_macs(self, in_hw: tuple[int, int], batch: int) -> int:
        ho, wo = tk.conv_output_hw(self.spec, *in_hw)
        fan_in = (self.spec.in_channels // self.spec.groups) * self.spec.kernel[0] * self.spec.kernel[1]
        return batch * self.spec.out_channels * ho * wo * fan_in

    def _forward_infer(self, x, ctx: ExecContext, gain: float = 1.0):
        w_f, b_f = self.folded(gain)
        rec = ctx.rec
        if isinstance(x, SpikePlan):
            if x.expanded is None:
                raise QuantizationError(f"{self.name}: inference conv requires an expanded plan")
            assert_binary(x.expanded)
            e = x.expanded
            d, b = e.shape[0], e.shape[1]
            flat = e.reshape((d * b,) + e.shape[2:])
            out = tk.conv2d(flat, self.spec, w_f * x.step)
            out = out.reshape((d, b) + out.shape[1:]).sum(axis=0)
            out = out + b_f[None, :, None, None]
            if rec is not None and rec.count:
                acs = _conv_event_adds(flat, self.spec)
                rec.weight_op(self.name, self.spec.kind,
                              self.dense_macs(e.shape[3:5], b), acs, False)
            return out
        # continuous input: a dense multiply-accumulate layer
        if not self.mac_designated:
            raise QuantizationError(
                f"{self.name}: continuous activations reached a spike-driven weight op")
        out = tk.conv2d(x, self.spec, w_f, b_f)
        if rec is not None and rec.count:
            rec.weight_op(self.name, self.spec.kind,
                          self.dense_macs(x.shape[2:4], x.shape[0]), 0, True)
        return out


class LinearBN(Module):
    """Pointwise-conv linear layer over (B, N, C) tokens."""

    def __init__(self, c_in: int, c_out: int, name: str, rng,
                 bn: bool = True, bias: bool = False, w_scale: float | None = None):
        super().__init__(name)
        self.conv = self.child(ConvBN(tk.ConvSpec.pointwise(c_in, c_out),
                                      f"{name}.pw", rng, bn=bn, bias=bias,
                                      w_scale=w_scale))

    def forward(self, x, ctx: ExecContext, gain: float = 1.0):
        if ctx.infer:
            plan = _plan_to_maps(x)
            out = self.conv.forward(plan, ctx, gain)    # (B, C', N, 1)
            return np.swapaxes(out[..., 0], -1, -2)     # (B, N, C')
        b, n, c = x.data.shape
        y = ad.reshape(ad.transpose(x, (0, 2, 1)), (b, c, n, 1))
        y = self.conv.forward(y, ctx)
        return ad.transpose(ad.reshape(y, (b, y.data.shape[1], n)), (0, 2, 1))


class DenseHead(Module):
    """Plain linear head on continuous membranes (classification logits need
    sign information, so this layer stays a dense multiply-accumulate op)."""

    def __init__(self, c_in: int, c_out: int, name: str, rng):
        super().__init__(name)
        self.c_in, self.c_out = c_in, c_out
        self.w = self.add_param("w", rng.normal(size=(c_in, c_out)) * math.sqrt(1.0 / c_in))
        self.b = self.add_param("b", np.zeros(c_out))

    def forward(self, x, ctx: ExecContext):
        if ctx.infer:
            out = x @ self.w.data + self.b.data
            if ctx.rec is not None and ctx.rec.count:
                macs = int(np.prod(x.shape[:-1])) * self.c_in * self.c_out
                ctx.rec.weight_op(self.name, "linear", macs, 0, True)
            return out
        return ad.add(ad.matmul(x, self.w), self.b)


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


class SeparableConvBlock(Module):
    """Pointwise -> depthwise -> pointwise separable convolution with a
    spiking neuron ahead of every convolution (including the second
    pointwise one, which is what keeps the whole block accumulate-only)."""

    def __init__(self, c_in: int, c_mid: int, c_out: int, ncfg: NeuronConfig,
                 name: str, rng, dw_kernel: int = 3):
        super().__init__(name)
        self.sn1 = self.child(SpikeNeuron(ncfg, f"{name}.sn1"))
        self.pw1 = self.child(ConvBN(tk.ConvSpec.pointwise(c_in, c_mid), f"{name}.pw1", rng))
        self.sn2 = self.child(SpikeNeuron(ncfg, f"{name}.sn2"))
        self.dw = self.child(ConvBN(tk.ConvSpec.depthwise(c_mid, dw_kernel), f"{name}.dw", rng))
        self.sn3 = self.child(SpikeNeuron(ncfg, f"{name}.sn3"))
        self.pw2 = self.child(ConvBN(tk.ConvSpec.pointwise(c_mid, c_out), f"{name}.pw2", rng))

    def forward(self, u, ctx: ExecContext):
        y = self.pw1.forward(self.sn1.forward(u, ctx), ctx)
        y = self.dw.forward(self.sn2.forward(y, ctx), ctx)
        y = self.pw2.forward(self.sn3.forward(y, ctx), ctx)
        return y


class ChannelMLP(Module):
    """Two spiking linear stages mixing channels; 'map' layout uses pointwise
    convs on NCHW, 'tokens' uses the (B, N, C) linear wrapper."""

    def __init__(self, c: int, hidden: int, ncfg: NeuronConfig, name: str, rng,
                 layout: str = "map"):
        super().__init__(name)
        self.layout = layout
        self.sn1 = self.child(SpikeNeuron(ncfg, f"{name}.sn1"))
        self.sn2 = self.child(SpikeNeuron(ncfg, f"{name}.sn2"))
        if layout == "map":
            self.fc1 = self.child(ConvBN(tk.ConvSpec.pointwise(c, hidden), f"{name}.fc1", rng))
            self.fc2 = self.child(ConvBN(tk.ConvSpec.pointwise(hidden, c), f"{name}.fc2", rng))
        else:
            self.fc1 = self.child(LinearBN(c, hidden, f"{name}.fc1", rng))
            self.fc2 = self.child(LinearBN(hidden, c, f"{name}.fc2", rng))

    def forward(self, x, ctx: ExecContext):
        y = self.fc1.forward(self.sn1.forward(x, ctx), ctx)
        y = self.fc2.forward(self.sn2.forward(y, ctx), ctx)
        return y


def _split_heads(x, heads: int):
    """(B, N, C) -> (B, heads, N, C/heads) for Vars."""
    b, n, c = x.data.shape
    return ad.transpose(ad.reshape(x, (b, n, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, n, dh = x.data.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _split_heads_np(a: np.ndarray, heads: int) -> np.ndarray:
    s = a.shape
    return a.reshape(s[:-1] + (heads, s[-1] // heads)).swapaxes(-2, -3)


class SpikeAttention(Module):
    """Linear-order spike attention: value aggregation K^T V first, then the
    query product, so the intermediate is (C/h, C/h) regardless of sequence
    length. Self mode projects Q, K, V from the query stream; cross mode
    takes K and V from a flattened feature map.

    Every product operand is spike-valued, so inference runs the attention
    as integer event counting. The product scale is never a runtime multiply
    at inference; it is reparameterized into the threshold of the neuron
    that quantizes the attention output.
    """

    def __init__(self, c: int, heads: int, ncfg: NeuronConfig, name: str, rng,
                 cross: bool = False, scale: float | None = None):
        super().__init__(name)
        if c % heads:
            raise ValueError(f"{name}: channels {c} not divisible by heads {heads}")
        self.c = c
        self.heads = heads
        self.cross = cross
        self.scale = scale if scale is not None else 1.0 / math.sqrt(c / heads)
        self.ncfg = ncfg
        # the spike-product magnitudes scale like rate^2 * fan-in, well below
        # the inputs of other neurons; a proportionally smaller threshold puts
        # them on the quantization grid instead of silencing the layer
        theta_attn = ncfg.theta * self.scale / 4.0
        self.ncfg_attn = dc_replace(ncfg, theta=theta_attn)
        self.ncfg_attn_infer = reparam_scale_into_threshold(self.scale, self.ncfg_attn)
        self.sn_q = self.child(SpikeNeuron(ncfg, f"{name}.sn_q"))
        if cross:
            self.q_lin = self.child(LinearBN(c, c, f"{name}.q", rng))
            self.sn_qs = self.child(SpikeNeuron(ncfg, f"{name}.sn_qs"))
            self.sn_f = self.child(SpikeNeuron(ncfg, f"{name}.sn_f"))
            self.kv_lin = self.child(LinearBN(c, 2 * c, f"{name}.kv", rng))
            self.sn_kvs = self.child(SpikeNeuron(ncfg, f"{name}.sn_kvs"))
        else:
            self.qkv_lin = self.child(LinearBN(c, 3 * c, f"{name}.qkv", rng))
            self.sn_qkv = self.child(SpikeNeuron(ncfg, f"{name}.sn_qkv"))
        self.sn_attn = self.child(SpikeNeuron(self.ncfg_attn, f"{name}.sn_attn"))
        self.out_lin = self.child(LinearBN(c, c, f"{name}.out", rng))

    def forward(self, q, ctx: ExecContext, feat=None):
        if ctx.infer:
            return self._forward_infer(q, ctx, feat)
        s_q = self.sn_q.forward(q, ctx)
        if self.cross:
            qs = self.sn_qs.forward(self.q_lin.forward(s_q, ctx), ctx)
            kv = self.kv_lin.forward(self.sn_f.forward(feat, ctx), ctx)
            ks, vs = ad.split(self.sn_kvs.forward(kv, ctx), 2, axis=2)
        else:
            qkv_s = self.sn_qkv.forward(self.qkv_lin.forward(s_q, ctx), ctx)
            qs, ks, vs = ad.split(qkv_s, 3, axis=2)
        qh = _split_heads(qs, self.heads)
        kh = _split_heads(ks, self.heads)
        vh = _split_heads(vs, self.heads)
        kv = ad.matmul(ad.transpose(kh, (0, 1, 3, 2)), vh)
        at = ad.mul(ad.matmul(qh, kv), self.scale)
        s_at = self.sn_attn.forward(_merge_heads(at), ctx)
        return self.out_lin.forward(s_at, ctx)

    def _forward_infer(self, q, ctx: ExecContext, feat):
        rec = ctx.rec
        s_q = self.sn_q.forward(q, ctx)
        if self.cross:
            q_plan = self.sn_qs.forward(self.q_lin.forward(s_q, ctx), ctx)
            kv_plan = self.sn_kvs.forward(
                self.kv_lin.forward(self.sn_f.forward(feat, ctx), ctx), ctx)
            m_k, m_v = np.split(kv_plan.expanded.sum(axis=0), 2, axis=-1)
            q_bits = q_plan.expanded
            q_step, kv_step = q_plan.step, kv_plan.step
        else:
            qkv_plan = self.sn_qkv.forward(self.qkv_lin.forward(s_q, ctx), ctx)
            counts = qkv_plan.expanded.sum(axis=0)
            _, m_k, m_v = np.split(counts, 3, axis=-1)
            q_bits = np.split(qkv_plan.expanded, 3, axis=-1)[0]
            q_step, kv_step = qkv_plan.step, qkv_plan.step
        kh = _split_heads_np(m_k, self.heads)                # integer spike counts
        vh = _split_heads_np(m_v, self.heads)
        kv = (np.swapaxes(kh, -1, -2) @ vh) * (kv_step * kv_step)
        qh_bits = _split_heads_np(q_bits, self.heads)        # (D, B, h, N, dh) binary
        at = np.zeros(qh_bits.shape[1:-1] + (kv.shape[-1],))
        kv_scaled = kv * q_step
        for d in range(qh_bits.shape[0]):
            at = at + qh_bits[d] @ kv_scaled                 # gated row adds
        if rec is not None and rec.count:
            dim = self.c // self.heads
            acs_kv = int((kh.sum(axis=-1) * vh.sum(axis=-1)).sum())
            acs_at = int(q_bits.sum()) * dim
            n_tok = kh.shape[-2]
            dense_kv = kh.shape[0] * self.heads * dim * dim * n_tok
            dense_at = int(np.prod(qh_bits.shape[1:-2])) * qh_bits.shape[-2] * dim * dim
            rec.weight_op(f"{self.name}.kv_product", "spike_product", dense_kv, acs_kv, False)
            rec.weight_op(f"{self.name}.q_product", "spike_product", dense_at, acs_at, False)
        b, h, n, dh = at.shape
        merged = at.swapaxes(1, 2).reshape(b, n, h * dh)
        s_at = self.sn_attn.forward(merged, ctx, cfg_override=self.ncfg_attn_infer)
        return self.out_lin.forward(s_at, ctx)
