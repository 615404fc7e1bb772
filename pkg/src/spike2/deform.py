"""Deformable spike attention and the convolutional encoder built from it.

The attention weights pass through a spiking neuron (quantized, expandable
to binary events); the sampling offsets and the sampled value features stay
continuous. That split is the load-bearing design: gating continuous values
with binary weights keeps inference accumulate-only without quantizing the
information being gathered. A variant flag swaps the roles (spiked values,
continuous weights) for ablation runs.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import tensor as tk
from .layers import (
    ChannelMLP,
    ConvBN,
    ExecContext,
    Module,
    SeparableConvBlock,
    SpikeNeuron,
)
from .neurons import NeuronConfig

_STENCILS = {
    1: [(0, 0)],
    2: [(0, -1), (0, 1)],
    4: [(-1, 0), (1, 0), (0, -1), (0, 1)],
    8: [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)],
}


def point_stencil(k: int) -> np.ndarray:
    """Fixed symmetric (sum-zero) sampling pattern around the origin."""
    if k not in _STENCILS:
        raise ValueError(f"K={k} has no symmetric stencil; choose one of {sorted(_STENCILS)}")
    return np.array(_STENCILS[k], dtype=np.float64)


def reference_points(h: int, w: int, k: int) -> np.ndarray:
    """Base sampling locations: pixel centers (i+0.5, j+0.5) plus the
    K-point stencil. Returns (h*w, K, 2) in (row, col) pixel coordinates."""
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    p0 = np.stack([ys.ravel(), xs.ravel()], axis=1)  # (HW, 2)
    return p0[:, None, :] + point_stencil(k)[None, :, :]


class DeformableAttention(Module):
    """Gathers value features at offset sampling points, gated by spiked
    attention weights, one weight per (group, point, position)."""

    def __init__(self, c: int, groups: int, points: int, ncfg: NeuronConfig,
                 name: str, rng, esc_out: bool = True, spike_query: bool = False):
        super().__init__(name)
        if c % groups:
            raise ValueError(f"{name}: channels {c} not divisible by groups {groups}")
        if points < 1:
            raise ValueError(f"{name}: need at least one sampling point")
        point_stencil(points)  # validate early
        self.c = c
        self.groups = groups
        self.points = points
        self.spike_query = spike_query
        self.sn_in = self.child(SpikeNeuron(ncfg, f"{name}.sn_in"))
        self.v_conv = self.child(ConvBN(tk.ConvSpec.pointwise(c, c), f"{name}.v", rng))
        self.dw = self.child(ConvBN(tk.ConvSpec.depthwise(c, 3), f"{name}.dw", rng))
        self.sn_mid = self.child(SpikeNeuron(ncfg, f"{name}.sn_mid"))
        self.a_conv = self.child(ConvBN(tk.ConvSpec.pointwise(c, groups * points),
                                        f"{name}.attn", rng))
        self.sn_attn = self.child(SpikeNeuron(ncfg, f"{name}.sn_attn"))
        # offsets start at zero via zeroed BN gain, keeping early training at
        # the reference points without the dead gradients of zero conv weights
        self.p_conv = self.child(ConvBN(tk.ConvSpec.pointwise(c, groups * points * 2),
                                        f"{name}.offset", rng, zero_gamma=True))
        if spike_query:
            self.sn_v = self.child(SpikeNeuron(ncfg, f"{name}.sn_v"))
        if esc_out:
            self.out_block = self.child(SeparableConvBlock(c, c, c, ncfg, f"{name}.out", rng))
        else:
            self.sn_out = self.child(SpikeNeuron(ncfg, f"{name}.sn_out"))
            self.out_block = None
            self.out_conv = self.child(ConvBN(tk.ConvSpec.pointwise(c, c), f"{name}.outpw", rng))

    def forward(self, x, ctx: ExecContext):
        if ctx.infer:
            return self._forward_infer(x, ctx)
        return self._forward_train(x, ctx)

    def _project_out(self, agg, ctx: ExecContext):
        if self.out_block is not None:
            return self.out_block.forward(agg, ctx)
        return self.out_conv.forward(self.sn_out.forward(agg, ctx), ctx)

    # -- training ------------------------------------------------------------

    def _forward_train(self, x: ad.Var, ctx: ExecContext) -> ad.Var:
        b, c, h, w = x.data.shape
        g, k, cg = self.groups, self.points, self.c // self.groups
        s0 = self.sn_in.forward(x, ctx)
        v = self.v_conv.forward(s0, ctx)                     # value features, membrane
        xq = self.dw.forward(s0, ctx)                        # context map, membrane
        s1 = self.sn_mid.forward(xq, ctx)
        a_pre = self.a_conv.forward(s1, ctx)                 # (B, G*K, H, W)
        offs = self.p_conv.forward(s1, ctx)                  # (B, G*K*2, H, W)

        if self.spike_query:
            a = a_pre                                        # continuous weights
            v = self.sn_v.forward(v, ctx)                    # spiked values
        else:
            a = self.sn_attn.forward(a_pre, ctx)             # spiked weights

        pts = self._points_var(offs, h, w)                   # (B*G, HW*K, 2)
        v_g = ad.reshape(v, (b * g, cg, h, w))
        sampled = ad.grid_sample(v_g, pts)                   # (B*G, HW*K, Cg)
        sampled = ad.reshape(sampled, (b, g, h * w, k, cg))
        a_r = ad.reshape(a, (b, g, k, h * w))
        a_r = ad.reshape(ad.transpose(a_r, (0, 1, 3, 2)), (b, g, h * w, k, 1))
        agg = ad.vsum(ad.mul(a_r, sampled), axis=3)          # (B, G, HW, Cg)
        agg = ad.reshape(ad.transpose(agg, (0, 1, 3, 2)), (b, c, h, w))
        return self._project_out(agg, ctx)

    def _points_var(self, offs: ad.Var, h: int, w: int) -> ad.Var:
        b = offs.data.shape[0]
        g, k = self.groups, self.points
        ref = reference_points(h, w, k)                      # (HW, K, 2)
        o = ad.reshape(offs, (b, g, k, 2, h * w))
        o = ad.transpose(o, (0, 1, 4, 2, 3))                 # (B, G, HW, K, 2)
        pts = ad.add(o, ref[None, None])
        return ad.reshape(pts, (b * g, h * w * k, 2))

    # -- inference -----------------------------------------------------------

    def _forward_infer(self, x: np.ndarray, ctx: ExecContext) -> np.ndarray:
        b, c, h, w = x.shape
        g, k, cg = self.groups, self.points, self.c // self.groups
        rec = ctx.rec
        s0 = self.sn_in.forward(x, ctx)
        v = self.v_conv.forward(s0, ctx)
        xq = self.dw.forward(s0, ctx)
        s1 = self.sn_mid.forward(xq, ctx)
        a_pre = self.a_conv.forward(s1, ctx)
        offs = self.p_conv.forward(s1, ctx)

        ref = reference_points(h, w, k)
        o = offs.reshape(b, g, k, 2, h * w).transpose(0, 1, 4, 2, 3)
        pts = (o + ref[None, None]).reshape(b * g, h * w * k, 2)

        if self.spike_query:
            # rejected-design variant: spiked sampled values, continuous
            # weights; the weight product is no longer accumulate-only
            v_plan = self.sn_v.forward(v, ctx)
            v_norm = v_plan.normalized if not v_plan.integer_valued else v_plan.normalized
            v_g = v_norm.reshape(b * g, cg, h, w)
            sampled = tk.bilinear_gather(v_g, pts).reshape(b, g, h * w, k, cg)
            a_w = a_pre.reshape(b, g, k, h * w).transpose(0, 1, 3, 2)[..., None]
            agg = (a_w * sampled).sum(axis=3)
        else:
            a_plan = self.sn_attn.forward(a_pre, ctx)        # (D, B, G*K, H, W) bits
            v_g = v.reshape(b * g, cg, h, w)
            sampled = tk.bilinear_gather(v_g, pts).reshape(b, g, h * w, k, cg)
            bits = a_plan.expanded.reshape(-1, b, g, k, h * w)
            bits = bits.transpose(0, 1, 2, 4, 3)[..., None]  # (D, B, G, HW, K, 1)
            slice_vals = sampled * a_plan.step
            agg = np.zeros((b, g, h * w, cg))
            for d in range(bits.shape[0]):
                agg = agg + (bits[d] * slice_vals).sum(axis=3)   # gated adds
            if rec is not None and rec.count:
                acs = int(a_plan.expanded.sum()) * cg
                dense = b * g * h * w * k * cg
                rec.weight_op(f"{self.name}.gather_product", "spike_product",
                              dense, acs, False)
        agg = agg.transpose(0, 1, 3, 2).reshape(b, c, h, w)
        return self._project_out(agg, ctx)


class DeformableEncoderBlock(Module):
    """Separable conv, deformable attention, channel MLP; all three branches
    add back onto the continuous membrane (residuals never touch spikes)."""

    def __init__(self, c: int, groups: int, points: int, mlp_ratio: int,
                 ncfg: NeuronConfig, name: str, rng, spike_query: bool = False):
        super().__init__(name)
        self.esc = self.child(SeparableConvBlock(c, c, c, ncfg, f"{name}.esc", rng))
        self.attn = self.child(DeformableAttention(c, groups, points, ncfg,
                                                   f"{name}.attn", rng,
                                                   spike_query=spike_query))
        self.mlp = self.child(ChannelMLP(c, mlp_ratio * c, ncfg, f"{name}.mlp", rng))

    def forward(self, x, ctx: ExecContext):
        add = (lambda a, b: a + b) if ctx.infer else ad.add
        x = add(x, self.esc.forward(x, ctx))
        x = add(x, self.attn.forward(x, ctx))
        x = add(x, self.mlp.forward(x, ctx))
        return x


class DeformableEncoder(Module):
    """Stack of encoder blocks over a single deep feature level, preceded by
    a separable block that resamples the input to the embedding width."""

    def __init__(self, c_in: int, c_embed: int, blocks: int, groups: int,
                 points: int, ncfg: NeuronConfig, name: str, rng,
                 mlp_ratio: int = 2, spike_query: bool = False):
        super().__init__(name)
        self.pre = self.child(SeparableConvBlock(c_in, c_embed, c_embed, ncfg,
                                                 f"{name}.pre", rng))
        self.blocks = [
            self.child(DeformableEncoderBlock(c_embed, groups, points, mlp_ratio,
                                              ncfg, f"{name}.block{i}", rng,
                                              spike_query=spike_query))
            for i in range(blocks)
        ]

    def forward(self, x, ctx: ExecContext):
        u = self.pre.forward(x, ctx)
        for blk in self.blocks:
            u = blk.forward(u, ctx)
        return u
