"""End-to-end spiking segmentation model.

Pipeline: spiking pyramid backbone -> pixel decoder (deformable encoder on
the stride-16 level plus a spiking top-down FPN) -> query decoder (cross
attention over pyramid levels, self attention, channel MLP, all on membrane
shortcuts) -> mask head (spiked mask embeddings dotted with the continuous
per-pixel embedding) plus a dense class head.

The same weights run in two modes; `predict` returns identical-layout
outputs either way, which is what the dual-mode comparison checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import serial
from . import tensor as tk
from .deform import DeformableEncoder
from .instrument import Recorder
from .layers import (
    ChannelMLP,
    ConvBN,
    DenseHead,
    ExecContext,
    LinearBN,
    Module,
    SeparableConvBlock,
    SpikeAttention,
    SpikeNeuron,
)
from .neurons import NeuronConfig


@dataclass(frozen=True)
class ArchConfig:
    embed: int = 32
    queries: int = 8
    heads: int = 2
    num_classes: int = 3
    decoder_layers: int = 2
    encoder_blocks: int = 2
    groups: int = 2
    points: int = 4
    mlp_ratio: int = 2
    backbone_widths: tuple = (16, 24, 32, 32, 32)
    me_shortcut: bool = True
    use_encoder: bool = True
    spike_query: bool = False
    D: int = 4
    T: int = 1
    beta: float = 0.5
    theta: float = 1.0
    variant: str = "ni_lif"
    spread: str = "front"

    def neuron(self) -> NeuronConfig:
        return NeuronConfig(D=self.D, T=self.T, beta=self.beta, theta=self.theta,
                            variant=self.variant, spread=self.spread)


@dataclass
class ModelOutput:
    mask_logits: object   # (B, N, H, W) raw embedding/pixel dot products
    class_logits: object  # (B, N, num_classes + 1)


@dataclass
class MaskPrediction:
    """Per-query masks in [0, 1] plus class logits. masks is the sigmoid of
    the raw spike-product logits, applied identically in both modes as the
    output normalization."""

    masks: np.ndarray
    class_logits: np.ndarray
    mask_logits: np.ndarray


def _record(rec: Recorder | None, name: str, value) -> None:
    if rec is not None and rec.capture:
        rec.membrane(name, value.data if isinstance(value, ad.Var) else value)


class ResidualConv(Module):
    def __init__(self, c: int, ncfg: NeuronConfig, name: str, rng):
        super().__init__(name)
        self.sn = self.child(SpikeNeuron(ncfg, f"{name}.sn"))
        self.conv = self.child(ConvBN(tk.ConvSpec.standard(c, c, 3), f"{name}.conv", rng))

    def forward(self, x, ctx: ExecContext):
        branch = self.conv.forward(self.sn.forward(x, ctx), ctx)
        return x + branch if ctx.infer else ad.add(x, branch)


class Backbone(Module):
    """Five stride-2 spiking conv stages; emits stride 8/16/32 membranes.
    The stem consumes the continuous image and is the one multiply-accumulate
    layer of the network."""

    def __init__(self, widths, ncfg: NeuronConfig, name: str, rng):
        super().__init__(name)
        w0, w1, w2, w3, w4 = widths
        self.stem = self.child(ConvBN(tk.ConvSpec.standard(3, w0, 3, stride=2),
                                      f"{name}.stem", rng, mac_designated=True))
        self.downs = []
        self.blocks = []
        for i, (ci, co) in enumerate(((w0, w1), (w1, w2), (w2, w3), (w3, w4))):
            sn = self.child(SpikeNeuron(ncfg, f"{name}.down{i}.sn"))
            conv = self.child(ConvBN(tk.ConvSpec.standard(ci, co, 3, stride=2),
                                     f"{name}.down{i}.conv", rng))
            self.downs.append((sn, conv))
            self.blocks.append(self.child(ResidualConv(co, ncfg, f"{name}.res{i}", rng)))

    def forward(self, images, ctx: ExecContext):
        if images.shape[2] % 32 or images.shape[3] % 32:
            raise tk.DimensionError("image size", "divisible by 32", images.shape[2:])
        x = images if ctx.infer else ad.const(np.asarray(images, dtype=np.float64))
        x = self.stem.forward(x, ctx)
        feats = []
        for (sn, conv), block in zip(self.downs, self.blocks):
            x = conv.forward(sn.forward(x, ctx), ctx)
            x = block.forward(x, ctx)
            feats.append(x)
        _record(ctx.rec, f"{self.name}.f8", feats[1])
        _record(ctx.rec, f"{self.name}.f16", feats[2])
        _record(ctx.rec, f"{self.name}.f32", feats[3])
        return {8: feats[1], 16: feats[2], 32: feats[3]}


class PixelDecoder(Module):
    """Deformable encoder on the stride-16 level, then a spiking top-down FPN
    with pointwise laterals; emits the per-pixel embedding at stride 8 and
    the three levels the query decoder cross-attends."""

    def __init__(self, cfg: ArchConfig, name: str, rng):
        super().__init__(name)
        ncfg = cfg.neuron()
        c = cfg.embed
        _, _, c8, c16, c32 = cfg.backbone_widths
        self.use_encoder = cfg.use_encoder
        if cfg.use_encoder:
            self.encoder = self.child(DeformableEncoder(
                c16, c, cfg.encoder_blocks, cfg.groups, cfg.points, ncfg,
                f"{name}.encoder", rng, mlp_ratio=cfg.mlp_ratio,
                spike_query=cfg.spike_query))
        else:
            self.sn16 = self.child(SpikeNeuron(ncfg, f"{name}.lat16.sn"))
            self.lat16 = self.child(ConvBN(tk.ConvSpec.pointwise(c16, c),
                                           f"{name}.lat16.conv", rng))
        self.sn32 = self.child(SpikeNeuron(ncfg, f"{name}.lat32.sn"))
        self.lat32 = self.child(ConvBN(tk.ConvSpec.pointwise(c32, c), f"{name}.lat32.conv", rng))
        self.sn8 = self.child(SpikeNeuron(ncfg, f"{name}.lat8.sn"))
        self.lat8 = self.child(ConvBN(tk.ConvSpec.pointwise(c8, c), f"{name}.lat8.conv", rng))
        self.sn_embed = self.child(SpikeNeuron(ncfg, f"{name}.embed.sn"))
        self.embed = self.child(ConvBN(tk.ConvSpec.pointwise(c, c), f"{name}.embed.conv", rng))

    def forward(self, pyramid, ctx: ExecContext):
        add = (lambda a, b: a + b) if ctx.infer else ad.add
        up = (lambda a: a.repeat(2, axis=2).repeat(2, axis=3)) if ctx.infer \
            else (lambda a: ad.upsample_nearest(a, 2))
        if self.use_encoder:
            p16 = self.encoder.forward(pyramid[16], ctx)
        else:
            p16 = self.lat16.forward(self.sn16.forward(pyramid[16], ctx), ctx)
        _record(ctx.rec, f"{self.name}.p16", p16)
        p32 = self.lat32.forward(self.sn32.forward(pyramid[32], ctx), ctx)
        p16 = add(p16, up(p32))
        p8 = add(self.lat8.forward(self.sn8.forward(pyramid[8], ctx), ctx), up(p16))
        zpix = self.embed.forward(self.sn_embed.forward(p8, ctx), ctx)
        _record(ctx.rec, f"{self.name}.zpix", zpix)
        return zpix, [p32, p16, p8]   # coarse-to-fine round robin for the decoder


class DecoderLayer(Module):
    """Cross attention over one pyramid level, self attention, channel MLP,
    each added back onto the query membrane."""

    def __init__(self, c: int, heads: int, mlp_ratio: int, ncfg: NeuronConfig,
                 name: str, rng):
        super().__init__(name)
        self.cross = self.child(SpikeAttention(c, heads, ncfg, f"{name}.cross", rng, cross=True))
        self.selfa = self.child(SpikeAttention(c, heads, ncfg, f"{name}.self", rng, cross=False))
        self.mlp = self.child(ChannelMLP(c, mlp_ratio * c, ncfg, f"{name}.mlp", rng,
                                         layout="tokens"))

    def forward(self, q, feat, pos, ctx: ExecContext):
        add = (lambda a, b: a + b) if ctx.infer else ad.add
        q = add(q, self.cross.forward(add(q, pos), ctx, feat=feat))
        q = add(q, self.selfa.forward(add(q, pos), ctx))
        q = add(q, self.mlp.forward(q, ctx))
        return q


class MaskHead(Module):
    """Mask embedding head: a spiking MLP branch plus (optionally) a learned
    parallel channel-conv shortcut with scalar gain w_s initialized to 1.
    The summed membrane is spiked by the final neuron and dotted with the
    per-pixel embedding; at inference the dot product is accumulate-only."""

    FINAL_SN = "mask_head.sn_out"

    def __init__(self, c: int, c_e: int, ncfg: NeuronConfig, name: str, rng,
                 me_shortcut: bool = True):
        super().__init__(name)
        self.me_shortcut = me_shortcut
        self.sn_q = self.child(SpikeNeuron(ncfg, f"{name}.sn_q"))
        self.fc1 = self.child(LinearBN(c, c, f"{name}.fc1", rng))
        self.sn_mid = self.child(SpikeNeuron(ncfg, f"{name}.sn_mid"))
        self.fc2 = self.child(LinearBN(c, c_e, f"{name}.fc2", rng))
        if me_shortcut:
            self.shortcut = self.child(LinearBN(c, c_e, f"{name}.shortcut", rng))
            self.w_s = self.add_param("w_s", np.array(1.0))
        self.sn_out = self.child(SpikeNeuron(ncfg, f"{name}.sn_out"))

    def forward(self, q, zpix, ctx: ExecContext):
        s_q = self.sn_q.forward(q, ctx)
        mlp = self.fc2.forward(self.sn_mid.forward(self.fc1.forward(s_q, ctx), ctx), ctx)
        if ctx.infer:
            zm = mlp
            if self.me_shortcut:
                zm = zm + self.shortcut.forward(s_q, ctx, gain=float(self.w_s.data))
            plan = self.sn_out.forward(zm, ctx)
            b, ce, h, w = zpix.shape
            flat = zpix.reshape(b, ce, h * w)
            raw = np.zeros((b, plan.expanded.shape[2], h * w))
            scaled = flat * plan.step
            for d in range(plan.expanded.shape[0]):
                raw = raw + plan.expanded[d] @ scaled        # gated row adds
            if ctx.rec is not None and ctx.rec.count:
                acs = int(plan.expanded.sum()) * h * w
                dense = b * plan.expanded.shape[2] * ce * h * w
                ctx.rec.weight_op(f"{self.name}.mask_product", "spike_product",
                                  dense, acs, False)
            return raw.reshape(b, -1, h, w)
        zm = mlp
        if self.me_shortcut:
            zm = ad.add(zm, ad.mul(self.shortcut.forward(s_q, ctx), self.w_s))
        zmask = self.sn_out.forward(zm, ctx)                # (B, N, C_e) spikes
        b, ce, h, w = zpix.data.shape
        flat = ad.reshape(zpix, (b, ce, h * w))
        raw = ad.matmul(zmask, flat)                        # (B, N, HW)
        return ad.reshape(raw, (b, zmask.data.shape[1], h, w))


class SegModel(Module):
    def __init__(self, cfg: ArchConfig, seed: int = 0):
        super().__init__("model")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ncfg = cfg.neuron()
        c = cfg.embed
        self.backbone = self.child(Backbone(cfg.backbone_widths, ncfg, "backbone", rng))
        self.pixel_decoder = self.child(PixelDecoder(cfg, "pixel_decoder", rng))
        self.layers = [
            self.child(DecoderLayer(c, cfg.heads, cfg.mlp_ratio, ncfg, f"decoder{i}", rng))
            for i in range(cfg.decoder_layers)
        ]
        self.mask_head = self.child(MaskHead(c, c, ncfg, "mask_head", rng,
                                             me_shortcut=cfg.me_shortcut))
        self.class_head = self.child(DenseHead(c, cfg.num_classes + 1, "class_head", rng))
        # unit-scale init so the quantizing neurons fire from the first step
        self.queries = self.add_param("queries", rng.normal(size=(cfg.queries, c)))
        self.query_pos = self.add_param("query_pos", rng.normal(size=(cfg.queries, c)) * 0.5)

    # -- forward ---------------------------------------------------------------

    def forward(self, images: np.ndarray, ctx: ExecContext) -> ModelOutput:
        """Run T timesteps from zero state; predictions average over t."""
        self.reset_states()
        images = np.asarray(images, dtype=np.float64)
        b = images.shape[0]
        mask_acc, cls_acc = None, None
        for t in range(self.cfg.T):
            if ctx.rec is not None:
                ctx.rec.t = t
            ctx.t = t
            pyr = self.backbone.forward(images, ctx)
            zpix, levels = self.pixel_decoder.forward(pyr, ctx)
            if ctx.infer:
                q = np.repeat(self.queries.data[None], b, axis=0)
                pos = self.query_pos.data[None]
                feats = [lvl.reshape(lvl.shape[0], lvl.shape[1], -1).swapaxes(1, 2)
                         for lvl in levels]
            else:
                q = ad.tile_leading(self.queries, b)
                pos = ad.reshape(self.query_pos, (1,) + self.query_pos.data.shape)
                feats = [ad.transpose(ad.reshape(
                    lvl, (lvl.data.shape[0], lvl.data.shape[1], -1)), (0, 2, 1))
                    for lvl in levels]
            for i, layer in enumerate(self.layers):
                q = layer.forward(q, feats[i % len(feats)], pos, ctx)
                _record(ctx.rec, f"decoder{i}.q", q)
            raw = self.mask_head.forward(q, zpix, ctx)      # (B, N, h, w)
            logits = self.class_head.forward(q, ctx)
            up = 8
            if ctx.infer:
                my = tk.upsample_matrices(raw.shape[2], raw.shape[2] * up)
                mx = tk.upsample_matrices(raw.shape[3], raw.shape[3] * up)
                masks = np.einsum("ab,nqbw,dw->nqad", my, raw, mx, optimize=True)
            else:
                masks = ad.upsample_bilinear(raw, up)
            mask_acc = masks if mask_acc is None else (
                mask_acc + masks if ctx.infer else ad.add(mask_acc, masks))
            cls_acc = logits if cls_acc is None else (
                cls_acc + logits if ctx.infer else ad.add(cls_acc, logits))
        scale = 1.0 / self.cfg.T
        if ctx.infer:
            out = ModelOutput(mask_acc * scale, cls_acc * scale)
        else:
            out = ModelOutput(ad.mul(mask_acc, scale), ad.mul(cls_acc, scale))
        _record(ctx.rec, "output.mask_logits", out.mask_logits)
        _record(ctx.rec, "output.class_logits", out.class_logits)
        return out

    def calibrate(self, images: np.ndarray, passes: int = 1) -> None:
        """Populate BatchNorm running statistics from live forward passes.

        A freshly initialized network has identity running stats, under which
        inference-mode activations sit below the firing threshold and the
        network is silent. One batch-statistics pass per layer fixes that;
        training does the same thing continuously.
        """
        convs = [m for m in self.modules() if isinstance(m, ConvBN) and m.bn]
        saved = [m.momentum for m in convs]
        for m in convs:
            m.momentum = 1.0 - 1e-12  # adopt the batch statistics outright
        try:
            for _ in range(passes):
                self.forward(images, ExecContext(mode="train", bn_training=True))
        finally:
            for m, mom in zip(convs, saved):
                m.momentum = mom

    def predict(self, images: np.ndarray, mode: str = "infer",
                rec: Recorder | None = None) -> MaskPrediction:
        ctx = ExecContext(mode=mode, bn_training=False, rec=rec)
        out = self.forward(images, ctx)
        ml = out.mask_logits if mode == "infer" else out.mask_logits.data
        cl = out.class_logits if mode == "infer" else out.class_logits.data
        masks = 1.0 / (1.0 + np.exp(-np.clip(ml, -60, 60)))
        return MaskPrediction(masks=masks, class_logits=np.asarray(cl),
                              mask_logits=np.asarray(ml))

    # -- checkpoints -------------------------------------------------------------

    _MANIFEST_INT = ("embed", "queries", "heads", "num_classes", "decoder_layers",
                     "encoder_blocks", "groups", "points", "mlp_ratio", "D", "T")
    _MANIFEST_FLOAT = ("beta", "theta")
    _MANIFEST_BOOL = ("me_shortcut", "use_encoder", "spike_query")
    _MANIFEST_STR = ("variant", "spread")

    def arch_manifest(self) -> dict[str, str]:
        d = asdict(self.cfg)
        out = {f"arch.{k}": str(d[k]) for k in
               self._MANIFEST_INT + self._MANIFEST_FLOAT + self._MANIFEST_BOOL + self._MANIFEST_STR}
        out["arch.backbone_widths"] = ",".join(str(x) for x in self.cfg.backbone_widths)
        return out

    def save_checkpoint(self, directory, extra: dict[str, str] | None = None) -> None:
        manifest = self.arch_manifest()
        if extra:
            manifest.update(extra)
        serial.save_checkpoint(directory, self.state_tensors(), manifest)

    @staticmethod
    def arch_from_manifest(manifest: dict[str, str]) -> ArchConfig:
        def get(key):
            if f"arch.{key}" not in manifest:
                raise serial.ContainerError(f"manifest missing arch.{key}")
            return manifest[f"arch.{key}"]

        kwargs = {}
        for k in SegModel._MANIFEST_INT:
            kwargs[k] = int(get(k))
        for k in SegModel._MANIFEST_FLOAT:
            kwargs[k] = float(get(k))
        for k in SegModel._MANIFEST_BOOL:
            kwargs[k] = get(k) == "True"
        for k in SegModel._MANIFEST_STR:
            kwargs[k] = get(k)
        kwargs["backbone_widths"] = tuple(int(x) for x in get("backbone_widths").split(","))
        return ArchConfig(**kwargs)

    @classmethod
    def from_checkpoint(cls, directory) -> tuple["SegModel", dict[str, str]]:
        tensors, manifest = serial.load_checkpoint(directory)
        model = cls(cls.arch_from_manifest(manifest))
        model.load_state(tensors)
        return model, manifest
