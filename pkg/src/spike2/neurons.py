"""Integer-quantized leaky integrate-and-fire neurons and spike expansion.

Two variants share one membrane update:

    U[t] = H[t-1] + X[t] / theta
    m    = clip(round(U[t]), 0, D)        round = half away from zero
    H[t] = beta * (U[t] - m)

The normalized variant ('ni_lif') emits m / D, a value on the 1/D grid in
[0, 1]; the raw-integer variant ('i_lif') emits m itself and exists for
ablations. Either emission expands losslessly into D binary slices whose sum
recovers the quantized integer, which is what lets inference run weight
layers as spike-gated accumulations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import round_half_away

VARIANTS = ("ni_lif", "i_lif")
SPREADS = ("front", "uniform")


class QuantizationError(ValueError):
    """A value that should sit on the quantization grid does not."""


@dataclass(frozen=True)
class NeuronConfig:
    D: int = 4
    T: int = 1
    beta: float = 0.5
    theta: float = 1.0
    variant: str = "ni_lif"
    spread: str = "front"

    def __post_init__(self):
        if self.D < 1:
            raise ValueError("D must be >= 1")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError("beta must lie in [0, 1]")
        if self.theta <= 0:
            raise ValueError("theta must be > 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.spread not in SPREADS:
            raise ValueError(f"spread must be one of {SPREADS}")


@dataclass
class NeuronState:
    """Retained membrane potential carried to the next timestep."""

    H: np.ndarray
    t: int = 0


def init_state(shape) -> NeuronState:
    return NeuronState(H=np.zeros(shape, dtype=np.float64), t=0)


@dataclass
class SpikePlan:
    """A layer's emitted activation in normalized or expanded form.

    normalized holds multiples of 1/D in [0, 1] for ni_lif, or integers
    0..D for i_lif (then integer_valued is True). expanded, when present,
    holds D binary slices stacked on a leading axis with
    sum_d expanded[d] == quantized integer, elementwise and exactly.
    """

    mode: str  # "normalized" | "expanded"
    normalized: np.ndarray
    D: int
    integer_valued: bool = False
    expanded: np.ndarray | None = None

    @property
    def step(self) -> float:
        """Value carried by one binary slice."""
        return 1.0 if self.integer_valued else 1.0 / self.D


def _membrane_step(x: np.ndarray, state: NeuronState, cfg: NeuronConfig):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != state.H.shape:
        raise ValueError(f"input shape {x.shape} != state shape {state.H.shape}")
    u = state.H + x / cfg.theta
    m = np.clip(round_half_away(u), 0.0, float(cfg.D))
    h_next = cfg.beta * (u - m)
    return m, NeuronState(H=h_next, t=state.t + 1)


def ni_lif_step(x, state: NeuronState, cfg: NeuronConfig):
    """One normalized-integer LIF step: returns (plan, next state)."""
    if cfg.variant != "ni_lif":
        raise ValueError("config variant is not ni_lif")
    m, nxt = _membrane_step(x, state, cfg)
    plan = SpikePlan(mode="normalized", normalized=m / cfg.D, D=cfg.D)
    return plan, nxt


def i_lif_step(x, state: NeuronState, cfg: NeuronConfig):
    """Raw-integer LIF step (ablation baseline): emits the integer itself."""
    if cfg.variant != "i_lif":
        raise ValueError("config variant is not i_lif")
    m, nxt = _membrane_step(x, state, cfg)
    plan = SpikePlan(mode="normalized", normalized=m, D=cfg.D, integer_valued=True)
    return plan, nxt


def lif_step(x, state: NeuronState, cfg: NeuronConfig):
    if cfg.variant == "ni_lif":
        return ni_lif_step(x, state, cfg)
    return i_lif_step(x, state, cfg)


def reparam_scale_into_threshold(scale: float, cfg: NeuronConfig) -> NeuronConfig:
    """Absorb a pre-neuron multiplicative scale into the firing threshold:
    stepping scale*x at threshold theta equals stepping x at theta/scale."""
    if scale <= 0:
        raise ValueError("scale must be > 0")
    return replace(cfg, theta=cfg.theta / scale)


def quantized_integers(plan: SpikePlan) -> np.ndarray:
    """Recover the integer emission count per element, validating the grid."""
    vals = plan.normalized if plan.integer_valued else plan.normalized * plan.D
    m = round_half_away(vals)
    if np.any(np.abs(vals - m) > 1e-9):
        worst = float(np.max(np.abs(vals - m)))
        raise QuantizationError(
            f"values off the 1/D grid by up to {worst:.3e}; upstream quantization contract violated")
    if np.any(m < 0) or np.any(m > plan.D):
        raise QuantizationError("quantized values outside [0, D]")
    return m


def expand_to_spikes(plan: SpikePlan, cfg: NeuronConfig) -> SpikePlan:
    """Unroll a normalized plan into D binary slices.

    Per element, 'front' spread sets the first m slices to 1; 'uniform'
    distributes the m ones evenly across the D slots. Both satisfy the sum
    identity exactly; front is the default because it is the simplest
    deterministic choice.
    """
    m = quantized_integers(plan)
    d = cfg.D
    slots = np.arange(d).reshape((d,) + (1,) * m.ndim)
    if cfg.spread == "front":
        expanded = (slots < m[None]).astype(np.float64)
    else:
        # slot d fires when the cumulative quota floor((d+1)*m/D) increments
        before = (slots * m[None]) // d
        after = ((slots + 1) * m[None]) // d
        expanded = (after > before).astype(np.float64)
    return SpikePlan(mode="expanded", normalized=plan.normalized, D=plan.D,
                     integer_valued=plan.integer_valued, expanded=expanded)


def assert_binary(expanded: np.ndarray) -> None:
    if not np.all((expanded == 0.0) | (expanded == 1.0)):
        raise QuantizationError("expanded plan contains non-binary values")


def spike_matmul(weights: np.ndarray, plan: SpikePlan, D: int):
    """Accumulate-only product with an expanded plan.

    weights: (out, in) or (in,); plan.expanded: (D, ..., in) binary. The
    per-slice weights are weights * step (step = 1/D for normalized plans),
    and each firing input adds its weight column: no multiplication by an
    activation value ever happens. Returns (result, ac_count) where result
    equals weights @ plan.normalized and ac_count is the number of gated
    accumulations actually performed (spikes x fan-out).
    """
    if plan.expanded is None:
        raise ValueError("plan must be expanded")
    if D != plan.D:
        raise ValueError("D mismatch between plan and call")
    assert_binary(plan.expanded)
    w = np.asarray(weights, dtype=np.float64)
    vector = w.ndim == 1
    w2 = w[None, :] if vector else w
    n_out, n_in = w2.shape
    if plan.expanded.shape[-1] != n_in:
        raise ValueError(f"fan-in mismatch: weights {n_in}, plan {plan.expanded.shape[-1]}")
    w_slice = w2 * plan.step
    lead = plan.expanded.shape[1:-1]
    flat = plan.expanded.reshape(plan.expanded.shape[0], -1, n_in)
    out_flat = np.zeros((flat.shape[1], n_out), dtype=np.float64)
    ac = 0
    for d in range(flat.shape[0]):
        for r in range(flat.shape[1]):
            idx = np.nonzero(flat[d, r])[0]
            if idx.size:
                out_flat[r] += w_slice[:, idx].sum(axis=1)
                ac += idx.size * n_out
    if vector:
        return out_flat[:, 0].reshape(lead), ac
    return out_flat.reshape(lead + (n_out,)), ac


def firing_rate(plan: SpikePlan) -> float:
    """Mean emitted value as a fraction of the ceiling D, in [0, 1]."""
    if plan.integer_valued:
        return float(plan.normalized.mean() / plan.D)
    return float(plan.normalized.mean())
