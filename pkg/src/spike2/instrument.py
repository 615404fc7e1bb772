"""Forward-pass instrumentation: firing rates, spike traces, op counts,
and per-layer membrane captures for dual-mode comparison.

A Recorder is passed down the layer stack; layers report into it and never
read from it, so recording cannot perturb the computation.
"""

from __future__ import annotations

import numpy as np

from .neurons import SpikePlan


class Recorder:
    def __init__(self, capture: bool = False, trace: bool = False,
                 count: bool = False, rates: bool = True):
        self.capture = capture
        self.trace = trace
        self.count = count
        self.track_rates = rates
        self.t = 0
        self.activations: dict[str, np.ndarray] = {}
        self.activation_order: list[str] = []
        self._rate_sum: dict[str, float] = {}
        self._rate_n: dict[str, int] = {}
        self.spike_events: dict[str, int] = {}
        self.spike_slots: dict[str, int] = {}
        self.events: list[tuple[str, int, int, int]] = []
        self.ops: dict[str, dict] = {}
        self.op_order: list[str] = []

    # -- membrane capture (dual-mode comparison) ---------------------------

    def membrane(self, name: str, value: np.ndarray) -> None:
        if not self.capture:
            return
        key = name if self.t == 0 else f"{name}@t{self.t}"
        self.activations[key] = np.array(value, copy=True)
        self.activation_order.append(key)

    # -- spiking neuron reporting ------------------------------------------

    def spikes(self, name: str, plan: SpikePlan) -> None:
        if self.track_rates:
            vals = plan.normalized if not plan.integer_valued else plan.normalized / plan.D
            self._rate_sum[name] = self._rate_sum.get(name, 0.0) + float(vals.sum())
            self._rate_n[name] = self._rate_n.get(name, 0) + vals.size
        if plan.expanded is not None:
            n_events = int(plan.expanded.sum())
            self.spike_events[name] = self.spike_events.get(name, 0) + n_events
            self.spike_slots[name] = self.spike_slots.get(name, 0) + plan.expanded.size
            if self.trace:
                flat = plan.expanded.reshape(plan.expanded.shape[0], -1)
                d_idx, e_idx = np.nonzero(flat)
                for d, e in zip(d_idx.tolist(), e_idx.tolist()):
                    self.events.append((name, e, self.t, d))

    def rate(self, name: str) -> float:
        if name not in self._rate_sum:
            raise KeyError(f"no firing data recorded for layer {name!r}")
        return self._rate_sum[name] / self._rate_n[name]

    def rates(self) -> dict[str, float]:
        return {k: self._rate_sum[k] / self._rate_n[k] for k in self._rate_sum}

    # -- op accounting -------------------------------------------------------

    def weight_op(self, name: str, kind: str, dense_macs: int, spike_acs: int,
                  mac_designated: bool, input_layer: str | None = None) -> None:
        if not self.count:
            return
        rec = self.ops.get(name)
        if rec is None:
            rec = {"kind": kind, "dense_macs": 0, "spike_acs": 0,
                   "mac_designated": mac_designated, "input_layer": input_layer}
            self.ops[name] = rec
            self.op_order.append(name)
        rec["dense_macs"] += int(dense_macs)
        rec["spike_acs"] += int(spike_acs)
