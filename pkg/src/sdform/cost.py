"""First-order storage and energy model for dense vs. SD execution.

Every weight byte is read from DRAM once per inference pass, activations are
read and written once, and weights plus activations are staged through SRAM
once. Compute is counted as MACs and, in SD mode, the shift-adds that rebuild
the weights. All unit costs are pJ per 8-bit access or operation.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .codec import SizeReport
from .errors import ParameterError
from .rebuild import LayerDims, count_flops

MODES = ("dense", "sd")


@dataclass(frozen=True)
class UnitEnergy:
    dram: float = 100.0
    sram_lo: float = 1.36
    sram_hi: float = 2.45
    sram: float = 1.905
    mac: float = 0.143
    mult: float = 0.124
    add: float = 0.019

    def __post_init__(self):
        chain = (self.dram, self.sram_hi, self.sram, self.sram_lo, self.mac, self.mult, self.add)
        if any(not np.isfinite(v) or v <= 0 for v in chain):
            raise ParameterError("unit energies must be positive and finite")
        if not (self.dram >= self.sram_hi >= self.sram >= self.sram_lo >= self.mac >= self.mult >= self.add):
            raise ParameterError("unit energies must satisfy dram >= sram_hi >= sram >= sram_lo "
                                 ">= mac >= mult >= add")


def memory_compute_ratio(u: UnitEnergy = UnitEnergy()) -> float:
    """Cheapest SRAM access over one MAC."""
    return u.sram_lo / u.mac


@dataclass
class CostReport:
    dram_weight_bytes: float = 0.0
    dram_activation_bytes: float = 0.0
    sram_bytes: float = 0.0
    macs: float = 0.0
    mults: float = 0.0
    adds: float = 0.0
    shift_adds: float = 0.0
    energy_dram_weights: float = 0.0
    energy_dram_activations: float = 0.0
    energy_sram: float = 0.0
    energy_mac: float = 0.0
    energy_shift_add: float = 0.0
    layers: dict = field(default_factory=dict)

    @property
    def total_pj(self):
        return (self.energy_dram_weights + self.energy_dram_activations + self.energy_sram
                + self.energy_mac + self.energy_shift_add)

    @property
    def dram_pj(self):
        return self.energy_dram_weights + self.energy_dram_activations

    @property
    def compute_pj(self):
        return self.energy_mac + self.energy_shift_add

    def __add__(self, other):
        out = CostReport(**{f.name: getattr(self, f.name) + getattr(other, f.name)
                            for f in fields(self) if f.name != "layers"})
        out.layers = {**self.layers, **other.layers}
        return out

    def to_dict(self, baseline: "CostReport | None" = None):
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "layers"}
        d["total_pj"] = self.total_pj
        if baseline is not None:
            d["ratio_vs_dense"] = baseline.total_pj / self.total_pj if self.total_pj else float("inf")
        if self.layers:
            d["layers"] = {k: v.to_dict() for k, v in self.layers.items()}
        return d


def estimate_layer(mode, dims: LayerDims, size: SizeReport | None = None, act_bits=8,
                   u: UnitEnergy = UnitEnergy(), density=1.0, basis_width=3) -> CostReport:
    """Cost of one inference pass through one layer.

    ``density`` is the fraction of nonzero rebuilt weights (scales the MACs in
    SD mode); ``basis_width`` is the number of basis columns each nonzero
    coefficient is shifted into.
    """
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}")
    if mode == "sd":
        if size is None:
            raise ParameterError("sd mode needs the layer's SizeReport")
        w_bytes = size.encoded_bits / 8
        flops = count_flops(dims, density, ce_nonzeros=size.nonzeros, basis_width=basis_width)
    else:
        w_bytes = 4.0 * dims.weights
        flops = count_flops(dims)
    a_bytes = (dims.C + dims.M) * dims.E * dims.F * act_bits / 8
    return CostReport(
        dram_weight_bytes=w_bytes,
        dram_activation_bytes=a_bytes,
        sram_bytes=w_bytes + a_bytes,
        macs=flops.mac_count,
        mults=flops.multiplies,
        adds=flops.adds,
        shift_adds=flops.shift_add_rebuild_count,
        energy_dram_weights=w_bytes * u.dram,
        energy_dram_activations=a_bytes * u.dram,
        energy_sram=(w_bytes + a_bytes) * u.sram,
        energy_mac=flops.mac_count * u.mac,
        energy_shift_add=flops.shift_add_rebuild_count * u.add,
    )


@dataclass(frozen=True)
class LayerCostSpec:
    name: str
    dims: LayerDims
    size: SizeReport | None = None
    density: float = 1.0
    basis_width: int = 3


def estimate_model(layers, mode, u: UnitEnergy = UnitEnergy(), act_bits=8) -> CostReport:
    """Sum of :func:`estimate_layer` over ``LayerCostSpec`` entries, with a per-layer breakdown."""
    total = CostReport()
    for spec in layers:
        rep = estimate_layer(mode, spec.dims, spec.size, act_bits, u, spec.density, spec.basis_width)
        total = total + rep
        total.layers[spec.name] = rep
    return total
