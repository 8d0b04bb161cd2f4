"""Flow/volume conversions for expiratory time series."""

from __future__ import annotations

import numpy as np

from .cohort import FlowSeries


def volume_from_flow(flow: FlowSeries) -> np.ndarray:
    """Cumulative expired volume (L) by trapezoidal integration; v[0] = 0."""
    f = flow.flow_l_per_s
    dt = flow.sample_period_s
    increments = 0.5 * dt * (f[1:] + f[:-1])
    volume = np.empty_like(f)
    volume[0] = 0.0
    np.cumsum(increments, out=volume[1:])
    return volume


def flow_from_volume(volume: np.ndarray, sample_period_s: float) -> FlowSeries:
    """Differentiate a volume series: central differences inside, one-sided at ends."""
    volume = np.asarray(volume, dtype=np.float64)
    if volume.size < 2:
        raise ValueError("volume series must have length >= 2")
    edge_order = 2 if volume.size >= 3 else 1
    flow = np.gradient(volume, sample_period_s, edge_order=edge_order)
    return FlowSeries(sample_period_s=sample_period_s, flow_l_per_s=flow,
                      origin="derived_from_volume")
