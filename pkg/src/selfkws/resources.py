"""Closed-form resource model: training memory footprint, labeling/training
energy crossover, sleep-mode average power and battery lifetime.

Platform constants default to the measured values of the reference
ultra-low-power sensor node (microphone + MCU); all formulas are exact
closed forms.
"""

from dataclasses import dataclass, field

import numpy as np

from .encoder import ArchDescriptor

MIB = 2.0**20
SECONDS_PER_DAY = 86400.0
DAYS_PER_MONTH = 30.0

MFCC_MAP_ELEMS = 47 * 10
RAW_FRAME_BYTES = 16000 * 2  # 1 s of 16-bit audio


class ResourceError(ValueError):
    pass


@dataclass
class PlatformConstants:
    """Measured board-level constants consumed by the cost model."""

    # average labeling power while always-on, per architecture [mW]
    p_label_active_mw: dict = field(
        default_factory=lambda: {
            "dscnn_s": 6.1,
            "dscnn_m": 6.25,  # inferred from the power breakdown, not the text
            "dscnn_l": 6.71,  # inferred from the power breakdown, not the text
            "resnet15": 8.2,
        }
    )
    # total energy of one full training run, per architecture [J]
    e_train_j: dict = field(
        default_factory=lambda: {
            "dscnn_s": 1.5,
            "dscnn_m": 4.7,
            "dscnn_l": 11.7,
            "resnet15": 86.8,
        }
    )
    p_mic_sleep_mw: float = 0.018
    p_mcu_sleep_mw: float = 0.045
    p_mic_active_mw: float = 0.67
    # back-solved so that 0.66 mW average power yields a 7.5-month lifetime
    battery_capacity_j: float = 12800.0
    bytes_per_train_elem: int = 2
    train_trigger_samples: int = 400


@dataclass
class MemoryReport:
    weights_grads_mib: float
    data_mib: float
    activations_mib: float


def training_memory(arch: ArchDescriptor, n_stored_maps: int, batch_size: int,
                    bytes_per_elem: int = 2) -> MemoryReport:
    """On-device training footprint: half-precision weights plus gradients,
    the stored MFCC maps, and the per-batch activation tape."""
    weights_grads = arch.param_count * 2 * bytes_per_elem / MIB
    data = n_stored_maps * MFCC_MAP_ELEMS * bytes_per_elem / MIB
    activations = sum(arch.per_layer_activation_elems) * batch_size * bytes_per_elem / MIB
    return MemoryReport(
        weights_grads_mib=weights_grads, data_mib=data, activations_mib=activations
    )


def raw_to_mfcc_storage_ratio(bytes_per_elem: int = 2) -> float:
    """How much smaller a stored MFCC map is than its 1 s raw audio frame."""
    return RAW_FRAME_BYTES / (MFCC_MAP_ELEMS * bytes_per_elem)


def crossover_interval_10x(e_train_j: float, p_label_mw: float, trigger: int = 400) -> float:
    """Per-sample collection interval [s] at which daily training energy is
    one tenth of daily labeling energy.

    Daily trainings = samples/day / trigger; daily labeling energy =
    P * 86400; solving the 10x ratio for the interval gives the closed form
    10 * E_train / (trigger * P).
    """
    if e_train_j < 0 or p_label_mw <= 0 or trigger <= 0:
        raise ResourceError("inputs must be positive")
    return 10.0 * e_train_j / (trigger * p_label_mw * 1e-3)


def training_energy_per_day(e_train_j: float, interval_s: float, trigger: int = 400) -> float:
    """Energy [J/day] spent training when one sample arrives every interval_s."""
    samples_per_day = SECONDS_PER_DAY / interval_s
    return samples_per_day / trigger * e_train_j


def labeling_energy_per_day(p_label_mw: float) -> float:
    return p_label_mw * 1e-3 * SECONDS_PER_DAY


def average_power_with_sleep(p_active_mw: float, activity_fraction: float,
                             platform: PlatformConstants = None) -> float:
    """Average power when the node sleeps outside acoustic activity."""
    platform = platform or PlatformConstants()
    if not 0.0 <= activity_fraction <= 1.0:
        raise ResourceError("activity fraction must be in [0, 1]")
    p_sleep = platform.p_mic_sleep_mw + platform.p_mcu_sleep_mw
    return activity_fraction * p_active_mw + (1.0 - activity_fraction) * p_sleep


def battery_lifetime_days(avg_power_mw: float, capacity_j: float) -> float:
    if avg_power_mw <= 0 or capacity_j <= 0:
        raise ResourceError("inputs must be positive")
    return capacity_j / (avg_power_mw * 1e-3 * SECONDS_PER_DAY)


def battery_lifetime_months(avg_power_mw: float, capacity_j: float) -> float:
    return battery_lifetime_days(avg_power_mw, capacity_j) / DAYS_PER_MONTH


def parametric_training_latency(total_training_macs: float, macs_per_cycle: float,
                                freq_hz: float) -> float:
    """Optional latency hook; needs user-supplied throughput constants."""
    if macs_per_cycle <= 0 or freq_hz <= 0:
        raise ResourceError("throughput constants must be positive")
    return total_training_macs / (macs_per_cycle * freq_hz)


def estimate_report(arch: ArchDescriptor, platform: PlatformConstants = None,
                    n_stored_maps: int = 400, batch_size: int = 73,
                    activity_fraction: float = 0.1) -> dict:
    """Full cost report for one architecture (memory, energy crossover,
    sleep-mode power, battery lifetime)."""
    platform = platform or PlatformConstants()
    name = arch.name
    mem = training_memory(arch, n_stored_maps, batch_size, platform.bytes_per_train_elem)
    report = {
        "arch": name,
        "param_count": arch.param_count,
        "memory": {
            "weights_grads_mib": mem.weights_grads_mib,
            "data_mib": mem.data_mib,
            "activations_mib": mem.activations_mib,
            "raw_to_mfcc_ratio": raw_to_mfcc_storage_ratio(platform.bytes_per_train_elem),
        },
    }
    if name in platform.p_label_active_mw and name in platform.e_train_j:
        p = platform.p_label_active_mw[name]
        e = platform.e_train_j[name]
        avg_p = average_power_with_sleep(p, activity_fraction, platform)
        report["energy"] = {
            "p_label_active_mw": p,
            "e_train_j": e,
            "crossover_interval_10x_s": crossover_interval_10x(
                e, p, platform.train_trigger_samples
            ),
            "labeling_j_per_day": labeling_energy_per_day(p),
            "avg_power_with_sleep_mw": avg_p,
            "battery_lifetime_months": battery_lifetime_months(
                avg_p, platform.battery_capacity_j
            ),
        }
    return report


def crossover_curve(e_train_j: float, intervals_s, trigger: int = 400):
    """(interval, training J/day) pairs for the energy trade-off curve."""
    return [(float(t), training_energy_per_day(e_train_j, float(t), trigger)) for t in intervals_s]
