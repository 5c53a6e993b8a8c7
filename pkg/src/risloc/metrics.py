"""Trial metrics: NMSE, device-to-row assignment, and DPSK bit errors."""

from dataclasses import dataclass, field
import numpy as np

from .config import SystemConfig, C_LIGHT
from .model import dpsk_decode, gray_bits, Scene
from .dictionary import Grid


def nmse(estimate, truth):
    """||estimate - truth||_F^2 / ||truth||_F^2; NaN for zero-norm truth."""
    denom = np.sum(np.abs(truth)**2)
    if denom == 0:
        return np.nan
    return float(np.sum(np.abs(np.asarray(estimate) - truth)**2) / denom)


@dataclass
class SupportAssignment:
    device_to_row: list            # per device: matched row index or None
    false_alarm_rows: list
    matched: int = 0

    @property
    def missed(self):
        return sum(1 for r in self.device_to_row if r is None)


def support_match(detected_rows, scene: Scene, grid: Grid,
                  on_grid=True) -> SupportAssignment:
    """One-to-one assignment between detected rows and the true devices.

    On-grid scenes compare flat indices exactly.  Off-grid scenes greedily
    pair rows and devices by nearest neighbour in range-normalized)
    (angle, delay) space.  Unmatched detections are false alarms.
    """
    detected = list(detected_rows)
    k = len(scene.devices)
    assignment = [None] * k
    if on_grid:
        true_rows = scene.grid_rows
        remaining = set(detected)
        for ki, row in enumerate(true_rows):
            if row in remaining:
                assignment[ki] = int(row)
                remaining.discard(row)
        false_alarms = sorted(remaining)
    else:
        a_span = grid.angles[-1] - grid.angles[0]
        d_span = grid.delays[-1] - grid.delays[0]
        pairs = []
        for ki, dev in enumerate(scene.devices):
            for row in detected:
                da = (grid.row_angle(row) - dev.angle) / a_span
                dt = (grid.row_delay(row) - dev.delay) / d_span
                pairs.append((da * da + dt * dt, ki, row))
        used_rows = set()
        used_dev = set()
        for _, ki, row in sorted(pairs):
            if ki in used_dev or row in used_rows:
                continue
            assignment[ki] = int(row)
            used_dev.add(ki)
            used_rows.add(row)
        false_alarms = sorted(set(detected) - used_rows)
    matched = sum(1 for r in assignment if r is not None)
    return SupportAssignment(device_to_row=assignment,
                             false_alarm_rows=false_alarms, matched=matched)


def aligned_gain_nmse(zeta_hat, scene: Scene, assignment: SupportAssignment):
    """Gain NMSE over devices; a missed device contributes its full energy."""
    gains = scene.gains
    err = 0.0
    for ki, row in enumerate(assignment.device_to_row):
        if row is None:
            err += np.sum(np.abs(gains[ki])**2)
        else:
            err += np.sum(np.abs(zeta_hat[row] - gains[ki])**2)
    return float(err / np.sum(np.abs(gains)**2))


def angle_distance_nmse(scene: Scene, grid: Grid,
                        assignment: SupportAssignment):
    """Squared-error ratios of matched angles and distances.

    Missed devices contribute their full squared parameter (consistent with
    an estimate of zero).
    """
    a_err = d_err = 0.0
    for ki, dev in enumerate(scene.devices):
        if assignment.device_to_row[ki] is None:
            a_err += dev.angle**2
            d_err += dev.distance**2
        else:
            row = assignment.device_to_row[ki]
            a_err += (grid.row_angle(row) - dev.angle)**2
            d_err += (C_LIGHT * grid.row_delay(row) / 2.0 - dev.distance)**2
    return (float(a_err / np.sum(scene.angles**2)),
            float(d_err / np.sum(scene.distances**2)))


def ber(zeta_hat, scene: Scene, assignment: SupportAssignment,
        config: SystemConfig):
    """Bit errors of the decoded reflection-modulated payload.

    Matched devices decode their row's gain sequence; erased symbols count
    all their bits as errors; a missed device's bits count half-errored.
    Returns (errors, total bits) with fractional errors allowed.
    """
    order = config.dpsk_order
    bits_per = int(np.log2(order))
    n_sym = config.n_blocks - 1
    total_bits = len(scene.devices) * n_sym * bits_per
    errors = 0.0
    for ki, dev in enumerate(scene.devices):
        row = assignment.device_to_row[ki]
        if row is None:
            errors += 0.5 * n_sym * bits_per
            continue
        symbols, erased = dpsk_decode(zeta_hat[row], config.reference_phase,
                                      order)
        for m in range(n_sym):
            if erased[m]:
                errors += bits_per
                continue
            got = gray_bits(int(symbols[m]), order)
            want = gray_bits(int(dev.symbol_sequence[m]), order)
            errors += sum(int(g != w) for g, w in zip(got, want))
    return errors, total_bits
