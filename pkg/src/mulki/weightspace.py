"""Parameter-space integration: running weight ensembles and drift penalty.

During a task the trainer keeps a running uniform average of parameter
snapshots: the task's starting parameters, then the live parameters
every `interval` iterations. After m averaging events the ensemble
equals the plain mean of those m + 1 vectors. In "ewe" mode the live
parameters are additionally overwritten by the ensemble after every
eta-th averaging, which re-centers optimization on the smoothed
trajectory.

The drift penalty (squared distance to the previous task's final
parameters) lives in losses.wc_loss; this module owns the ensemble
bookkeeping and its serialization.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

MODES = ("we", "ewe", "off")

_HEADER_LEN = struct.Struct("<I")
STATE_FORMAT_VERSION = 1


@dataclass
class WEState:
    """Running ensemble over one task's training window.

    theta_hat: current uniform mean of the sampled parameter vectors.
    m:         number of averaging events so far (m = floor(k / interval)
               after iteration k).
    """

    theta_hat: np.ndarray
    m: int
    interval: int
    eta: int
    mode: str

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown ensemble mode {self.mode!r}; expected one of {MODES}")
        if self.interval < 1:
            raise ContractError(f"interval must be >= 1, got {self.interval}")
        if self.eta < 1:
            raise ContractError(f"eta must be >= 1, got {self.eta}")
        if self.m < 0:
            raise ContractError(f"averaging count must be >= 0, got {self.m}")


def we_init(theta_start: np.ndarray, interval: int, eta: int = 5, mode: str = "we") -> WEState:
    """Start an ensemble at a task's initial parameters."""
    theta_start = np.asarray(theta_start, dtype=np.float64)
    return WEState(theta_hat=theta_start.copy(), m=0, interval=int(interval), eta=int(eta), mode=mode)


def we_step(state: WEState, theta_current: np.ndarray, k: int) -> bool:
    """Fold iteration k's parameters into the ensemble when k hits the interval.

    At the m-th averaging event the update is

        theta_hat <- theta / (m + 1) + theta_hat * m / (m + 1)

    computed in the incremental form theta_hat + (theta - theta_hat)/(m+1)
    so a constant stream is a bitwise fixed point. theta_hat stays the
    uniform mean of the start vector and the m sampled vectors. Returns
    True if an averaging happened.
    """
    if k < 1:
        raise ContractError(f"iteration index must be >= 1, got {k}")
    if state.mode == "off" or k % state.interval != 0:
        return False
    theta_current = np.asarray(theta_current, dtype=np.float64)
    if theta_current.shape != state.theta_hat.shape:
        raise ContractError(
            f"we_step: parameter length changed, {theta_current.shape} vs {state.theta_hat.shape}"
        )
    state.m += 1
    state.theta_hat = state.theta_hat + (theta_current - state.theta_hat) / (state.m + 1)
    return True


def ewe_step(state: WEState, k: int) -> bool:
    """True when iteration k should overwrite live parameters with theta_hat.

    Only fires in "ewe" mode, after every eta-th averaging event. The
    caller performs the overwrite (and resets optimizer moments, since
    the live point jumps).
    """
    if state.mode != "ewe":
        return False
    return k % (state.eta * state.interval) == 0 and state.m > 0


def final_params(state: WEState | None, raw_params: np.ndarray) -> np.ndarray:
    """The parameters a task hands onward: the ensemble unless mode is off."""
    if state is None or state.mode == "off":
        return np.asarray(raw_params, dtype=np.float64).copy()
    return state.theta_hat.copy()


def save_we_state(state: WEState, path) -> None:
    """Length-prefixed JSON manifest + raw little-endian float64 payload."""
    manifest = {
        "format_version": STATE_FORMAT_VERSION,
        "m": state.m,
        "interval": state.interval,
        "eta": state.eta,
        "mode": state.mode,
        "count": int(state.theta_hat.size),
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER_LEN.pack(len(header)))
        fh.write(header)
        fh.write(state.theta_hat.astype("<f8").tobytes())


def load_we_state(path) -> WEState:
    with open(path, "rb") as fh:
        raw_len = fh.read(_HEADER_LEN.size)
        if len(raw_len) != _HEADER_LEN.size:
            raise ContractError(f"ensemble state {path} is truncated")
        (header_len,) = _HEADER_LEN.unpack(raw_len)
        header = fh.read(header_len)
        if len(header) != header_len:
            raise ContractError(f"ensemble state {path} is truncated")
        manifest = json.loads(header.decode("utf-8"))
        payload = fh.read()
    if manifest.get("format_version") != STATE_FORMAT_VERSION:
        raise ContractError(f"unsupported ensemble state version in {path}")
    if len(payload) % 8 != 0:
        raise ContractError(f"ensemble state {path} is truncated")
    theta_hat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if theta_hat.size != manifest["count"]:
        raise ContractError(f"ensemble state {path}: expected {manifest['count']} values, found {theta_hat.size}")
    return WEState(
        theta_hat=theta_hat,
        m=int(manifest["m"]),
        interval=int(manifest["interval"]),
        eta=int(manifest["eta"]),
        mode=manifest["mode"],
    )
