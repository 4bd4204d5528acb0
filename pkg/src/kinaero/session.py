"""Closed-loop interaction session: window inference driving the plant.

One control tick covers 100 physics steps (100 ms). The tick observes the
joints, regresses the window posterior and predicts the next joint angles,
composes the joint target from the prediction delta plus the compliance
term, tracks it with the PID while external torque acts on the plant, and
finally updates the excess-torque estimate from the torques measured over
the tick. The commanded target ramps linearly across the tick's physics
steps so the PID never sees a step discontinuity.

External torque sources: scripted constant-torque events, a scripted
virtual hand that servo-pulls all joints toward a primitive's trajectory
(gain ramped in, torque capped), and interactive per-joint forces and
grabs fed in by a client. Everything is sampled once per control tick.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datagen import (CYCLE_STEPS, normalized_to_rad, primitive_waveform,
                      rad_to_normalized)
from .inference import InferenceConfig, SlidingWindow, infer_step, init_window
from .model import Array, NetworkParams
from .plant import (CONTROL_TICK_S, PHYSICS_DT, PHYSICS_STEPS_PER_TICK,
                    ControlGains, PidState, PlantParams, PlantState,
                    TorqueFilterState, compose_target, excess_pipeline,
                    inverse_model, motor_accel, pid_control, sim_step)


@dataclass
class ForceEvent:
    """Constant joint torques over a span of control ticks."""
    t_start: int
    duration: int
    torques: Array


@dataclass
class HandEvent:
    """Virtual hand pulling the joints toward a primitive's trajectory.

    ``phase`` is the pattern step index at ``t_start``; None locks guidance
    to the global tick phase instead.
    """
    t_start: int
    target_pattern: str
    gain: float = 5.0
    duration: int = 100
    ramp: int = 10
    cap: float = 1.5
    phase: int | None = None


def load_force_script(path: str | Path) -> list[ForceEvent | HandEvent]:
    """Parse the scenario JSON: a list of constant-torque or hand entries."""
    events: list[ForceEvent | HandEvent] = []
    for entry in json.loads(Path(path).read_text()):
        if "joint_torques" in entry:
            events.append(ForceEvent(t_start=entry["t_start_step"],
                                     duration=entry["duration_steps"],
                                     torques=np.asarray(entry["joint_torques"], float)))
        elif "target_pattern" in entry:
            events.append(HandEvent(t_start=entry["t_start_step"],
                                    target_pattern=entry["target_pattern"],
                                    gain=entry.get("guidance_gain", 5.0),
                                    duration=entry.get("duration_steps", 100)))
        else:
            raise ValueError(f"unrecognized script entry: {entry}")
    return events


@dataclass
class SessionConfig:
    seed: int = 0
    hand_gain: float = 5.0
    hand_cap: float = 1.5
    grab_gain: float = 5.0
    grab_cap: float = 1.5


class InteractionSession:
    """Owns the plant loop state; single-writer, ticked synchronously."""

    def __init__(self, params: NetworkParams, icfg: InferenceConfig,
                 plant_params: PlantParams | None = None,
                 gains: ControlGains | None = None,
                 pid: PidState | None = None,
                 filt: TorqueFilterState | None = None,
                 session_cfg: SessionConfig | None = None,
                 telemetry_path: str | Path | None = None):
        self.params = params
        self.icfg = icfg
        self.plant_params = plant_params or PlantParams()
        self.gains = gains or ControlGains()
        self.pid = pid or PidState()
        self.filt = filt or TorqueFilterState()
        self.scfg = session_cfg or SessionConfig()
        self.rng = np.random.default_rng(
            np.random.SeedSequence([self.scfg.seed, icfg.seed]))
        self.plant = PlantState()
        self.e_tilde = np.zeros(4)
        self.tick_index = 0
        self.lag = 0
        self.events: list[ForceEvent | HandEvent] = []
        self.client_force = np.zeros(4)
        self.grabs: dict[int, float] = {}
        self.telemetry: list[dict] = []
        self._telemetry_file = (open(telemetry_path, "w")
                                if telemetry_path is not None else None)
        self._theta_star = self.plant.theta.copy()
        self._theta_pred_n = rad_to_normalized(self.plant.theta)
        self._last_diag = None
        # prime the window with the initial posture
        self.window: SlidingWindow = init_window(
            params, icfg, [rad_to_normalized(self.plant.theta)])

    # -- client / script inputs -------------------------------------------

    def schedule(self, events: list[ForceEvent | HandEvent]) -> None:
        self.events.extend(events)

    def active_hand(self, t: int) -> HandEvent | None:
        for ev in self.events:
            if isinstance(ev, HandEvent) and ev.t_start <= t < ev.t_start + ev.duration:
                return ev
        return None

    def set_force(self, joint: int, value: float) -> None:
        self.client_force[joint] = value

    def set_grab(self, joint: int, angle_rad: float) -> None:
        self.grabs[joint] = float(angle_rad)

    def release(self, joint: int) -> None:
        self.grabs.pop(joint, None)

    def set_w(self, value: float) -> None:
        """Swap the interaction complexity weight live."""
        self.icfg = replace(self.icfg, w=value)
        self.window.icfg = self.icfg

    # -- loop --------------------------------------------------------------

    def _external_torque(self, theta: Array, t: int) -> Array:
        tau = self.client_force.copy()
        for ev in self.events:
            if isinstance(ev, ForceEvent) and ev.t_start <= t < ev.t_start + ev.duration:
                tau = tau + ev.torques
        hand = self.active_hand(t)
        if hand is not None:
            if hand.phase is None:
                pos = (t + 1) % CYCLE_STEPS
            else:
                pos = (hand.phase + (t - hand.t_start) + 1) % CYCLE_STEPS
            target = normalized_to_rad(primitive_waveform(hand.target_pattern, pos))
            ramp = min(1.0, (t - hand.t_start + 1) / max(hand.ramp, 1))
            pull = np.clip(ramp * hand.gain * (target - theta),
                           -hand.cap, hand.cap)
            tau = tau + pull
        for joint, angle in self.grabs.items():
            pull = np.clip(self.scfg.grab_gain * (angle - theta[joint]),
                           -self.scfg.grab_cap, self.scfg.grab_cap)
            tau[joint] += pull
        return tau

    def observe(self) -> Array:
        """Current joints in the model's normalized representation."""
        return rad_to_normalized(self.plant.theta.copy())

    def apply_diagnostics(self, diag) -> None:
        self._last_diag = diag
        self._theta_pred_n = np.clip(diag.theta_pred, *self.params.cfg.value_range)

    def tick(self) -> dict:
        """One synchronous 100 ms control step: infer, then drive the plant."""
        obs_n = self.observe()
        t0 = time.perf_counter()
        self.apply_diagnostics(infer_step(self.window, obs_n))
        infer_s = time.perf_counter() - t0
        return self.plant_tick(obs_n, infer_s=infer_s)

    def plant_tick(self, obs_n: Array, infer_s: float = 0.0) -> dict:
        """Compose the target from the latest prediction, run one tick of
        physics under the external torques, update the excess estimate, and
        record telemetry. Usable on its own when inference lags behind."""
        t = self.tick_index
        theta_obs = normalized_to_rad(np.asarray(obs_n))
        diag = self._last_diag

        theta_pred = normalized_to_rad(self._theta_pred_n)
        theta_star = compose_target(theta_pred, self.plant.theta, self.e_tilde,
                                    self.gains)

        meas_sum = np.zeros(4)
        dynm_sum = np.zeros(4)
        start_star = self._theta_star
        n_sub = PHYSICS_STEPS_PER_TICK
        for i in range(1, n_sub + 1):
            target = start_star + (theta_star - start_star) * (i / n_sub)
            tau_mot, self.pid = pid_control(target, self.plant, PHYSICS_DT, self.pid)
            tau_ext = self._external_torque(self.plant.theta, t)
            dynm_sum += inverse_model(
                self.plant_params, self.plant.theta_dot,
                motor_accel(self.plant_params, tau_mot, self.plant.theta_dot))
            self.plant = sim_step(self.plant, tau_mot, tau_ext, PHYSICS_DT,
                                  self.plant_params)
            meas_sum += tau_mot + tau_ext
        self._theta_star = theta_star

        noise = self.rng.normal(0.0, self.plant_params.sensor_noise_std, 4)
        tau_measured = meas_sum / n_sub + noise
        tau_dynm = dynm_sum / n_sub
        self.e_tilde, self.filt = excess_pipeline(tau_measured, tau_dynm, self.filt)

        record = {
            "t": t,
            "theta_obs": [round(v, 6) for v in np.asarray(obs_n)],
            "theta_pred": [round(v, 6) for v in self._theta_pred_n],
            "e_window": diag.e_window if diag is not None else 0.0,
            "r_l1": diag.r_window[0] if diag is not None else 0.0,
            "r_l2": (diag.r_window[1] if diag is not None
                     and len(diag.r_window) > 1 else 0.0),
            "F_int": diag.f_int if diag is not None else 0.0,
            "w_i": self.icfg.w,
            "lag": self.lag,
            "e_tilde": [round(v, 6) for v in self.e_tilde],
            "infer_s": infer_s,
        }
        self.telemetry.append(record)
        if self._telemetry_file is not None:
            self._telemetry_file.write(json.dumps(record) + "\n")
        self.tick_index += 1
        return record

    def run(self, n_ticks: int) -> list[dict]:
        for _ in range(n_ticks):
            self.tick()
        return self.telemetry

    def close(self) -> None:
        if self._telemetry_file is not None:
            self._telemetry_file.flush()
            self._telemetry_file.close()
            self._telemetry_file = None

    def __enter__(self) -> "InteractionSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
