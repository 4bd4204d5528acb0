"""Simulated compliant 4-joint plant with torque sensing.

The plant is four decoupled linear joints, I * acc = tau_motor + tau_ext
- b * vel, integrated with semi-implicit Euler at a 1 ms physics step and
clamped at the joint limits. All angles are radians here; the model-facing
normalized representation converts at the session boundary.

Externally applied torque is estimated by the excess-torque pipeline:
the inverse model predicts the torque the robot's own commanded motion
accounts for, the difference to the measured torque is deadbanded, leaky
integrated with decay alpha, and magnitude-clamped at e_max. The sensed
measured torque is motor + external + Gaussian noise. The inverse model
receives the motor-attributable acceleration (the simulator's ground-truth
decomposition of the commanded torque), so with an exact model the pipeline
recovers the injected external torque identically; a configured model-error
fraction perturbs the assumed inertia/damping and leaves a residual
proportional to the acceleration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

NUM_JOINTS = 4
PHYSICS_DT = 1e-3
CONTROL_TICK_S = 0.1
PHYSICS_STEPS_PER_TICK = int(round(CONTROL_TICK_S / PHYSICS_DT))


@dataclass
class PlantParams:
    inertia: float = 1.0            # kg m^2 per joint
    damping: float = 0.5            # N m s / rad per joint
    joint_limit_rad: float = float(np.pi / 2)
    model_error: float = 0.0        # fractional inertia/damping mismatch
    sensor_noise_std: float = 0.01  # N m, on the measured torque per tick


@dataclass
class PlantState:
    theta: Array = field(default_factory=lambda: np.zeros(NUM_JOINTS))
    theta_dot: Array = field(default_factory=lambda: np.zeros(NUM_JOINTS))
    t: float = 0.0

    def copy(self) -> "PlantState":
        return PlantState(theta=self.theta.copy(),
                          theta_dot=self.theta_dot.copy(), t=self.t)


def sim_step(state: PlantState, motor_torque: Array, external_torque: Array,
             dt: float, params: PlantParams) -> PlantState:
    """One semi-implicit Euler step; joints clamp at the limits with the
    velocity zeroed so they do not wind up against the stop."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    tau = np.asarray(motor_torque, float) + np.asarray(external_torque, float)
    if not np.all(np.isfinite(tau)):
        raise ValueError("non-finite torque command")
    acc = (tau - params.damping * state.theta_dot) / params.inertia
    v = state.theta_dot + dt * acc
    x = state.theta + dt * v
    lim = params.joint_limit_rad
    hit = (x > lim) | (x < -lim)
    x = np.clip(x, -lim, lim)
    v = np.where(hit, 0.0, v)
    return PlantState(theta=x, theta_dot=v, t=state.t + dt)


def motor_accel(params: PlantParams, motor_torque: Array,
                theta_dot: Array) -> Array:
    """Acceleration the commanded motor torque accounts for on the true plant."""
    return (np.asarray(motor_torque) - params.damping * theta_dot) / params.inertia


def inverse_model(params: PlantParams, theta_dot: Array,
                  accel_est: Array) -> Array:
    """Torque the robot's own motion should need, under the (possibly
    perturbed) dynamics model."""
    scale = 1.0 + params.model_error
    return (scale * params.inertia) * np.asarray(accel_est) \
        + (scale * params.damping) * np.asarray(theta_dot)


@dataclass
class TorqueFilterState:
    tau_th: float = 0.05
    alpha: float = 0.9
    e_max: float = 2.0
    e_tilde: Array = field(default_factory=lambda: np.zeros(NUM_JOINTS))
    started: bool = False

    def __post_init__(self):
        if self.tau_th < 0 or not 0 < self.alpha < 1 or self.e_max <= 0:
            raise ValueError("need tau_th >= 0, 0 < alpha < 1, e_max > 0")


def excess_pipeline(tau_measured: Array, tau_dynm: Array,
                    filt: TorqueFilterState) -> tuple[Array, TorqueFilterState]:
    """Deadband, leaky-integrate, and clamp the excess torque estimate.

    The magnitude clamp applies on every step including the first, keeping
    |e_tilde| <= e_max unconditionally.
    """
    tau_exc = np.asarray(tau_measured, float) - np.asarray(tau_dynm, float)
    e = np.where(tau_exc > 0,
                 np.maximum(0.0, tau_exc - filt.tau_th),
                 np.minimum(0.0, tau_exc + filt.tau_th))
    if filt.started:
        raw = filt.alpha * filt.e_tilde + e
    else:
        raw = e
    e_tilde = np.clip(raw, -filt.e_max, filt.e_max)
    new_filt = TorqueFilterState(tau_th=filt.tau_th, alpha=filt.alpha,
                                 e_max=filt.e_max, e_tilde=e_tilde,
                                 started=True)
    return e_tilde, new_filt


@dataclass
class ControlGains:
    k_r: float = 1.0   # prediction-following gain
    k_p: float = 0.3   # compliance gain, rad per N m

    def __post_init__(self):
        if self.k_r < 0 or self.k_p < 0:
            raise ValueError("gains must be non-negative")


def compose_target(theta_pred: Array, theta_obs: Array, e_tilde: Array,
                   gains: ControlGains) -> Array:
    """Next joint target: prediction delta plus sensed-force compliance."""
    theta_pred = np.asarray(theta_pred, float)
    theta_obs = np.asarray(theta_obs, float)
    return (theta_pred - theta_obs) * gains.k_r \
        + np.asarray(e_tilde, float) * gains.k_p + theta_obs


@dataclass
class PidState:
    kp: float = 900.0
    ki: float = 0.0
    kd: float = 41.5
    i_max: float = 10.0
    integral: Array = field(default_factory=lambda: np.zeros(NUM_JOINTS))
    prev_error: Array | None = None

    def __post_init__(self):
        if self.kp < 0 or self.ki < 0 or self.kd < 0:
            raise ValueError("PID gains must be non-negative")


def pid_control(theta_star: Array, state: PlantState, dt: float,
                pid: PidState) -> tuple[Array, PidState]:
    """Positional PID with anti-windup clamp on the integral term."""
    error = np.asarray(theta_star, float) - state.theta
    integral = np.clip(pid.integral + error * dt, -pid.i_max, pid.i_max)
    if pid.prev_error is None:
        derivative = np.zeros_like(error)
    else:
        derivative = (error - pid.prev_error) / dt
    torque = pid.kp * error + pid.ki * integral + pid.kd * derivative
    new_pid = PidState(kp=pid.kp, ki=pid.ki, kd=pid.kd, i_max=pid.i_max,
                       integral=integral, prev_error=error)
    return torque, new_pid
