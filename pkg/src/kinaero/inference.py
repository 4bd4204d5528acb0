"""Interaction-phase error regression over a sliding past window.

Each control step appends the newest observation, then runs a fixed number
of inner epochs that update only the per-step posterior parameters inside
the window (network weights are never touched): forward over the window
with mean propagation, backward, Adam on the window's a_mu/a_sig. The loss
is the windowed evidence loss with the interaction complexity weight w.
After optimizing, one forward step past the window head predicts the next
joint angles, sampling the latent from the conditional prior with fresh
noise from the session generator.

When the window is full, appending first finalizes the oldest step: its
state under the current posterior becomes the frozen pre-window state and
its parameters are discarded. New steps start posterior == prior (zero
initial KL): a_mu = atanh(prior mean), a_sig = log(prior std).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (AdamState, Array, NonFiniteError, Tape, Tensor,
                       adam_step, zero_grads)
from .model import (SIGMA_EXP_CLAMP, NetworkParams, encode_frame,
                    free_energy_of_rollout, generate_prior, rollout_posterior)


@dataclass
class InferenceConfig:
    w: float = 0.01       # complexity weight during interaction
    epochs: int = 15      # inner optimization passes per control step
    lr_a: float = 0.05    # Adam step size for the posterior parameters
    window: int = 20      # past-window length in steps
    seed: int = 0

    def __post_init__(self):
        if self.w <= 0:
            raise ValueError("w must be positive")
        if self.epochs < 0 or self.window < 1:
            raise ValueError("need epochs >= 0 and window >= 1")


@dataclass
class StepDiagnostics:
    theta_pred: Array          # normalized next-step joint prediction
    e_window: float            # summed prediction error over the window
    r_window: tuple[float, ...]  # per-layer summed KL over the window
    f_int: float
    window_len: int


@dataclass
class WindowStep:
    abs_t: int
    obs_joints: Array
    obs_frame: Array
    a_mu: list[Tensor]
    a_sig: list[Tensor]


class SlidingWindow:
    """Past-window state for one interaction session (single-writer)."""

    def __init__(self, params: NetworkParams, icfg: InferenceConfig):
        self.params = params
        self.cfg = params.cfg
        self.icfg = icfg
        self.steps: list[WindowStep] = []
        self.pre_h: list[Array] | None = None   # frozen state before the window
        self.pre_d: list[Array] | None = None
        self.pre_abs_t = 0                      # absolute step of that state
        self.rng = np.random.default_rng(icfg.seed)
        # per-window-step (h, d) arrays from the most recent forward pass
        self._states: list[tuple[list[Array], list[Array]]] = []

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def current_abs_t(self) -> int:
        return self.steps[-1].abs_t if self.steps else self.pre_abs_t

    def _last_d(self) -> list[Array] | None:
        """d entering the next appended step, from the latest forward pass."""
        if self._states:
            return self._states[-1][1]
        return self.pre_d

    def _prior_matching_a(self) -> tuple[list[Array], list[Array]]:
        """a_mu/a_sig values that make the posterior equal the prior at the
        step that would be appended next."""
        d_prev = self._last_d()
        a_mu, a_sig = [], []
        for l, lc in enumerate(self.cfg.layers):
            if d_prev is None:  # absolute step 1: unit Gaussian prior
                a_mu.append(np.zeros(lc.num_z))
                a_sig.append(np.zeros(lc.num_z))
            else:
                lp = self.params.layers[l]
                mu_p = np.tanh(lp.w_dmu.data @ d_prev[l] + lp.b_mu.data)
                sig_p = np.exp(np.clip(lp.w_dsig.data @ d_prev[l] + lp.b_sig.data,
                                       *SIGMA_EXP_CLAMP))
                a_mu.append(np.arctanh(np.clip(mu_p, -0.999, 0.999)))
                a_sig.append(np.log(sig_p))
        return a_mu, a_sig

    def posterior_steps(self) -> list[list[tuple[Tensor, Tensor]]]:
        return [list(zip(s.a_mu, s.a_sig)) for s in self.steps]

    def a_tensors(self) -> list[Tensor]:
        out = []
        for s in self.steps:
            out.extend(s.a_mu)
            out.extend(s.a_sig)
        return out

    def forward(self, tape: Tape):
        """Window rollout under the current posterior (mean propagation)."""
        targets = [s.obs_frame for s in self.steps]
        return rollout_posterior(tape, self.params, self.posterior_steps(),
                                 eps_steps=None, targets=targets,
                                 h0=self.pre_h, d0=self.pre_d,
                                 first_abs_t=self.pre_abs_t + 1)

    def append(self, obs_joints: Array) -> None:
        obs_joints = np.asarray(obs_joints, dtype=np.float64)
        if obs_joints.shape != (self.cfg.output_dim,):
            raise ValueError(
                f"observation has shape {obs_joints.shape}, "
                f"model expects ({self.cfg.output_dim},)")
        if len(self.steps) == self.icfg.window:
            slide_window(self)
        a_mu, a_sig = self._prior_matching_a()
        self.steps.append(WindowStep(
            abs_t=self.current_abs_t + 1,
            obs_joints=obs_joints,
            obs_frame=encode_frame(obs_joints, self.cfg),
            a_mu=[Tensor(v, requires_grad=True) for v in a_mu],
            a_sig=[Tensor(v, requires_grad=True) for v in a_sig]))

    def reset_nonfinite_posteriors(self) -> int:
        """Re-initialize any step whose parameters picked up NaN or Inf."""
        n_reset = 0
        for k, s in enumerate(self.steps):
            bad = any(not np.all(np.isfinite(t.data))
                      for t in (*s.a_mu, *s.a_sig))
            if bad:
                for l, lc in enumerate(self.cfg.layers):
                    s.a_mu[l].data = np.zeros(lc.num_z)
                    s.a_sig[l].data = np.zeros(lc.num_z)
                n_reset += 1
        return n_reset


def init_window(params: NetworkParams, icfg: InferenceConfig,
                warmup_obs: list[Array]) -> SlidingWindow:
    """Build a window primed with warmup observations.

    Every step starts with the posterior matching the prior, so the initial
    KL is zero and the pre-window state follows the model's own prior
    trajectory until inference starts adapting it.
    """
    if len(warmup_obs) < 1:
        raise ValueError("need at least one warmup observation")
    window = SlidingWindow(params, icfg)
    for obs in warmup_obs:
        window.append(obs)
        ro = window.forward(Tape())
        window._states = [window_state(ro, k) for k in range(len(window.steps))]
    return window


def window_state(ro, k: int) -> tuple[list[Array], list[Array]]:
    return ro.state_at(k)


def slide_window(window: SlidingWindow) -> SlidingWindow:
    """Freeze the oldest step's state as the new pre-window state."""
    if len(window.steps) < window.icfg.window:
        raise ValueError("cannot slide a window that is not full")
    if not window._states:
        ro = window.forward(Tape())
        window._states = [window_state(ro, k) for k in range(len(window.steps))]
    h, d = window._states[0]
    window.pre_h, window.pre_d = h, d
    window.pre_abs_t = window.steps[0].abs_t
    window.steps.pop(0)
    window._states.pop(0)
    return window


def infer_step(window: SlidingWindow, obs_joints: Array,
               icfg: InferenceConfig | None = None) -> StepDiagnostics:
    """Append an observation, regress the window posterior, predict one step.

    Runs ``epochs`` iterations of forward / backward / Adam on the window's
    posterior parameters only, then rolls one step past the window head with
    a fresh prior sample to produce the next-step joint prediction. Network
    weights are read-only throughout.
    """
    icfg = icfg or window.icfg
    window.append(obs_joints)
    cfg = window.cfg
    a_tensors = window.a_tensors()
    adam = AdamState.for_params(a_tensors, lr=icfg.lr_a)
    first_abs_t = window.pre_abs_t + 1

    for _ in range(icfg.epochs):
        zero_grads(a_tensors)
        try:
            tape = Tape()
            ro = window.forward(tape)
            loss = free_energy_of_rollout(tape, ro, cfg, w=icfg.w,
                                          first_abs_t=first_abs_t)
            if not math.isfinite(loss.item()):
                raise NonFiniteError("window loss non-finite")
            tape.backward(loss)
        except NonFiniteError:
            window.reset_nonfinite_posteriors()
            continue
        adam_step(a_tensors, [t.grad for t in a_tensors], adam)
    zero_grads(a_tensors)

    # diagnostics pass under the final posterior, then one predictive step
    tape = Tape()
    ro = window.forward(tape)
    loss = free_energy_of_rollout(tape, ro, cfg, w=icfg.w,
                                  first_abs_t=first_abs_t)
    window._states = [window_state(ro, k) for k in range(len(window.steps))]
    h_end, d_end = window._states[-1]
    trace = generate_prior(window.params, 1, window.rng, h0=h_end, d0=d_end,
                           first_abs_t=window.steps[-1].abs_t + 1)
    r_per_layer = tuple(float(v) for v in ro.r_values().sum(axis=0))
    return StepDiagnostics(
        theta_pred=trace.joints[0],
        e_window=float(ro.e_values().sum()),
        r_window=r_per_layer,
        f_int=loss.item(),
        window_len=len(window.steps))
