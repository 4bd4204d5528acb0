"""Layered variational RNN: dynamics, conditional prior, softmax coding, losses.

Layer stack convention: ``layers[0]`` is the bottom layer (feeds the output
head, fastest time constant), the last entry is the top. Within one time step
layers are evaluated top to bottom because a layer receives the same-step
deterministic state of the layer above.

Per layer and step, with time constant tau:

    h_t = (1 - 1/tau) * h_{t-1}
          + (1/tau) * (W_dd d_{t-1} + W_zd z_t + W_td d_above_t + b_h)
    d_t = tanh(h_t)

The latent z_t is Gaussian. Its prior is conditioned on d_{t-1} (unit Gaussian
at the very first step); the approximate posterior is parameterized by free
per-step adaptive values a_mu, a_sig through tanh/exp squashes. Joint values
are coded as per-channel softmax distributions over Gaussian-kernel bins and
scored by KL divergence; the total loss is prediction error plus the
per-layer KL terms scaled by output_dim/num_z and the complexity weight
(beta on step 1, w elsewhere).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .autodiff import Array, NonFiniteError, Tape, Tensor

# exp() arguments for every standard deviation are clamped to this range
SIGMA_EXP_CLAMP = (-10.0, 4.0)
# bin centers extend this many kernel widths beyond the value range so that
# expectation decoding stays unbiased at the range edges (roundtrip oracle:
# max error 5e-4 with pad=2, 0.098 with pad=0)
CENTER_PAD_SIGMAS = 2.0


@dataclass(frozen=True)
class LayerConfig:
    num_d: int
    num_z: int
    tau: float

    def __post_init__(self):
        if self.num_d < 1 or self.num_z < 1:
            raise ValueError("layer needs at least one deterministic and one latent unit")
        if self.tau < 1.0:
            raise ValueError("time constant must be >= 1")


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture plus loss weighting. ``layers[0]`` is the bottom layer."""

    layers: tuple[LayerConfig, ...]
    output_dim: int = 4
    n_soft: int = 10
    w_train: float = 0.01
    beta: float | None = None
    softmax_sigma: float = 0.2
    value_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("at least one layer required")
        if self.output_dim < 1 or self.n_soft < 2:
            raise ValueError("need output_dim >= 1 and n_soft >= 2")
        if self.w_train <= 0:
            raise ValueError("w_train must be positive")
        if self.beta is None:
            object.__setattr__(self, "beta", self.w_train)
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        lo, hi = self.value_range
        if not lo < hi:
            raise ValueError("value_range must be increasing")
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def to_dict(self) -> dict:
        return {
            "layers": [{"num_d": l.num_d, "num_z": l.num_z, "tau": l.tau}
                       for l in self.layers],
            "output_dim": self.output_dim,
            "n_soft": self.n_soft,
            "w_train": self.w_train,
            "beta": self.beta,
            "softmax_sigma": self.softmax_sigma,
            "value_range": list(self.value_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            layers=tuple(LayerConfig(**l) for l in d["layers"]),
            output_dim=d["output_dim"],
            n_soft=d["n_soft"],
            w_train=d["w_train"],
            beta=d["beta"],
            softmax_sigma=d["softmax_sigma"],
            value_range=tuple(d["value_range"]),
        )


# ---------------------------------------------------------------------------
# softmax value coding


@lru_cache(maxsize=32)
def _centers(n_soft: int, sigma: float, lo: float, hi: float) -> Array:
    pad = CENTER_PAD_SIGMAS * sigma
    return np.linspace(lo - pad, hi + pad, n_soft)


def bin_centers(cfg: NetworkConfig) -> Array:
    lo, hi = cfg.value_range
    return _centers(cfg.n_soft, cfg.softmax_sigma, lo, hi)


def encode_softmax(value: float, cfg: NetworkConfig, clamp: bool = True) -> Array:
    """Code a scalar as a normalized Gaussian-kernel histogram over the bins."""
    lo, hi = cfg.value_range
    if value < lo or value > hi:
        if not clamp:
            raise ValueError(f"value {value} outside range [{lo}, {hi}]")
        value = min(max(value, lo), hi)
    c = bin_centers(cfg)
    q = np.exp(-((value - c) ** 2) / (2.0 * cfg.softmax_sigma ** 2))
    return q / q.sum()


def decode_softmax(p: Array, cfg: NetworkConfig) -> float:
    """Expectation of the bin centers under ``p``."""
    p = np.asarray(p, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-4:
        raise ValueError("probability vector is not normalized")
    if np.any(p < -1e-12):
        raise ValueError("probability vector has negative entries")
    return float(p @ bin_centers(cfg))


def encode_frame(values: Array, cfg: NetworkConfig, clamp: bool = True) -> Array:
    """Code an (output_dim,) joint vector as an (output_dim, n_soft) frame."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = cfg.value_range
    if clamp:
        values = np.clip(values, lo, hi)
    elif np.any(values < lo) or np.any(values > hi):
        raise ValueError("values outside configured range")
    c = bin_centers(cfg)
    q = np.exp(-((values[:, None] - c[None, :]) ** 2)
               / (2.0 * cfg.softmax_sigma ** 2))
    return q / q.sum(axis=1, keepdims=True)


def decode_frame(frame: Array, cfg: NetworkConfig) -> Array:
    frame = np.asarray(frame, dtype=np.float64)
    sums = frame.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-4):
        raise ValueError("frame rows are not normalized")
    return frame @ bin_centers(cfg)


# ---------------------------------------------------------------------------
# divergences


def kld_gauss_value(mu_q: Array, sig_q: Array, mu_p: Array, sig_p: Array) -> float:
    """KL( N(mu_q, sig_q) || N(mu_p, sig_p) ) for diagonal Gaussians."""
    mu_q, sig_q = np.asarray(mu_q, float), np.asarray(sig_q, float)
    mu_p, sig_p = np.asarray(mu_p, float), np.asarray(sig_p, float)
    if np.any(sig_q <= 0) or np.any(sig_p <= 0):
        raise ValueError("standard deviations must be positive")
    delta = mu_q - mu_p
    return float(np.sum(np.log(sig_p / sig_q)
                        + (sig_q ** 2 + delta ** 2) / (2.0 * sig_p ** 2) - 0.5))


def kld_gauss(tape: Tape, mu_q: Tensor, sig_q: Tensor,
              mu_p: Tensor, sig_p: Tensor) -> Tensor:
    """Tape op for the diagonal-Gaussian KL with analytic gradients."""
    mq, sq, mp, sp = mu_q.data, sig_q.data, mu_p.data, sig_p.data
    if min(sq.min(), sp.min()) <= 0:
        raise ValueError("standard deviations must be positive")
    delta = mq - mp
    sp2 = sp * sp
    out = np.asarray(np.sum(np.log(sp / sq) + (sq * sq + delta * delta) / (2.0 * sp2) - 0.5))

    def back(g):
        return (g * (delta / sp2),
                g * (sq / sp2 - 1.0 / sq),
                g * (-delta / sp2),
                g * (1.0 / sp - (sq * sq + delta * delta) / (sp2 * sp)))
    return tape.record(out, (mu_q, sig_q, mu_p, sig_p), back)


def prediction_error(target: Array, output: Array) -> float:
    """KL of the target frame from the predicted frame, summed over channels.

    Predicted entries are floored at 1e-12 before the log.
    """
    q = np.asarray(target, dtype=np.float64)
    p = np.asarray(output, dtype=np.float64)
    if q.shape != p.shape:
        raise ValueError(f"frame shape mismatch: {q.shape} vs {p.shape}")
    if np.any(np.abs(q.sum(axis=-1) - 1.0) > 1e-4) or \
       np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-4):
        raise ValueError("frames are not normalized")
    pf = np.maximum(p, 1e-12)
    terms = np.where(q > 0, q * (np.log(np.maximum(q, 1e-300)) - np.log(pf)), 0.0)
    return max(float(terms.sum()), 0.0)


def softmax_kl(tape: Tape, logits: Tensor, target: Array) -> tuple[Tensor, Array]:
    """Row-softmax of logits scored by KL(target || softmax(logits)).

    One tape op covering output coding and its score; returns the scalar
    loss tensor and the predicted probability rows (plain array, detached).
    Gradient w.r.t. the logits is ``P * rowsum(Q) - Q``.
    """
    q = np.asarray(target, dtype=np.float64)
    o = logits.data
    if q.shape != o.shape:
        raise ValueError(f"target shape {q.shape} does not match logits {o.shape}")
    shifted = o - o.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    log_p = shifted - lse
    p = np.exp(log_p)
    q_terms = np.where(q > 0, q * np.log(np.maximum(q, 1e-300)), 0.0)
    out = np.asarray(np.sum(q_terms - q * log_p))
    row_q = q.sum(axis=-1, keepdims=True)

    def back(g):
        return (g * (p * row_q - q),)
    return tape.record(out, (logits,), back), p


def softmax_kl_steps(tape: Tape, logits: Tensor, targets: Array) -> tuple[Tensor, Array]:
    """Per-step variant of `softmax_kl` for (steps, channels, bins) input.

    Returns a (steps,) tensor of per-step scores plus the probability array.
    """
    q = np.asarray(targets, dtype=np.float64)
    o = logits.data
    if q.shape != o.shape or o.ndim != 3:
        raise ValueError(f"expected matching 3-D shapes, got {o.shape} and {q.shape}")
    shifted = o - o.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    log_p = shifted - lse
    p = np.exp(log_p)
    q_terms = np.where(q > 0, q * np.log(np.maximum(q, 1e-300)), 0.0)
    out = np.sum(q_terms - q * log_p, axis=(1, 2))
    row_q = q.sum(axis=-1, keepdims=True)

    def back(g):
        return (g[:, None, None] * (p * row_q - q),)
    return tape.record(out, (logits,), back), p


def kld_gauss_steps(tape: Tape, mu_q: Tensor, sig_q: Tensor,
                    mu_p: Tensor, sig_p: Tensor) -> Tensor:
    """Row-batched Gaussian KL: (steps, num_z) stats to a (steps,) tensor."""
    mq, sq, mp, sp = mu_q.data, sig_q.data, mu_p.data, sig_p.data
    if min(sq.min(), sp.min()) <= 0:
        raise ValueError("standard deviations must be positive")
    delta = mq - mp
    sp2 = sp * sp
    out = np.sum(np.log(sp / sq) + (sq * sq + delta * delta) / (2.0 * sp2) - 0.5,
                 axis=1)

    def back(g):
        gc = g[:, None]
        return (gc * (delta / sp2),
                gc * (sq / sp2 - 1.0 / sq),
                gc * (-delta / sp2),
                gc * (1.0 / sp - (sq * sq + delta * delta) / (sp2 * sp)))
    return tape.record(out, (mu_q, sig_q, mu_p, sig_p), back)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class LayerParams:
    w_dd: Tensor
    w_zd: Tensor
    w_td: Tensor | None   # None on the top layer
    b_h: Tensor
    w_dmu: Tensor
    w_dsig: Tensor
    b_mu: Tensor
    b_sig: Tensor

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}/w_dd", self.w_dd), (f"{prefix}/w_zd", self.w_zd)]
        if self.w_td is not None:
            out.append((f"{prefix}/w_td", self.w_td))
        out += [(f"{prefix}/b_h", self.b_h), (f"{prefix}/w_dmu", self.w_dmu),
                (f"{prefix}/w_dsig", self.w_dsig), (f"{prefix}/b_mu", self.b_mu),
                (f"{prefix}/b_sig", self.b_sig)]
        return out


class NetworkParams:
    """All trainable weights and biases for a NetworkConfig."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng or np.random.default_rng(0)

        def init(rows: int, cols: int) -> Tensor:
            bound = 1.0 / np.sqrt(cols)
            return Tensor(rng.uniform(-bound, bound, size=(rows, cols)),
                          requires_grad=True)

        def bias(n: int) -> Tensor:
            return Tensor(np.zeros(n), requires_grad=True)

        self.layers: list[LayerParams] = []
        for i, lc in enumerate(cfg.layers):
            above = cfg.layers[i + 1].num_d if i + 1 < cfg.num_layers else None
            self.layers.append(LayerParams(
                w_dd=init(lc.num_d, lc.num_d),
                w_zd=init(lc.num_d, lc.num_z),
                w_td=init(lc.num_d, above) if above is not None else None,
                b_h=bias(lc.num_d),
                w_dmu=init(lc.num_z, lc.num_d),
                w_dsig=init(lc.num_z, lc.num_d),
                b_mu=bias(lc.num_z),
                b_sig=bias(lc.num_z),
            ))
        n_out = cfg.output_dim * cfg.n_soft
        self.w_out = init(n_out, cfg.layers[0].num_d)
        self.b_out = bias(n_out)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, lp in enumerate(self.layers):
            out += lp.named(f"layer{i}")
        out += [("out/w", self.w_out), ("out/b", self.b_out)]
        return out

    def trainable(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]


class SequencePosterior:
    """Per-step, per-layer free posterior parameters for one sequence.

    mu_q = tanh(a_mu) and sig_q = exp(a_sig), so the posterior is always a
    valid Gaussian. Initialized at zero: the unit Gaussian.
    """

    def __init__(self, cfg: NetworkConfig, length: int):
        self.cfg = cfg
        self.length = length
        self.a_mu = [[Tensor(np.zeros(lc.num_z), requires_grad=True)
                      for lc in cfg.layers] for _ in range(length)]
        self.a_sig = [[Tensor(np.zeros(lc.num_z), requires_grad=True)
                       for lc in cfg.layers] for _ in range(length)]

    def step(self, t: int) -> list[tuple[Tensor, Tensor]]:
        return list(zip(self.a_mu[t], self.a_sig[t]))

    def tensors(self) -> list[Tensor]:
        out = []
        for t in range(self.length):
            out.extend(self.a_mu[t])
            out.extend(self.a_sig[t])
        return out

    def layer_arrays(self) -> list[tuple[str, Array]]:
        """Stacked (length, num_z) arrays per layer, for persistence."""
        out = []
        for l in range(self.cfg.num_layers):
            out.append((f"layer{l}/a_mu",
                        np.stack([self.a_mu[t][l].data for t in range(self.length)])))
            out.append((f"layer{l}/a_sig",
                        np.stack([self.a_sig[t][l].data for t in range(self.length)])))
        return out

    def load_layer_arrays(self, arrays: dict[str, Array]) -> None:
        for l in range(self.cfg.num_layers):
            mu = arrays[f"layer{l}/a_mu"]
            sig = arrays[f"layer{l}/a_sig"]
            if mu.shape != (self.length, self.cfg.layers[l].num_z):
                raise ValueError("posterior array shape mismatch")
            for t in range(self.length):
                self.a_mu[t][l].data = mu[t].astype(np.float64).copy()
                self.a_sig[t][l].data = sig[t].astype(np.float64).copy()


# ---------------------------------------------------------------------------
# graph-building blocks


def posterior_stats(tape: Tape, a_mu: Tensor, a_sig: Tensor) -> tuple[Tensor, Tensor]:
    mu_q = tape.tanh(a_mu)
    sig_q = tape.exp_clip(a_sig, *SIGMA_EXP_CLAMP)
    return mu_q, sig_q


def prior_stats(tape: Tape, lp: LayerParams, d_prev: Tensor) -> tuple[Tensor, Tensor]:
    mu_p = tape.tanh(tape.affine(lp.w_dmu, d_prev, lp.b_mu))
    sig_p = tape.exp_clip(tape.affine(lp.w_dsig, d_prev, lp.b_sig), *SIGMA_EXP_CLAMP)
    return mu_p, sig_p


def unit_prior(num_z: int) -> tuple[Tensor, Tensor]:
    return Tensor(np.zeros(num_z)), Tensor(np.ones(num_z))


def sample_gaussian(tape: Tape, mu: Tensor, sigma: Tensor,
                    eps: Array | None) -> Tensor:
    """Reparameterized draw ``mu + sigma * eps``; ``eps=None`` propagates the mean."""
    if sigma.data.min() <= 0:
        raise ValueError("sigma must be positive")
    if eps is None:
        return mu
    return tape.mul_add(sigma, eps, mu)


def layer_step(tape: Tape, lp: LayerParams, tau: float,
               h_prev: Tensor | None, d_prev: Tensor | None,
               z: Tensor, d_top: Tensor | None) -> tuple[Tensor, Tensor]:
    """One leaky-integrator update; ``h_prev=None`` means zero initial state."""
    parts = [tape.matmul(lp.w_zd, z)]
    if d_prev is not None:
        parts.append(tape.matmul(lp.w_dd, d_prev))
    if d_top is not None:
        if lp.w_td is None:
            raise ValueError("top layer received a top-down input")
        parts.append(tape.matmul(lp.w_td, d_top))
    parts.append(lp.b_h)
    pre = tape.add_n(parts)
    if h_prev is None:
        h = tape.scale(pre, 1.0 / tau)
    else:
        h = tape.mix(h_prev, pre, 1.0 - 1.0 / tau, 1.0 / tau)
    return h, tape.tanh(h)


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class Rollout:
    """Tensors collected from one forward pass (outer lists run over time).

    Loss terms come in one of two layouts. The stepwise layout (``r``: per
    step then per layer, ``e``: per step) is built from the small per-step
    ops and is the readable reference. The vectorized layout (``r_steps``:
    one (steps,) tensor per layer, ``e_steps``: one (steps,) tensor) batches
    the prior, KL, and output scoring across time and is what training and
    online inference run; a test pins the two layouts together.
    """

    h: list[list[Tensor]] = field(default_factory=list)
    d: list[list[Tensor]] = field(default_factory=list)
    z: list[list[Tensor]] = field(default_factory=list)
    mu_p: list[list[Array]] = field(default_factory=list)
    sig_p: list[list[Array]] = field(default_factory=list)
    mu_q: list[list[Array]] = field(default_factory=list)
    sig_q: list[list[Array]] = field(default_factory=list)
    frames: list[Array] = field(default_factory=list)
    r: list[list[Tensor]] | None = None
    e: list[Tensor] | None = None
    r_steps: list[Tensor] | None = None
    e_steps: Tensor | None = None

    def last_state(self) -> tuple[list[Array], list[Array]]:
        return ([t.data.copy() for t in self.h[-1]],
                [t.data.copy() for t in self.d[-1]])

    def state_at(self, k: int) -> tuple[list[Array], list[Array]]:
        return ([t.data.copy() for t in self.h[k]],
                [t.data.copy() for t in self.d[k]])

    def r_values(self) -> Array:
        """(steps, layers) array of per-step per-layer KL values."""
        if self.r_steps is not None:
            return np.stack([r.data for r in self.r_steps], axis=1)
        return np.array([[float(r.data) for r in row] for row in self.r])

    def e_values(self) -> Array:
        """(steps,) array of per-step prediction-error values."""
        if self.e_steps is not None:
            return self.e_steps.data.copy()
        if self.e is None:
            raise ValueError("rollout was run without targets")
        return np.array([float(e.data) for e in self.e])


def rollout_posterior(tape: Tape, params: NetworkParams,
                      posterior_steps: list[list[tuple[Tensor, Tensor]]],
                      eps_steps: list[list[Array | None]] | None = None,
                      targets: list[Array] | None = None,
                      h0: list[Array] | None = None,
                      d0: list[Array] | None = None,
                      first_abs_t: int = 1,
                      vectorized: bool = True) -> Rollout:
    """Forward pass with z drawn from the approximate posterior.

    ``posterior_steps[k][l]`` holds the (a_mu, a_sig) leaf pair for window
    step k and layer l. ``eps_steps`` supplies the reparameterization noise
    (None entries propagate the mean). ``h0``/``d0`` carry state from before
    the first rolled step; ``first_abs_t`` is that step's absolute time index
    (1 means the sequence start: unit-Gaussian priors, zero state).

    KL terms score the approximate posterior against the conditional prior
    from the previous step's deterministic state (unit Gaussian on absolute
    step 1); output logits are scored against ``targets`` when given.
    """
    cfg = params.cfg
    n_layers = cfg.num_layers
    n_steps = len(posterior_steps)
    if first_abs_t > 1 and h0 is None:
        raise ValueError("continuation rollouts (first_abs_t > 1) need h0/d0")
    out = Rollout()
    h_prev: list[Tensor | None]
    d_prev: list[Tensor | None]
    if h0 is not None:
        h_prev = [Tensor(h0[l]) for l in range(n_layers)]
        d_prev = [Tensor(d0[l]) for l in range(n_layers)]
    else:
        h_prev = [None] * n_layers
        d_prev = [None] * n_layers
    d_before = list(d_prev)  # state entering step 0, for the batched priors
    mu_q_t: list[list[Tensor]] = [[] for _ in range(n_layers)]
    sig_q_t: list[list[Tensor]] = [[] for _ in range(n_layers)]
    if not vectorized:
        out.r = []
        out.e = [] if targets is not None else None

    for k, stats in enumerate(posterior_steps):
        abs_t = first_abs_t + k
        h_new: list[Tensor] = [None] * n_layers  # type: ignore[list-item]
        d_new: list[Tensor] = [None] * n_layers  # type: ignore[list-item]
        z_step: list[Tensor] = [None] * n_layers  # type: ignore[list-item]
        r_step: list[Tensor] = [None] * n_layers  # type: ignore[list-item]
        # top to bottom: lower layers see the same-step d of the layer above
        for l in range(n_layers - 1, -1, -1):
            lp = params.layers[l]
            a_mu, a_sig = stats[l]
            mu_q, sig_q = posterior_stats(tape, a_mu, a_sig)
            eps = eps_steps[k][l] if eps_steps is not None else None
            # sig_q comes from exp_clip and is positive by construction
            z = mu_q if eps is None else tape.mul_add(sig_q, eps, mu_q)
            d_top = d_new[l + 1] if l + 1 < n_layers else None
            h, d = layer_step(tape, lp, cfg.layers[l].tau,
                              h_prev[l], d_prev[l], z, d_top)
            if not math.isfinite(h.data.sum()):
                raise NonFiniteError(f"layer {l} state non-finite at step {abs_t}")
            h_new[l], d_new[l] = h, d
            z_step[l] = z
            mu_q_t[l].append(mu_q)
            sig_q_t[l].append(sig_q)
            if not vectorized:
                if abs_t == 1:
                    mu_p, sig_p = unit_prior(cfg.layers[l].num_z)
                else:
                    mu_p, sig_p = prior_stats(tape, lp, d_prev[l])
                r_step[l] = kld_gauss(tape, mu_q, sig_q, mu_p, sig_p)
        out.z.append(z_step)
        out.h.append(h_new)
        out.d.append(d_new)
        out.mu_q.append([mu_q_t[l][k].data for l in range(n_layers)])
        out.sig_q.append([sig_q_t[l][k].data for l in range(n_layers)])
        if not vectorized:
            out.r.append(r_step)
        h_prev, d_prev = h_new, d_new

    # priors and KL terms
    unit_first = first_abs_t == 1
    mu_p_l: list[Array] = [None] * n_layers  # type: ignore[list-item]
    sig_p_l: list[Array] = [None] * n_layers  # type: ignore[list-item]
    if vectorized:
        out.r_steps = []
        for l in range(n_layers):
            lp = params.layers[l]
            num_z = cfg.layers[l].num_z
            # d entering each conditioned step: covers steps
            # (1 if unit_first else 0) .. n_steps-1
            prev_rows = ([] if unit_first else [d_before[l]]) \
                + [out.d[k][l] for k in range(n_steps - 1)]
            mu_q_all = tape.stack_rows(mu_q_t[l])
            sig_q_all = tape.stack_rows(sig_q_t[l])
            if prev_rows:
                d_prev_all = tape.stack_rows(prev_rows)
                mu_p_cond = tape.tanh(tape.affine_rows(d_prev_all, lp.w_dmu, lp.b_mu))
                sig_p_cond = tape.exp_clip(
                    tape.affine_rows(d_prev_all, lp.w_dsig, lp.b_sig),
                    *SIGMA_EXP_CLAMP)
                if unit_first:
                    mu_p_all = tape.vstack2(Tensor(np.zeros((1, num_z))), mu_p_cond)
                    sig_p_all = tape.vstack2(Tensor(np.ones((1, num_z))), sig_p_cond)
                else:
                    mu_p_all, sig_p_all = mu_p_cond, sig_p_cond
            else:
                mu_p_all = Tensor(np.zeros((1, num_z)))
                sig_p_all = Tensor(np.ones((1, num_z)))
            out.r_steps.append(kld_gauss_steps(tape, mu_q_all, sig_q_all,
                                               mu_p_all, sig_p_all))
            mu_p_l[l] = mu_p_all.data
            sig_p_l[l] = sig_p_all.data
        out.mu_p = [[mu_p_l[l][k] for l in range(n_layers)] for k in range(n_steps)]
        out.sig_p = [[sig_p_l[l][k] for l in range(n_layers)] for k in range(n_steps)]

        d_bot = tape.stack_rows([out.d[k][0] for k in range(n_steps)])
        logits = tape.reshape(tape.affine_rows(d_bot, params.w_out, params.b_out),
                              (n_steps, cfg.output_dim, cfg.n_soft))
        if targets is not None:
            stacked = np.stack([np.asarray(t) for t in targets])
            out.e_steps, frames = softmax_kl_steps(tape, logits, stacked)
            out.frames = list(frames)
        else:
            out.frames = list(tape.softmax(logits).data)
    else:
        # stepwise output scoring; priors were handled inside the loop above
        out.mu_p, out.sig_p = [], []
        for k in range(n_steps):
            row_mu, row_sig = [], []
            for l in range(n_layers):
                if (first_abs_t + k) == 1:
                    row_mu.append(np.zeros(cfg.layers[l].num_z))
                    row_sig.append(np.ones(cfg.layers[l].num_z))
                else:
                    d_prev_l = out.d[k - 1][l] if k > 0 else d_before[l]
                    row_mu.append(np.tanh(params.layers[l].w_dmu.data @ d_prev_l.data
                                          + params.layers[l].b_mu.data))
                    row_sig.append(np.exp(np.clip(
                        params.layers[l].w_dsig.data @ d_prev_l.data
                        + params.layers[l].b_sig.data, *SIGMA_EXP_CLAMP)))
            out.mu_p.append(row_mu)
            out.sig_p.append(row_sig)
        for k in range(n_steps):
            logits = tape.reshape(
                tape.affine(params.w_out, out.d[k][0], params.b_out),
                (cfg.output_dim, cfg.n_soft))
            if targets is not None:
                e, frame = softmax_kl(tape, logits, targets[k])
                out.e.append(e)
                out.frames.append(frame)
            else:
                out.frames.append(tape.softmax(logits).data)
    return out


def free_energy(tape: Tape, e_terms: list[Tensor],
                r_steps: list[list[Tensor]], cfg: NetworkConfig,
                w: float, beta: float | None = None,
                first_abs_t: int = 1) -> Tensor:
    """Weighted evidence loss from stepwise per-step scalar terms.

    Per-layer KL terms are scaled by output_dim / num_z(layer) and by beta on
    the absolute first step of a sequence, w everywhere else. ``e_terms`` may
    be empty (prior rollouts score no data).
    """
    if beta is None:
        beta = cfg.beta
    if not r_steps:
        raise ValueError("free_energy needs at least one step")
    terms: list[Tensor] = list(e_terms)
    weights: list[float] = [1.0] * len(terms)
    for k, r_layers in enumerate(r_steps):
        weight = beta if first_abs_t + k == 1 else w
        for l, r in enumerate(r_layers):
            terms.append(r)
            weights.append(weight * cfg.output_dim / cfg.layers[l].num_z)
    return tape.weighted_sum(terms, weights)


def free_energy_of_rollout(tape: Tape, ro: Rollout, cfg: NetworkConfig,
                           w: float, beta: float | None = None,
                           first_abs_t: int = 1) -> Tensor:
    """Assemble the loss from a rollout in either layout."""
    if beta is None:
        beta = cfg.beta
    if ro.r_steps is not None:
        n_steps = ro.r_steps[0].data.shape[0]
        step_w = np.full(n_steps, w)
        if first_abs_t == 1:
            step_w[0] = beta
        terms = []
        for l, r in enumerate(ro.r_steps):
            terms.append(tape.dot_const(
                r, step_w * (cfg.output_dim / cfg.layers[l].num_z)))
        if ro.e_steps is not None:
            terms.append(tape.sum(ro.e_steps))
        return tape.add_n(terms)
    return free_energy(tape, ro.e or [], ro.r, cfg, w, beta, first_abs_t)


# ---------------------------------------------------------------------------
# closed-loop generation (no gradients, plain numpy)


@dataclass
class GenerationTrace:
    joints: Array          # (n_steps, output_dim) decoded outputs
    frames: Array          # (n_steps, output_dim, n_soft)
    d: list[Array]         # per layer: (n_steps, num_d)
    mu_p: list[Array]      # per layer: (n_steps, num_z)
    sig_p: list[Array]     # per layer: (n_steps, num_z)


def generate_prior(params: NetworkParams, n_steps: int,
                   rng: np.random.Generator,
                   h0: list[Array] | None = None,
                   d0: list[Array] | None = None,
                   first_abs_t: int = 1,
                   sample: bool = True) -> GenerationTrace:
    """Free-run the network with z drawn from the conditional prior.

    Uses no observations and never touches gradients, so it runs as straight
    numpy. A test pins this path against the tape rollout on shared noise.
    """
    cfg = params.cfg
    n_layers = cfg.num_layers
    if first_abs_t > 1 and h0 is None:
        raise ValueError("continuation generation (first_abs_t > 1) needs h0/d0")
    h = [h0[l].copy() if h0 is not None else None for l in range(n_layers)]
    d = [d0[l].copy() if d0 is not None else None for l in range(n_layers)]
    joints = np.zeros((n_steps, cfg.output_dim))
    frames = np.zeros((n_steps, cfg.output_dim, cfg.n_soft))
    d_hist = [np.zeros((n_steps, lc.num_d)) for lc in cfg.layers]
    mu_hist = [np.zeros((n_steps, lc.num_z)) for lc in cfg.layers]
    sig_hist = [np.zeros((n_steps, lc.num_z)) for lc in cfg.layers]
    centers = bin_centers(cfg)

    for k in range(n_steps):
        abs_t = first_abs_t + k
        d_new = [None] * n_layers
        h_new = [None] * n_layers
        for l in range(n_layers - 1, -1, -1):
            lp = params.layers[l]
            lc = cfg.layers[l]
            if abs_t == 1 or d[l] is None:
                mu_p = np.zeros(lc.num_z)
                sig_p = np.ones(lc.num_z)
            else:
                mu_p = np.tanh(lp.w_dmu.data @ d[l] + lp.b_mu.data)
                sig_p = np.exp(np.clip(lp.w_dsig.data @ d[l] + lp.b_sig.data,
                                       *SIGMA_EXP_CLAMP))
            z = mu_p + sig_p * rng.standard_normal(lc.num_z) if sample else mu_p
            pre = lp.w_zd.data @ z + lp.b_h.data
            if d[l] is not None:
                pre += lp.w_dd.data @ d[l]
            if l + 1 < n_layers:
                pre += lp.w_td.data @ d_new[l + 1]
            if h[l] is None:
                h_new[l] = pre / lc.tau
            else:
                h_new[l] = (1.0 - 1.0 / lc.tau) * h[l] + pre / lc.tau
            d_new[l] = np.tanh(h_new[l])
            d_hist[l][k] = d_new[l]
            mu_hist[l][k] = mu_p
            sig_hist[l][k] = sig_p
        o = (params.w_out.data @ d_new[0] + params.b_out.data).reshape(
            cfg.output_dim, cfg.n_soft)
        o = o - o.max(axis=1, keepdims=True)
        p = np.exp(o)
        p /= p.sum(axis=1, keepdims=True)
        frames[k] = p
        joints[k] = p @ centers
        h, d = h_new, d_new
    return GenerationTrace(joints=joints, frames=frames, d=d_hist,
                           mu_p=mu_hist, sig_p=sig_hist)
