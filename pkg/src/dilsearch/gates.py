"""Gated residual units and Gumbel-Softmax search over dilation rates.

Each searchable unit holds one residual branch per candidate dilation. A
forward pass mixes the branches with a relaxed one-hot sample

    z = softmax((log_alpha + g) / tau),    g_i ~ Gumbel(0, 1)

so the loss is differentiable in ``log_alpha`` at fixed noise. After the
search every unit keeps the candidate with the largest ``log_alpha`` and the
network is an ordinary residual network again.
"""

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import IGNORE_LABEL
from .errors import NumericError
from .network import RunMode, forward_segmentation, init_params
from .tensor import Adam, Tape, Tensor, backward, gumbel_softmax, softmax_cross_entropy
from .train import TrainConfig, poly_lr, sample_batch

DEFAULT_CANDIDATES = (1, 2, 4, 8, 16)
UNIFORM_CLAMP = 1e-12


@dataclass(frozen=True)
class AnnealSchedule:
    """``tau(step) = max(tau_min, tau0 * exp(-rate * step))``."""

    tau0: float = 5.0
    tau_min: float = 0.1
    rate: float = 0.0

    @classmethod
    def over(cls, total_steps, tau0=5.0, tau_min=0.1):
        """Schedule that reaches ``tau_min`` exactly at ``total_steps``."""
        if tau0 <= 0 or tau_min <= 0:
            raise ValueError("tau0 and tau_min must be > 0")
        rate = math.log(tau0 / tau_min) / total_steps if total_steps > 0 else 0.0
        return cls(tau0, tau_min, max(rate, 0.0))


def anneal_temperature(step, schedule):
    if schedule.tau0 <= 0 or schedule.tau_min <= 0:
        raise ValueError(f"temperatures must be > 0, got tau0={schedule.tau0}, tau_min={schedule.tau_min}")
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return max(schedule.tau_min, schedule.tau0 * math.exp(-schedule.rate * step))


@dataclass
class GateState:
    log_alpha: Tensor
    tau: float
    candidates: tuple
    rng_seed: int = 0

    def validate(self):
        c = list(self.candidates)
        if len(c) != self.log_alpha.shape[0] or self.log_alpha.ndim != 1:
            raise ValueError(f"{len(c)} candidates but log_alpha of shape {self.log_alpha.shape}")
        if not c or c != sorted(set(c)) or c[0] < 1:
            raise ValueError(f"candidates must be strictly increasing and >= 1, got {self.candidates}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        return self

    def probabilities(self):
        a = self.log_alpha.data.astype(np.float64)
        e = np.exp(a - a.max())
        return e / e.sum()


def gumbel_sample(shape, rng, uniform=None):
    """Standard Gumbel draws ``-log(-log(U))`` with U clamped away from 0 and 1.

    ``uniform`` injects U directly (for tests).
    """
    u = rng.random(shape) if uniform is None else np.asarray(uniform, dtype=np.float64)
    u = np.clip(u, UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(state, rng, noise=None):
    """Relaxed one-hot sample; differentiable w.r.t. ``state.log_alpha``."""
    state.validate()
    if noise is None:
        noise = gumbel_sample(state.log_alpha.shape, rng)
    return gumbel_softmax(state.log_alpha, noise, state.tau)


def make_searchable(spec, candidates=DEFAULT_CANDIDATES, last=4):
    """Turn the last ``last`` residual units into gated units."""
    names = [n for n, _ in spec.units()][-last:]
    updates = {n: replace(spec.unit(n), kind="gated", candidates=tuple(candidates), first_dilation=None) for n in names}
    return spec.with_units(updates).validate()


@dataclass
class DilationAssignment:
    dilations: dict

    def to_dict(self):
        return dict(self.dilations)


def decode_gates(states):
    """``{unit: GateState}`` -> chosen dilation per unit (argmax, ties -> smallest)."""
    out = {}
    for name, st in states.items():
        a = st.log_alpha.data
        best = int(np.flatnonzero(a == a.max())[0])  # candidates ascend, so first max is the smallest
        out[name] = int(st.candidates[best])
    return DilationAssignment(out)


def apply_assignment(spec, assignment):
    """Plain-unit spec with the decoded dilations (both 3x3 convs of the unit)."""
    updates = {}
    for name, d in assignment.dilations.items():
        u = spec.unit(name)
        updates[name] = replace(u, kind="plain", candidates=(), dilation=int(d), first_dilation=None)
    return spec.with_units(updates).validate()


@dataclass
class SearchConfig:
    steps: int = 300
    batch_size: int = 8
    crop_size: int = 0  # 0: use full images
    base_lr: float = 1e-3
    lr_power: float = 0.9
    tau0: float = 5.0
    tau_min: float = 0.1
    candidates: tuple = DEFAULT_CANDIDATES
    gated_units: int = 4
    seed: int = 0
    ignore_label: int = IGNORE_LABEL
    bn_momentum: float = 0.1
    log_every: int = 0

    def train_config(self, crop_size):
        return TrainConfig(
            base_lr=self.base_lr,
            lr_power=self.lr_power,
            batch_size=self.batch_size,
            crop_size=crop_size,
            total_steps=self.steps,
            seed=self.seed,
            ignore_label=self.ignore_label,
            bn_momentum=self.bn_momentum,
        )


@dataclass
class SearchResult:
    assignment: DilationAssignment
    trace: list  # rows: (step, loss, tau, {unit: probabilities})
    spec: object  # the gated spec that was trained
    params: object
    states: dict = field(default_factory=dict)


def run_search(base, dataset, config, dtype=np.float32):
    """Jointly train branch weights and gate logits, then decode."""
    if not base.converted:
        raise ValueError("search expects a dilated (converted) base network")
    spec = make_searchable(base, config.candidates, config.gated_units)
    tcfg = config.train_config(config.crop_size).validate()
    data_rng = np.random.default_rng(config.seed)
    noise_rng = np.random.default_rng([config.seed, 0x6A7E])
    params = init_params(spec, config.seed, dtype)
    states = {
        name: GateState(params[f"{name}.gate.log_alpha"], config.tau0, tuple(config.candidates), config.seed)
        for name in spec.gated_units()
    }
    schedule = AnnealSchedule.over(config.steps, config.tau0, config.tau_min)
    opt = Adam(params.trainable(), tcfg.betas, tcfg.adam_eps)
    mode = RunMode(training=True, momentum=config.bn_momentum)
    trace = []
    for step in range(config.steps):
        imgs, masks = sample_batch(dataset, tcfg, data_rng)
        tau = anneal_temperature(step, schedule)
        lr = poly_lr(step, tcfg)
        opt.zero_grad()
        with Tape():
            gates = {}
            for name, st in states.items():
                st.tau = tau
                gates[name] = gumbel_softmax_sample(st, noise_rng)
            logits = forward_segmentation(spec, params, Tensor(imgs.astype(dtype)), mode, gates)
            loss = softmax_cross_entropy(logits, masks, config.ignore_label)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"search diverged: non-finite loss at step {step}")
        backward(loss)
        opt.step(lr)
        trace.append((step, value, tau, {n: st.probabilities() for n, st in states.items()}))
        if config.log_every and step % config.log_every == 0:
            probs = " ".join(f"{n}:{st.candidates[int(np.argmax(st.log_alpha.data))]}" for n, st in states.items())
            print(f"step {step:5d} tau {tau:.3f} loss {value:.4f} {probs}", flush=True)
    return SearchResult(decode_gates(states), trace, spec, params, states)


def write_search_log(result, path):
    """CSV: step, loss, tau, then one softmax(log_alpha) column per unit and candidate."""
    units = list(result.states)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        header = ["step", "loss", "tau"]
        for u in units:
            header += [f"{u}.d{d}" for d in result.states[u].candidates]
        wr.writerow(header)
        for step, loss, tau, probs in result.trace:
            row = [step, repr(loss), repr(tau)]
            for u in units:
                row += [repr(float(p)) for p in probs[u]]
            wr.writerow(row)
