"""Dream environments: episodic simulators whose transition function is the
trained dynamics model under a configurable mask-randomization policy.

Policies: Off uses the all-ones mask throughout; Episode samples one MaskSet
per episode; Step samples a fresh MaskSet every step, so every step runs a
different masked model. Baseline variants are selected through the config:
MC-dropout (average mixture parameters, reward, termination, and hidden state
over several independently masked passes, then sample once), Noisy (mask-free
stepping plus Gaussian perturbation of the latent), and explicit ensembles
(the active member is resampled per step or per episode, hidden state carried
across members unchanged).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .lstm import MaskSet, all_ones_mask_set, sample_mask_set
from .numerics import sigmoid
from .world_model import WorldModelParams, heads_raw, sample_transition_raw

__all__ = [
    "RandomizationPolicy",
    "ZInit",
    "DreamConfig",
    "DreamEnvState",
    "DreamEnv",
    "mask_hash",
    "write_trace",
    "rollout_batch",
]


class RandomizationPolicy(str, Enum):
    OFF = "off"
    EPISODE = "episode"
    STEP = "step"


class ZInit(str, Enum):
    STANDARD_NORMAL = "standard_normal"
    DATASET_STARTS = "dataset_starts"


class DreamDoneError(RuntimeError):
    """Raised when a finished dream episode is stepped without a reset."""


@dataclass
class DreamConfig:
    """Dream-environment behavior. ``ensemble`` holds the dynamics model(s);
    size 1 means a single model. The MC-dropout, noise, and ensemble variants
    are mutually exclusive so each baseline is tested in isolation."""

    ensemble: list
    p_infer: float = 0.1
    policy: RandomizationPolicy = RandomizationPolicy.STEP
    mc_samples: int = 0
    z_init: ZInit = ZInit.DATASET_STARTS
    max_ep_len: int = 1000
    noise_sigma: float = 0.0
    rescale: str = "infer"  # inverted-dropout rescaling convention at inference

    def __post_init__(self):
        self.policy = RandomizationPolicy(self.policy)
        self.z_init = ZInit(self.z_init)
        if not self.ensemble:
            raise ValueError("ensemble must contain at least one model")
        first = self.ensemble[0]
        for m in self.ensemble[1:]:
            if (m.n, m.k, m.hidden_dim, m.action_dim) != (first.n, first.k, first.hidden_dim, first.action_dim):
                raise ValueError("ensemble members must share dimensions")
        if not 0.0 <= self.p_infer < 1.0:
            raise ValueError("p_infer must be in [0, 1)")
        if self.mc_samples < 0 or self.noise_sigma < 0:
            raise ValueError("mc_samples and noise_sigma must be non-negative")
        if self.max_ep_len < 1:
            raise ValueError("max_ep_len must be positive")
        variants = (self.mc_samples > 0) + (self.noise_sigma > 0.0) + (len(self.ensemble) > 1)
        if variants > 1:
            raise ValueError("mc_samples, noise_sigma, and ensembles are mutually exclusive")
        if self.noise_sigma > 0.0 and (self.p_infer != 0.0 or self.policy != RandomizationPolicy.OFF):
            raise ValueError("the noisy variant steps with the all-ones mask (p_infer=0, policy=off)")
        if len(self.ensemble) > 1:
            if self.p_infer != 0.0:
                raise ValueError("explicit ensembles run without dropout (p_infer=0)")
            if self.policy == RandomizationPolicy.OFF:
                raise ValueError("ensembles need a member-resampling cadence (episode or step)")
        if self.rescale not in ("infer", "train", "none"):
            raise ValueError("rescale must be one of 'infer', 'train', 'none'")

    @property
    def model(self) -> WorldModelParams:
        return self.ensemble[0]

    def scale_rate(self) -> float | None:
        """Rate used for inverted-dropout rescaling of inference masks."""
        if self.rescale == "infer":
            return None  # rescale by p_infer itself
        if self.rescale == "train":
            return float(self.model.meta.get("p_train", 0.0))
        return 0.0


@dataclass
class DreamEnvState:
    h: np.ndarray
    c: np.ndarray
    z_hat: np.ndarray
    mask: MaskSet | None
    model_idx: int
    t: int
    done: bool
    truncated: bool


def mask_hash(mask: MaskSet) -> str:
    return hashlib.sha1(mask.bytes_key()).hexdigest()[:12]


def write_trace(records, path) -> None:
    """Line-delimited JSON rollout trace (one record per step)."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


class DreamEnv:
    """Single dream episode driver built around the trained dynamics model.

    The transition function is pure in (params, state, action, rng); the
    instance only carries episode state, the mask-sampling counter, and the
    optional step trace.
    """

    def __init__(self, cfg: DreamConfig, starts: np.ndarray | None = None):
        self.cfg = cfg
        self.starts = None if starts is None else np.asarray(starts, dtype=np.float64)
        if self.starts is not None and (self.starts.ndim != 2 or self.starts.shape[1] != cfg.model.n):
            raise ValueError("starts must have shape (count, n)")
        self.state: DreamEnvState | None = None
        self.masks_sampled = 0
        self.trace: list | None = None
        self._all_ones = all_ones_mask_set(cfg.model.input_dim, cfg.model.hidden_dim)

    @property
    def n(self) -> int:
        return self.cfg.model.n

    @property
    def action_dim(self) -> int:
        return self.cfg.model.action_dim

    def start_trace(self):
        self.trace = []
        return self.trace

    def _sample_mask(self, rng) -> MaskSet:
        model = self.cfg.model
        self.masks_sampled += 1
        return sample_mask_set(
            self.cfg.p_infer,
            model.input_dim,
            model.hidden_dim,
            action_dims=model.action_input_dims,
            rng=rng,
            scale_rate=self.cfg.scale_rate(),
        )

    def reset(self, rng):
        """Start an episode: zero hidden/cell state, draw the initial latent,
        and (under Episode policy) sample this episode's mask now."""
        cfg = self.cfg
        model = cfg.model
        if cfg.z_init == ZInit.STANDARD_NORMAL:
            z = rng.standard_normal(model.n)
        else:
            if self.starts is None or len(self.starts) == 0:
                raise ValueError("dataset_starts requires a non-empty start pool")
            z = self.starts[int(rng.integers(len(self.starts)))].copy()
        mask = None
        if cfg.policy == RandomizationPolicy.EPISODE and cfg.mc_samples == 0:
            mask = self._sample_mask(rng)
        elif cfg.policy == RandomizationPolicy.OFF:
            mask = self._all_ones
        model_idx = int(rng.integers(len(cfg.ensemble))) if len(cfg.ensemble) > 1 else 0
        self.state = DreamEnvState(
            h=np.zeros(model.hidden_dim),
            c=np.zeros(model.hidden_dim),
            z_hat=z,
            mask=mask,
            model_idx=model_idx,
            t=0,
            done=False,
            truncated=False,
        )
        if self.trace is not None:
            self.trace.clear()
        return z.copy(), self.state.h.copy()

    def _forward_once(self, params, x, mask):
        """One masked LSTM step plus heads; returns (h, c, pi, mu, sigma, r, d_hat)."""
        s = self.state
        xm = x[None, :] * mask.scaled_x
        hm = s.h[None, :] * mask.scaled_h
        pre = (
            np.einsum("gdr,gr->gd", params.lstm.w_x, xm)
            + np.einsum("gde,ge->gd", params.lstm.w_h, hm)
            + params.lstm.b
        )
        c = sigmoid(pre[0]) * np.tanh(pre[2]) + sigmoid(pre[1]) * s.c
        h = sigmoid(pre[3]) * np.tanh(c)
        _, pi, mu, sigma, r_hat, done_logit = heads_raw(params, h)
        return h, c, pi, mu, sigma, float(r_hat), float(sigmoid(done_logit))

    def step(self, action, rng):
        """Advance the dream one step; dispatches to the MC-dropout or noisy
        variant when the config selects one. Returns (z_hat', r_hat, done, h')."""
        cfg = self.cfg
        s = self.state
        if s is None or s.done:
            raise DreamDoneError("dream episode is done; call reset")
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape != (self.action_dim,):
            raise ValueError(f"action has shape {action.shape}, expected ({self.action_dim},)")

        if cfg.mc_samples > 0:
            h, c, pi, mu, sigma, r_hat, d_hat = self._mc_forward(action, rng)
        else:
            if cfg.policy == RandomizationPolicy.STEP:
                s.mask = self._sample_mask(rng)
            if len(cfg.ensemble) > 1 and cfg.policy == RandomizationPolicy.STEP:
                s.model_idx = int(rng.integers(len(cfg.ensemble)))
            params = cfg.ensemble[s.model_idx]
            x = np.concatenate([s.z_hat, action])
            h, c, pi, mu, sigma, r_hat, d_hat = self._forward_once(params, x, s.mask)

        z_next, _, done_sampled = sample_transition_raw(pi, mu, sigma, d_hat, rng)
        if cfg.noise_sigma > 0.0:
            z_next = z_next + cfg.noise_sigma * rng.standard_normal(self.n)

        s.h, s.c, s.z_hat = h, c, z_next
        s.t += 1
        truncated = not done_sampled and s.t >= cfg.max_ep_len
        s.done = bool(done_sampled or truncated)
        s.truncated = bool(truncated)
        if self.trace is not None:
            self.trace.append(
                {
                    "t": s.t,
                    "z_hat": [float(v) for v in z_next],
                    "action": [float(v) for v in action],
                    "r_hat": r_hat,
                    "d_hat": d_hat,
                    "mask": mask_hash(s.mask) if s.mask is not None else None,
                    "done": s.done,
                    "truncated": s.truncated,
                }
            )
        return z_next.copy(), r_hat, s.done, s.h.copy()

    def mc_step(self, action, rng):
        """Monte-Carlo dropout step (requires mc_samples >= 1 in the config)."""
        if self.cfg.mc_samples < 1:
            raise ValueError("mc_step requires mc_samples >= 1")
        return self.step(action, rng)

    def _mc_forward(self, action, rng):
        """Average mixture parameters, reward, termination, and the hidden and
        cell state over mc_samples independently masked passes.

        At p_infer == 0 every pass is identical, so a single pass is taken and
        the result is bit-for-bit the plain step.
        """
        cfg = self.cfg
        s = self.state
        params = cfg.ensemble[s.model_idx]
        x = np.concatenate([s.z_hat, action])
        passes = 1 if cfg.p_infer == 0.0 else cfg.mc_samples
        acc = None
        for _ in range(passes):
            mask = self._sample_mask(rng) if cfg.p_infer > 0.0 else self._all_ones
            out = self._forward_once(params, x, mask)
            if acc is None:
                acc = list(out)
            else:
                acc = [a + b for a, b in zip(acc, out)]
        if passes > 1:
            acc = [a / passes for a in acc]
        h, c, pi, mu, sigma, r_hat, d_hat = acc
        return h, c, pi, mu, sigma, float(r_hat), float(d_hat)


def rollout_batch(
    cfg: DreamConfig,
    controller_w: np.ndarray,
    controller_b: np.ndarray,
    lane_rngs,
    starts: np.ndarray | None = None,
    include_c: bool = False,
):
    """Roll one dream episode per lane in lockstep.

    controller_w: (L, a_dim, f_dim) and controller_b: (L, a_dim) give each
    lane its own linear policy over features [z, h] (or [z, h, c]). Each
    lane's randomness comes only from its own generator, so results are
    independent of lane order and match per-lane DreamEnv rollouts up to
    matmul-batching rounding.

    Returns a dict with per-lane returns, steps, truncation flags, and the
    number of MaskSets sampled.
    """
    model = cfg.model
    n, d, r = model.n, model.hidden_dim, model.input_dim
    a_dim = model.action_dim
    L = len(lane_rngs)
    n_models = len(cfg.ensemble)
    scale_rate = cfg.scale_rate()

    H = np.zeros((L, d))
    C = np.zeros((L, d))
    Z = np.empty((L, n))
    model_idx = np.zeros(L, dtype=np.int64)
    SX = np.ones((L, 4, r))
    SH = np.ones((L, 4, d))
    done = np.zeros(L, dtype=bool)
    truncated = np.zeros(L, dtype=bool)
    returns = np.zeros(L)
    steps = np.zeros(L, dtype=np.int64)
    masks_sampled = 0

    def sample_lane_mask(lane, rng):
        nonlocal masks_sampled
        masks_sampled += 1
        m = sample_mask_set(
            cfg.p_infer, r, d, action_dims=model.action_input_dims, rng=rng, scale_rate=scale_rate
        )
        SX[lane] = m.scaled_x
        SH[lane] = m.scaled_h

    for lane, rng in enumerate(lane_rngs):
        if cfg.z_init == ZInit.STANDARD_NORMAL:
            Z[lane] = rng.standard_normal(n)
        else:
            if starts is None or len(starts) == 0:
                raise ValueError("dataset_starts requires a non-empty start pool")
            Z[lane] = starts[int(rng.integers(len(starts)))]
        if cfg.policy == RandomizationPolicy.EPISODE and cfg.mc_samples == 0:
            sample_lane_mask(lane, rng)
        if n_models > 1:
            model_idx[lane] = rng.integers(n_models)

    w_x = {m: cfg.ensemble[m].lstm.w_x for m in range(n_models)}
    w_h = {m: cfg.ensemble[m].lstm.w_h for m in range(n_models)}
    b = {m: cfg.ensemble[m].lstm.b for m in range(n_models)}

    def masked_lstm(idx, X, Hs, Cs, sx, sh):
        """Masked LSTM step for the lane subset ``idx`` grouped by model."""
        h_new = np.empty((len(idx), d))
        c_new = np.empty((len(idx), d))
        groups = [(0, np.arange(len(idx)))] if n_models == 1 else [
            (m, np.flatnonzero(model_idx[idx] == m)) for m in range(n_models)
        ]
        for m, rows in groups:
            if len(rows) == 0:
                continue
            pre = np.empty((4, len(rows), d))
            for g in range(4):
                xm = X[rows] * sx[rows, g, :]
                hm = Hs[rows] * sh[rows, g, :]
                pre[g] = xm @ w_x[m][g].T + hm @ w_h[m][g].T + b[m][g]
            cg = sigmoid(pre[0]) * np.tanh(pre[2]) + sigmoid(pre[1]) * Cs[rows]
            c_new[rows] = cg
            h_new[rows] = sigmoid(pre[3]) * np.tanh(cg)
        return h_new, c_new

    for t in range(cfg.max_ep_len):
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        feats = [Z[active], H[active]]
        if include_c:
            feats.append(C[active])
        F = np.concatenate(feats, axis=1)
        A = np.tanh(np.einsum("laf,lf->la", controller_w[active], F) + controller_b[active])
        X = np.concatenate([Z[active], A], axis=1)

        if cfg.mc_samples > 0:
            K = 1 if cfg.p_infer == 0.0 else cfg.mc_samples
            if K > 1:
                sx_mc = np.empty((active.size, K, 4, r))
                sh_mc = np.empty((active.size, K, 4, d))
                for j, lane in enumerate(active):
                    for kk in range(K):
                        masks_sampled += 1
                        m = sample_mask_set(
                            cfg.p_infer, r, d,
                            action_dims=model.action_input_dims,
                            rng=lane_rngs[lane],
                            scale_rate=scale_rate,
                        )
                        sx_mc[j, kk] = m.scaled_x
                        sh_mc[j, kk] = m.scaled_h
                Xr = np.repeat(X, K, axis=0)
                Hr = np.repeat(H[active], K, axis=0)
                Cr = np.repeat(C[active], K, axis=0)
                idx_r = np.repeat(active, K)
                h_all, c_all = masked_lstm(idx_r, Xr, Hr, Cr, sx_mc.reshape(-1, 4, r), sh_mc.reshape(-1, 4, d))
                _, pi_a, mu_a, sg_a, r_a, u_a = heads_raw(model, h_all)
                shape = (active.size, K)
                h_new = h_all.reshape(shape + (d,)).mean(axis=1)
                c_new = c_all.reshape(shape + (d,)).mean(axis=1)
                pi = pi_a.reshape(shape + pi_a.shape[1:]).mean(axis=1)
                mu = mu_a.reshape(shape + mu_a.shape[1:]).mean(axis=1)
                sigma = sg_a.reshape(shape + sg_a.shape[1:]).mean(axis=1)
                r_hat = r_a.reshape(shape).mean(axis=1)
                d_hat = sigmoid(u_a).reshape(shape).mean(axis=1)
            else:
                h_new, c_new = masked_lstm(active, X, H[active], C[active], SX[active], SH[active])
                _, pi, mu, sigma, r_hat, u = heads_raw(model, h_new)
                d_hat = sigmoid(u)
        else:
            if cfg.policy == RandomizationPolicy.STEP:
                for lane in active:
                    sample_lane_mask(lane, lane_rngs[lane])
                if n_models > 1:
                    for lane in active:
                        model_idx[lane] = lane_rngs[lane].integers(n_models)
            h_new, c_new = masked_lstm(active, X, H[active], C[active], SX[active], SH[active])
            if n_models == 1:
                _, pi, mu, sigma, r_hat, u = heads_raw(model, h_new)
            else:
                pi = np.empty((active.size, n, model.k))
                mu = np.empty_like(pi)
                sigma = np.empty_like(pi)
                r_hat = np.empty(active.size)
                u = np.empty(active.size)
                for m in range(n_models):
                    rows = np.flatnonzero(model_idx[active] == m)
                    if len(rows) == 0:
                        continue
                    _, pi[rows], mu[rows], sigma[rows], r_hat[rows], u[rows] = heads_raw(
                        cfg.ensemble[m], h_new[rows]
                    )
            d_hat = sigmoid(u)

        for j, lane in enumerate(active):
            rng = lane_rngs[lane]
            z_next, _, done_sample = sample_transition_raw(pi[j], mu[j], sigma[j], float(d_hat[j]), rng)
            if cfg.noise_sigma > 0.0:
                z_next = z_next + cfg.noise_sigma * rng.standard_normal(n)
            Z[lane] = z_next
            returns[lane] += r_hat[j]
            steps[lane] += 1
            if done_sample:
                done[lane] = True
            elif t == cfg.max_ep_len - 1:
                done[lane] = True
                truncated[lane] = True
        H[active] = h_new
        C[active] = c_new

    return {
        "returns": returns,
        "steps": steps,
        "truncated": truncated,
        "masks_sampled": int(masks_sampled),
    }
