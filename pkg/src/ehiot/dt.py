"""Single-layer decision transformer for duty cycling, trained offline.

A token packs the per-device state features, the action vector and the scalar
reward of one TTI.  The query comes from the current state (action and reward
slots zeroed); keys and values come from the last ``Z`` tokens::

    psi = softmax((Phi W1) (x W2))       # Z attention weights
    scores = sigmoid((psi^T Phi W3) Wo + bo)

Training is behaviour cloning on the best episodes of an offline dataset, with
a hand-derived gradient of the per-device binary cross-entropy.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .geometry import expected_min_information
from .model import DeviceState, SimConfig
from .policy import DutyCycle, Policy
from .rl import estimated_sensing, neighbour_counts, reward_duty

N_STATE_FEATURES = 4  # battery fraction, previous action, sensing power, density


class DtError(RuntimeError):
    pass


def attention_weights(query: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Softmax of ``keys @ query`` (max-subtracted).  Works on a leading batch axis."""
    logits = np.einsum("...zd,...d->...z", np.asarray(keys, dtype=float), np.asarray(query, dtype=float))
    return softmax(logits)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def token_dim(n: int) -> int:
    return (N_STATE_FEATURES + 1) * n + 1


@dataclass
class DtModel:
    w1: np.ndarray  # key, D x Dh
    w2: np.ndarray  # query
    w3: np.ndarray  # value
    wo: np.ndarray  # Dh x N
    bo: np.ndarray  # N
    z: int = 8
    theta: float = 0.5
    loss_curve: list = field(default_factory=list)

    def __post_init__(self):
        if self.z < 1:
            raise ValueError("context length must be >= 1")
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")
        d, dh = self.w1.shape
        if self.w2.shape != (d, dh) or self.w3.shape != (d, dh) or self.wo.shape[0] != dh:
            raise ValueError("inconsistent parameter shapes")

    @property
    def d(self) -> int:
        return self.w1.shape[0]

    @property
    def d_h(self) -> int:
        return self.w1.shape[1]

    @property
    def n(self) -> int:
        return self.wo.shape[1]

    @classmethod
    def zeros(cls, d: int, d_h: int, n: int, z: int = 8, theta: float = 0.5) -> "DtModel":
        return cls(np.zeros((d, d_h)), np.zeros((d, d_h)), np.zeros((d, d_h)), np.zeros((d_h, n)), np.zeros(n), z, theta)

    @classmethod
    def random(cls, d: int, d_h: int, n: int, rng: np.random.Generator, z: int = 8, theta: float = 0.5,
               scale: float = 1.0) -> "DtModel":
        s_in, s_out = scale / math.sqrt(d), scale / math.sqrt(d_h)
        return cls(rng.normal(0, s_in, (d, d_h)), rng.normal(0, s_in, (d, d_h)), rng.normal(0, s_in, (d, d_h)),
                   rng.normal(0, s_out, (d_h, n)), np.zeros(n), z, theta)

    def params(self) -> list:
        return [self.w1, self.w2, self.w3, self.wo, self.bo]

    def copy(self) -> "DtModel":
        return DtModel(*(p.copy() for p in self.params()), self.z, self.theta, list(self.loss_curve))


def pad_context(tokens, z: int, d: int) -> np.ndarray:
    """Last ``z`` tokens, left-padded with zero tokens."""
    tokens = np.asarray(tokens, dtype=float).reshape(-1, d)[-z:] if len(tokens) else np.zeros((0, d))
    if len(tokens) < z:
        tokens = np.vstack([np.zeros((z - len(tokens), d)), tokens])
    return tokens


def dt_forward(model: DtModel, context: np.ndarray, current: np.ndarray, return_weights: bool = False):
    """Per-device scores in (0, 1) for one (or a batch of) context window(s).

    ``context`` is ``(Z', D)`` or ``(B, Z', D)``; ``current`` is ``(D,)`` or
    ``(B, D)``.  Any ``Z'`` >= 1 is accepted so that duplicated contexts can be
    compared; the policy always passes exactly ``model.z`` tokens.
    """
    context = np.asarray(context, dtype=float)
    current = np.asarray(current, dtype=float)
    if context.shape[-1] != model.d or current.shape[-1] != model.d:
        raise ValueError(f"token dimension must be {model.d}")
    keys = context @ model.w1
    q = current @ model.w2
    psi = attention_weights(q, keys)
    h = np.einsum("...z,...zd->...d", psi, context @ model.w3)
    scores = expit(h @ model.wo + model.bo)
    return (scores, psi) if return_weights else scores


def _windows(lengths, z: int):
    """Row indices into a stacked, per-episode left-padded token array."""
    idx, offset = [], 0
    for h in lengths:
        base = offset + np.arange(h)[:, None] + np.arange(z)[None, :]
        idx.append(base)
        offset += h + z
    return np.vstack(idx) if idx else np.zeros((0, z), dtype=int)


def loss_and_grad(model: DtModel, tokens: np.ndarray, idx: np.ndarray, current: np.ndarray, targets: np.ndarray):
    """Mean per-device binary cross-entropy and its gradient.

    ``tokens`` holds every context token once; ``idx`` (B x Z) selects each
    sample's window from it.  ``current`` is (B x D) and ``targets`` (B x N).
    Returns ``(loss, [dW1, dW2, dW3, dWo, dbo])``.
    """
    w1, w2, w3, wo, bo = model.params()
    b, n = targets.shape
    kp = tokens @ w1
    vp = tokens @ w3
    kw, vw = kp[idx], vp[idx]  # B x Z x Dh
    q = current @ w2
    psi = softmax(np.einsum("bzd,bd->bz", kw, q))
    h = np.einsum("bz,bzd->bd", psi, vw)
    logits = h @ wo + bo
    # log(1 + e^x) - y x, evaluated stably
    loss = float(np.mean(np.logaddexp(0.0, logits) - targets * logits))

    dlog = (expit(logits) - targets) / (b * n)
    dwo = h.T @ dlog
    dbo = dlog.sum(axis=0)
    dh = dlog @ wo.T
    dvw = psi[..., None] * dh[:, None, :]
    dpsi = np.einsum("bzd,bd->bz", vw, dh)
    dl = psi * (dpsi - (psi * dpsi).sum(axis=1, keepdims=True))
    dkw = dl[..., None] * q[:, None, :]
    dq = np.einsum("bz,bzd->bd", dl, kw)
    dk = np.zeros_like(kp)
    dv = np.zeros_like(vp)
    np.add.at(dk, idx, dkw)
    np.add.at(dv, idx, dvw)
    return loss, [tokens.T @ dk, current.T @ dq, tokens.T @ dv, dwo, dbo]


@dataclass
class Episode:
    states: np.ndarray  # H x 4N
    actions: np.ndarray  # H x N
    rewards: np.ndarray  # H
    source: str = ""

    @property
    def ret(self) -> float:
        return float(self.rewards.sum())

    def tokens(self) -> np.ndarray:
        return np.hstack([self.states, self.actions, self.rewards[:, None]])


def state_token(states: np.ndarray, n: int) -> np.ndarray:
    """Query token: state features with zeroed action and reward slots."""
    states = np.atleast_2d(states)
    return np.hstack([states, np.zeros((len(states), n + 1))])


@dataclass(frozen=True)
class DtConfig:
    z: int = 8
    d_h: int = 32
    theta: float = 0.5
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 0  # 0 = full batch
    top_quantile: float = 0.25
    mu1: float = 20.0
    calibrate_theta: bool = True
    init_scale: float = 1.0


def select_top(episodes, quantile: float = 0.25):
    """Episodes whose return lies in the top ``quantile`` (at least one)."""
    k = max(1, int(math.ceil(len(episodes) * quantile)))
    order = sorted(range(len(episodes)), key=lambda i: (-episodes[i].ret, i))
    return [episodes[i] for i in order[:k]]


def build_samples(episodes, z: int):
    n = episodes[0].actions.shape[1]
    d = token_dim(n)
    blocks = []
    for ep in episodes:
        blocks.append(np.zeros((z, d)))
        blocks.append(ep.tokens())
    tokens = np.vstack(blocks)
    # window for step k covers tokens k-z..k-1 (padding included); drop the
    # trailing token of each episode, which no window needs
    lengths = [len(ep.rewards) for ep in episodes]
    idx = _windows(lengths, z)
    current = state_token(np.vstack([ep.states for ep in episodes]), n)
    targets = np.vstack([ep.actions for ep in episodes]).astype(float)
    return tokens, idx, current, targets


def dt_train(episodes, dc: DtConfig | None = None, seed: int = 0) -> DtModel:
    """Return-filtered behaviour cloning with Adam on the analytic gradient."""
    dc = dc or DtConfig()
    episodes = list(episodes)
    if not episodes or all(len(ep.rewards) == 0 for ep in episodes):
        raise DtError("empty dataset")
    episodes = [ep for ep in episodes if len(ep.rewards)]
    n = episodes[0].actions.shape[1]
    if any(ep.actions.shape[1] != n for ep in episodes):
        raise DtError("episodes disagree on the number of devices")
    top = select_top(episodes, dc.top_quantile)
    tokens, idx, current, targets = build_samples(top, dc.z)
    rng = np.random.default_rng(seed)
    model = DtModel.random(token_dim(n), dc.d_h, n, rng, dc.z, dc.theta, dc.init_scale)
    # start the output bias at the empirical action rate
    rate = np.clip(targets.mean(axis=0), 1e-3, 1 - 1e-3)
    model.bo[:] = np.log(rate / (1 - rate))

    params = model.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    bsz = dc.batch_size or len(idx)
    for _ in range(dc.epochs):
        order = rng.permutation(len(idx)) if bsz < len(idx) else np.arange(len(idx))
        for start in range(0, len(idx), bsz):
            sel = order[start:start + bsz]
            loss, grads = loss_and_grad(model, tokens, idx[sel], current[sel], targets[sel])
            if not math.isfinite(loss):
                raise DtError(f"non-finite loss at step {t}")
            t += 1
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= b1
                mi += (1 - b1) * g
                vi *= b2
                vi += (1 - b2) * g * g
                p -= dc.lr * (mi / (1 - b1**t)) / (np.sqrt(vi / (1 - b2**t)) + eps)
        model.loss_curve.append(loss)
    return model


def calibrated_threshold(model: DtModel, tokens, idx, current, targets) -> float:
    """Threshold at which the fraction of scores >= theta matches the target action rate."""
    w = tokens[idx]
    scores = dt_forward(model, w, current).ravel()
    rate = float(targets.mean())
    if rate <= 0:
        return float(np.nextafter(1.0, 0.0))
    theta = float(np.quantile(scores, 1 - rate))
    return float(np.clip(theta, 1e-9, 1 - 1e-9))


def calibrate_closed_loop(model: DtModel, cfg: SimConfig, rate: float, horizon: int = 500, seed: int = 0,
                          iters: int = 3) -> float:
    """Pick ``theta`` so that the policy's own rollouts activate about ``rate``
    of the devices per TTI.

    Scores seen online differ from those on the behaviour data (the context
    holds the policy's own actions), so the threshold is refitted on a short
    rollout a few times.  Returns and stores the threshold.
    """
    from .sim import World, mix64, step

    ecfg = cfg.replace(horizon=horizon)
    for it in range(iters):
        pol = DtPolicy(model)
        world = World(ecfg, mix64(seed, 0xCA1, it))
        world.attach(pol)
        seen = []
        for _ in range(horizon):
            step(world, pol)
            seen.append(pol.scores.copy())
        theta = float(np.quantile(np.concatenate(seen), 1 - rate)) if rate > 0 else 1 - 1e-9
        model.theta = float(np.clip(theta, 1e-9, 1 - 1e-9))
    return model.theta


def train_dt_policy(cfg: SimConfig, dc: DtConfig | None = None, episodes: int = 8, horizon: int = 500,
                    seed: int | None = None, dataset=None) -> DtModel:
    """Collect (or take) a behaviour dataset, train, then calibrate the threshold in closed loop."""
    dc = dc or DtConfig()
    seed = cfg.seed if seed is None else seed
    data = dataset if dataset is not None else collect_dataset(cfg, episodes, horizon, seed, dc.mu1)
    model = dt_train(data, dc, seed)
    if dc.calibrate_theta:
        rate = float(np.mean([ep.actions.mean() for ep in select_top(data, dc.top_quantile)]))
        calibrate_closed_loop(model, cfg, rate, horizon, seed)
    return model


class _FeatureTracker:
    """Real-valued per-device state features, updated once per TTI."""

    def __init__(self, cfg: SimConfig, positions: np.ndarray):
        self.cfg = cfg
        n = len(positions)
        expected = n * math.pi * cfg.d_max**2 / cfg.area
        self.density = neighbour_counts(positions, cfg.d_max) / max(expected, 1e-9)
        self.prev_action = np.zeros(n)
        self.sensing = np.zeros(n)
        self.fresh = None

    def state(self, obs) -> np.ndarray:
        return np.concatenate([obs.battery / self.cfg.e_max, self.prev_action, self.sensing, self.density])

    def on_reports(self, obs):
        self.fresh = estimated_sensing(obs)

    def end_tti(self, action):
        self.prev_action = np.asarray(action, dtype=float)
        self.sensing = self.fresh if self.fresh is not None else np.zeros_like(self.sensing)
        self.fresh = None


class RecordingPolicy(Policy):
    """Wraps a behaviour policy and records (state, scheduled action, reward) per TTI."""

    def __init__(self, inner: Policy, mu1: float = 20.0):
        self.inner = inner
        self.mu1 = mu1
        self.name = f"recording-{inner.name}"
        self.needs_oracle = inner.needs_oracle

    def reset(self, ctx):
        duty = self.inner.reset(ctx)
        self.info_target = self.inner.info_target
        self.tracker = _FeatureTracker(ctx.cfg, ctx.deployment.positions)
        self.states, self.actions, self.rewards = [], [], []
        return duty

    def decide(self, obs, rng):
        self.states.append(self.tracker.state(obs))
        return self.inner.decide(obs, rng)

    def on_event_reports(self, obs, rng):
        if len(obs.reporters):
            self.tracker.on_reports(obs)
        return self.inner.on_event_reports(obs, rng)

    def feedback(self, outcome):
        self.inner.feedback(outcome)
        a = outcome.scheduled.astype(float)
        cfg = self.tracker.cfg
        missed = outcome.event is not None and outcome.misdetected
        self.actions.append(a)
        self.rewards.append(reward_duty(a, missed, cfg.event_prob, self.mu1))
        self.tracker.end_tti(a)

    def episode(self) -> Episode:
        return Episode(np.array(self.states), np.array(self.actions), np.array(self.rewards), self.inner.name)


def collect_dataset(cfg: SimConfig, episodes: int = 8, horizon: int = 500, seed: int | None = None,
                    mu1: float = 20.0, sources=("knn", "random")) -> list:
    """Offline rollouts alternating between the behaviour policies."""
    from .policy import SimpleFactory
    from .sim import World, mix64, step

    seed = cfg.seed if seed is None else seed
    ecfg = cfg.replace(horizon=horizon)
    out = []
    for e in range(episodes):
        rec = RecordingPolicy(SimpleFactory(sources[e % len(sources)])(ecfg), mu1)
        world = World(ecfg, mix64(seed, 0xD7, e))
        world.attach(rec)
        for _ in range(horizon):
            step(world, rec)
        out.append(rec.episode())
    return out


def save_dataset(episodes, path) -> None:
    if not episodes:
        raise DtError("empty dataset")
    np.savez(path, states=np.array([ep.states for ep in episodes]), actions=np.array([ep.actions for ep in episodes]),
             rewards=np.array([ep.rewards for ep in episodes]), sources=np.array([ep.source for ep in episodes]))


def load_dataset(path) -> list:
    with np.load(path, allow_pickle=False) as f:
        if "states" not in f or f["states"].size == 0:
            raise DtError(f"{path}: empty dataset")
        return [Episode(s, a, r, str(src)) for s, a, r, src in zip(f["states"], f["actions"], f["rewards"], f["sources"])]


class DtPolicy(Policy):
    """Runs a trained model with a rolling window of the last ``Z`` tokens."""

    name = "dt"

    def __init__(self, model: DtModel, mu1: float = 20.0):
        self.model = model
        self.mu1 = mu1

    def reset(self, ctx):
        cfg = ctx.cfg
        if self.model.n != cfg.n_devices:
            raise DtError(f"model was trained for {self.model.n} devices, not {cfg.n_devices}")
        self.cfg = cfg
        self.tracker = _FeatureTracker(cfg, ctx.deployment.positions)
        self.window = deque(maxlen=self.model.z)
        self.info_target = expected_min_information(ctx.deployment, cfg.decay, cfg.psi)
        self.scores = np.zeros(cfg.n_devices)
        self._state = None
        return DutyCycle.always_on(cfg.n_devices)

    def decide(self, obs, rng):
        self._state = self.tracker.state(obs)
        ctx = pad_context(list(self.window), self.model.z, self.model.d)
        self.scores = dt_forward(self.model, ctx, state_token(self._state, obs.n)[0])
        return (self.scores >= self.model.theta).astype(np.int8)

    def on_event_reports(self, obs, rng):
        if len(obs.reporters):
            self.tracker.on_reports(obs)
        asleep = np.flatnonzero(obs.state == DeviceState.SLEEP)
        s = self.scores[asleep]
        keep = s >= self.model.theta
        cand, s = asleep[keep], s[keep]
        return [int(j) for j in cand[np.lexsort((cand, -s))]]

    def feedback(self, outcome):
        a = outcome.scheduled.astype(float)
        missed = outcome.event is not None and outcome.misdetected
        r = reward_duty(a, missed, self.cfg.event_prob, self.mu1)
        self.window.append(np.concatenate([self._state, a, [r]]))
        self.tracker.end_tti(a)


@dataclass
class DtFactory:
    model: DtModel
    mu1: float = 20.0

    def __call__(self, cfg: SimConfig) -> DtPolicy:
        return DtPolicy(self.model.copy(), self.mu1)


_MAGIC = "ehiot-dt"


def save_model(model: DtModel, path) -> None:
    """One JSON header line (D, D_h, N, Z, theta) followed by little-endian float64 parameters."""
    header = {"format": 1, "D": model.d, "D_h": model.d_h, "N": model.n, "Z": model.z, "theta": model.theta}
    with open(path, "wb") as fh:
        fh.write((_MAGIC + " " + json.dumps(header, sort_keys=True) + "\n").encode())
        for p in model.params():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_model(path) -> DtModel:
    with open(path, "rb") as fh:
        line = fh.readline().decode()
        if not line.startswith(_MAGIC + " "):
            raise DtError(f"{path}: not a model file")
        h = json.loads(line[len(_MAGIC) + 1:])
        d, dh, n = h["D"], h["D_h"], h["N"]
        raw = np.frombuffer(fh.read(), dtype="<f8")
    sizes = [d * dh, d * dh, d * dh, dh * n, n]
    if raw.size != sum(sizes):
        raise DtError(f"{path}: expected {sum(sizes)} parameters, found {raw.size}")
    parts = np.split(raw.astype(float), np.cumsum(sizes)[:-1])
    shapes = [(d, dh), (d, dh), (d, dh), (dh, n), (n,)]
    return DtModel(*(p.reshape(s).copy() for p, s in zip(parts, shapes)), h["Z"], h["theta"])
