"""Training loop, translation and evaluation for a pair of directional bridges."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import diffcore as dc
from . import synthgen
from .bridge import NoiseSchedule, sample_bridge
from .denoiser import init_params, score as denoiser_score
from .exceptions import ConfigError, ContractError, DivergenceError, NumericError
from .metrics import (MetricsReport, content_accuracy, mmd2_rbf, random_projections, swd,
                      train_content_classifier)
from .objectives import CapacityLedger, ObjectiveConfig, total_loss

__all__ = [
    "RunConfig", "BridgePair", "TrainingLog", "make_data", "init_pair", "train", "translate",
    "evaluate", "classifier_for", "run_cell", "StructuredBridge", "LOG_COLUMNS",
]

LOG_COLUMNS = ("iter", "loss_total", "loss_dsm", "loss_cyc_end", "loss_cyc_traj", "loss_pair",
               "wta_saturation_events")

_OBJECTIVE_KEYS = tuple(f.name for f in fields(ObjectiveConfig))


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines one run, as flat scalar fields.

    Objective weights and WTA settings use the same names as
    :class:`~sdbridge.objectives.ObjectiveConfig`; generator fields mirror
    :func:`~sdbridge.synthgen.build_generator`.
    """

    # data
    n_content: int = 6
    n_style: int = 3
    latent_dim: int = 2
    noise_std: float = 0.05
    warp_alpha: float = 0.1
    radius: float = 3.0
    style_norm: float = 0.5
    mean_offset: float = 0.0
    n_train: int = 3000
    n_test: int = 3000
    rho: float = 0.0
    # objective
    lambda_end: float = 1.0
    lambda_traj: float = 1.0
    lambda_pair: float = 1.0
    wta_candidates: int = 8
    capacity: int | None = 2
    traj_steps: int = 10
    eps_w: float = 1e-4
    t_min: float = 0.01
    dsm_weighting: str = "uniform"
    use_unpaired: bool = True
    cycle_batch: int | None = None
    # model and schedule
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    time_dim: int = 64
    sigma_min: float = 0.01
    sigma_max: float = 1.0
    inference_steps: int = 40
    output_scaling: str = "none"
    # optimisation
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 3e-4
    # seeds
    data_seed: int = 0
    init_seed: int = 0
    train_seed: int = 0
    eval_seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.rho <= 1.0):
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("need epochs >= 0, batch_size >= 1 and learning_rate > 0")
        if self.n_train < 2 or self.n_test < 2:
            raise ConfigError("n_train and n_test must be at least 2")
        if self.output_scaling not in ("none", "sigma"):
            raise ConfigError(f"output_scaling must be 'none' or 'sigma', got {self.output_scaling!r}")
        if self.inference_steps < 1:
            raise ConfigError("inference_steps must be positive")
        self.objective
        self.schedule

    @property
    def objective(self):
        return ObjectiveConfig(**{k: getattr(self, k) for k in _OBJECTIVE_KEYS})

    @property
    def schedule(self):
        return NoiseSchedule(self.sigma_min, self.sigma_max, self.inference_steps)

    def generator(self):
        return synthgen.build_generator(self.n_content, self.n_style, self.latent_dim,
                                        self.noise_std, self.warp_alpha, self.data_seed,
                                        self.radius, self.style_norm, self.mean_offset)

    def to_flat(self):
        return asdict(self)

    @classmethod
    def from_flat(cls, values):
        """Build from ``{name: value}``, coercing strings from config files."""
        known = {f.name: f for f in fields(cls)}
        defaults = cls()
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(raw, getattr(defaults, key), key)
        return cls(**kwargs)

    def with_(self, **changes):
        return replace(self, **changes)

    def fingerprint(self):
        blob = json.dumps(self.to_flat(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(raw, default, key):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if text.lower() in ("none", "inf", "unlimited") and key in ("capacity", "cycle_batch"):
        return None
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int) or (default is None):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r}") from None
    return text


@dataclass
class BridgePair:
    """Two denoisers (``fwd``: source to target, ``rev``: target to source)."""

    fwd: object
    rev: object
    schedule: NoiseSchedule
    output_scaling: str = "none"

    def __post_init__(self):
        a, b = self.fwd.config, self.rev.config
        if (a.n_layers, a.d_model, a.n_heads) != (b.n_layers, b.d_model, b.n_heads):
            raise ContractError("both directions must share (n_layers, d_model, n_heads)")

    def params(self, direction):
        if direction not in ("fwd", "rev"):
            raise ContractError(f"direction must be 'fwd' or 'rev', got {direction!r}")
        return self.fwd if direction == "fwd" else self.rev

    def score_fn(self, direction, weights=None):
        params = self.params(direction)
        schedule = self.schedule
        scaled = self.output_scaling == "sigma"

        def fn(z, y, t):
            out = denoiser_score(params, z, y, t, weights)
            if scaled:
                s = np.asarray(schedule.sigma(t))
                out = dc.mul(out, (1.0 / s).reshape(-1, 1) if s.ndim else np.array([1.0 / s]))
            return out

        return fn

    def copy(self):
        return BridgePair(self.fwd.copy(), self.rev.copy(), self.schedule, self.output_scaling)


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    iter_times: list = field(default_factory=list)

    def append(self, row, seconds):
        self.rows.append(row)
        self.iter_times.append(seconds)

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def write_csv(self, path):
        import csv
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: (f"{r[k]:.17g}" if isinstance(r[k], float) else r[k])
                                 for k in LOG_COLUMNS})


def make_data(config):
    """``(spec, train, test)`` for a config; training pairing drawn at ``rho``."""
    spec = config.generator()
    rng = np.random.default_rng([config.data_seed, 1])
    train_set = synthgen.sample(spec, config.n_train, rng)
    train_set = synthgen.assign_pairing(train_set, config.rho, rng)
    test_set = synthgen.sample(spec, config.n_test, np.random.default_rng([config.data_seed, 2]))
    return spec, train_set, test_set


def init_pair(config):
    kw = dict(n_layers=config.n_layers, d_model=config.d_model, n_heads=config.n_heads,
              latent_dim=config.latent_dim, time_dim=config.time_dim)
    return BridgePair(init_params(seed=config.init_seed * 2, **kw),
                      init_params(seed=config.init_seed * 2 + 1, **kw),
                      config.schedule, config.output_scaling)


def _batches(config, train_set, rng):
    """Yield per-iteration batch dicts for one epoch.

    Unpaired targets and sources come from independently shuffled streams so
    no index alignment leaks. Paired rows keep their correspondence.
    """
    obj = config.objective
    n = len(train_set)
    paired_idx = np.flatnonzero(train_set.paired)
    unpaired_idx = np.flatnonzero(~train_set.paired) if obj.use_unpaired else np.array([], dtype=np.int64)
    active = np.concatenate([paired_idx, unpaired_idx])
    if not len(active):
        return
    n_iter = math.ceil(n / config.batch_size)
    order = np.resize(rng.permutation(active), n_iter * config.batch_size)
    src_stream = np.resize(rng.permutation(unpaired_idx), n_iter * config.batch_size) \
        if len(unpaired_idx) else unpaired_idx
    K = obj.wta_candidates
    cycle_n = obj.cycle_batch or config.batch_size
    d = train_set.latent_dim
    for it in range(n_iter):
        idx = order[it * config.batch_size:(it + 1) * config.batch_size]
        is_p = train_set.paired[idx]
        p_idx = idx[is_p]
        u_tgt = idx[~is_p]
        u_src = src_stream[it * config.batch_size:it * config.batch_size + len(u_tgt)] \
            if len(src_stream) else u_tgt
        cand_f = rng.integers(0, n, size=(len(u_tgt), K))
        cand_r = rng.integers(0, n, size=(len(u_src), K))
        batch = {
            "fwd": {
                "targets": train_set.z_tgt[u_tgt],
                "candidates": train_set.z_src[cand_f].reshape(len(u_tgt), K, d),
                "candidate_ids": cand_f,
                "pair_tgt": train_set.z_tgt[p_idx],
                "pair_src": train_set.z_src[p_idx],
            },
            "rev": {
                "targets": train_set.z_src[u_src],
                "candidates": train_set.z_tgt[cand_r].reshape(len(u_src), K, d),
                "candidate_ids": cand_r,
                "pair_tgt": train_set.z_src[p_idx],
                "pair_src": train_set.z_tgt[p_idx],
            },
            "cycle": {
                "src": train_set.z_src[idx[:cycle_n]],
                "tgt": train_set.z_tgt[np.resize(rng.permutation(n), cycle_n)],
            },
        }
        yield batch


def train(config, train_set=None, pair=None, callback=None):
    """Optimise both directions on the unified objective.

    Returns ``(pair, log)``. Raises :class:`DivergenceError` (with the
    iteration index in ``step``) when a loss or gradient turns non-finite.
    """
    if train_set is None:
        _, train_set, _ = make_data(config)
    pair = pair or init_pair(config)
    log = TrainingLog()
    if config.epochs == 0:
        return pair, log
    obj = config.objective
    schedule = pair.schedule
    rng = np.random.default_rng([config.train_seed, 3])
    n = len(train_set)
    ledgers = {"fwd": CapacityLedger(n, obj.capacity), "rev": CapacityLedger(n, obj.capacity)}
    opts = {"fwd": dc.Adam(config.learning_rate), "rev": dc.Adam(config.learning_rate)}
    iteration = 0
    for epoch in range(config.epochs):
        for ledger in ledgers.values():
            ledger.reset()
        for batch in _batches(config, train_set, rng):
            t0 = time.perf_counter()
            try:
                with dc.Tape() as tape:
                    weights = {d: tape.watch_params(pair.params(d).arrays) for d in ("fwd", "rev")}
                    fns = {d: pair.score_fn(d, weights[d]) for d in ("fwd", "rev")}
                    terms = total_loss(batch, fns, obj, ledgers, schedule, rng, iteration)
                    grads = tape.backward(terms.total)
            except NumericError as exc:
                raise DivergenceError(f"training diverged at iteration {iteration}: {exc}",
                                      step=iteration) from exc
            for d in ("fwd", "rev"):
                g = {name: grads[t.node] for name, t in weights[d].items()}
                if not all(np.all(np.isfinite(v)) for v in g.values()):
                    raise DivergenceError(f"non-finite gradient at iteration {iteration}", step=iteration)
                opts[d].step(pair.params(d).arrays, g)
            row = {"iter": iteration, **terms.breakdown()}
            log.append(row, time.perf_counter() - t0)
            if callback is not None:
                callback(iteration, row)
            iteration += 1
    return pair, log


def translate(pair, direction, source, n_steps=None, rng=None, record=False):
    """Run the sampler of one direction on a batch of conditions."""
    rng = rng if rng is not None else np.random.default_rng(0)
    with dc.no_grad():
        return sample_bridge(pair.score_fn(direction), source, pair.schedule, n_steps, rng,
                             record=record, direction="src->tgt" if direction == "fwd" else "tgt->src")


_CLASSIFIERS = {}


def classifier_for(config, spec=None, train_set=None):
    """Content classifier on clean target samples, cached per generator setting."""
    key = (config.n_content, config.n_style, config.latent_dim, config.noise_std, config.warp_alpha,
           config.radius, config.style_norm, config.mean_offset, config.data_seed, config.n_train)
    if key not in _CLASSIFIERS:
        if train_set is None:
            spec, train_set, _ = make_data(config)
        _CLASSIFIERS[key] = train_content_classifier(train_set.z_tgt, train_set.content,
                                                     seed=config.data_seed)
    return _CLASSIFIERS[key]


def evaluate(pair, test_set, classifier, eval_seed=0, n_steps=None, n_projections=128):
    """Translate every test source forward and back and compute all metrics."""
    rng = np.random.default_rng([eval_seed, 4])
    pred = translate(pair, "fwd", test_set.z_src, n_steps, rng)
    back = translate(pair, "rev", pred, n_steps, rng)
    proj = random_projections(test_set.latent_dim, n_projections, np.random.default_rng([eval_seed, 5]))
    return MetricsReport(
        swd=swd(pred, test_set.z_tgt, projections=proj),
        mmd2=mmd2_rbf(pred, test_set.z_tgt),
        content_acc=content_accuracy(classifier, pred, test_set.content),
        cycle_mse=float(np.mean(np.sum((back - test_set.z_src) ** 2, axis=1))),
        sample_count=len(test_set),
        seed=int(eval_seed),
    )


def run_cell(config):
    """Train and evaluate one configuration. Returns ``(report, log)``."""
    spec, train_set, test_set = make_data(config)
    clf = classifier_for(config, spec, train_set)
    pair, log = train(config, train_set)
    report = evaluate(pair, test_set, clf, config.eval_seed)
    return report, log


class StructuredBridge(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` on endpoint arrays, ``transform`` source to target.

    ``fit(X, Y, paired=None)`` treats rows of ``X`` (sources) and ``Y``
    (targets) as two marginals; only rows flagged in ``paired`` are used as
    correspondences. ``inverse_transform`` runs the reverse bridge.
    """

    def __init__(self, n_layers=2, d_model=32, n_heads=4, epochs=10, batch_size=128,
                 learning_rate=3e-4, lambda_end=1.0, lambda_traj=1.0, lambda_pair=1.0,
                 wta_candidates=8, capacity=2, inference_steps=40, output_scaling="none",
                 random_state=0):
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lambda_end = lambda_end
        self.lambda_traj = lambda_traj
        self.lambda_pair = lambda_pair
        self.wta_candidates = wta_candidates
        self.capacity = capacity
        self.inference_steps = inference_steps
        self.output_scaling = output_scaling
        self.random_state = random_state

    def _config(self, n, d, rho):
        p = self.get_params()
        seed = p.pop("random_state")
        return RunConfig(latent_dim=d, n_train=max(n, 2), rho=rho, data_seed=seed, init_seed=seed,
                         train_seed=seed, eval_seed=seed, **p)

    def fit(self, X, Y, paired=None):
        X = check_array(X, dtype=np.float64)
        Y = check_array(Y, dtype=np.float64)
        if X.shape != Y.shape:
            raise ContractError(f"X {X.shape} and Y {Y.shape} must have equal shape")
        n, d = X.shape
        paired = np.zeros(n, dtype=bool) if paired is None else np.asarray(paired, dtype=bool)
        data = synthgen.Dataset(X, Y, np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64),
                                paired, float(paired.mean()))
        self.config_ = self._config(n, d, float(paired.mean()))
        self.n_features_in_ = d
        self.pair_, self.log_ = train(self.config_, data)
        return self

    def _run(self, direction, A):
        check_is_fitted(self, "pair_")
        A = check_array(A, dtype=np.float64)
        if A.shape[1] != self.n_features_in_:
            raise ContractError(f"expected {self.n_features_in_} features, got {A.shape[1]}")
        return translate(self.pair_, direction, A, rng=np.random.default_rng(self.random_state))

    def transform(self, X):
        return self._run("fwd", X)

    def inverse_transform(self, Y):
        return self._run("rev", Y)

    def score(self, X, Y):
        """Negative sliced Wasserstein distance between ``transform(X)`` and ``Y``."""
        return -swd(self.transform(X), check_array(Y, dtype=np.float64))
