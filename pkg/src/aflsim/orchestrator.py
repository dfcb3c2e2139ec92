"""Asynchronous training loop: scheduling, staleness, local steps, attack
injection, defense invocation, metrics, and theory probes."""

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import attacks, taskbench
from .defense import FilteredMedianConfig, build_defense
from .history import HistoryStore
from .numkit import RngStream, l2_norm

DEFENSES = ("filtered_median", "async_sgd", "kardam", "basgd")
ATTACKS = ("none", "labelflip", "signflip", "gaussian", "scaling", "minmax", "adaptive")
TASKS = ("classification", "regression")
UPDATE_ATTACKS = ("signflip", "gaussian", "scaling", "minmax", "adaptive")
MAX_MALICIOUS_FRACTION = 0.45


@dataclass
class ExperimentConfig:
    task: str = "classification"
    defense: str = "filtered_median"
    attack: str = "none"
    variant: str = "full"
    seed: int = 0
    n_clients: int = 50
    malicious_fraction: float = 0.2
    tau_max: int = 10
    rounds: int = 2000
    eta: float = 0.01
    batch_size: int = 32
    full_batch: bool = False
    noniid_x: float = 0.5
    alpha: float = 0.8
    buffer_size: int = 3
    clip_threshold: float = 50.0
    q_append_accepted_only: bool = False
    basgd_buckets: int = 3
    scaling_factor: float = 0.0        # 0 means "use n_clients"
    trigger_indices: tuple = ()        # empty means "last two features"
    trigger_values: tuple = ()
    trigger_target: int = 0
    poison_fraction: float = 0.5
    gaussian_std: float = 200.0
    n_classes: int = 3
    feature_dim: int = 10
    n_train: int = 2000
    n_test: int = 1000
    class_sep: float = 3.0
    noise_std: float = 0.1
    eval_interval: int = 50

    def validate(self):
        checks = [
            (self.task in TASKS, "task", f"must be one of {TASKS}"),
            (self.defense in DEFENSES, "defense", f"must be one of {DEFENSES}"),
            (self.attack in ATTACKS, "attack", f"must be one of {ATTACKS}"),
            (self.n_clients >= 2, "n_clients", "must be >= 2"),
            (0.0 <= self.malicious_fraction <= MAX_MALICIOUS_FRACTION,
             "malicious_fraction", f"must be in [0, {MAX_MALICIOUS_FRACTION}]"),
            (self.tau_max >= 0, "tau_max", "must be >= 0"),
            (self.rounds >= 1, "rounds", "must be >= 1"),
            (self.eta > 0, "eta", "must be > 0"),
            (self.batch_size >= 1, "batch_size", "must be >= 1"),
            (self.eval_interval >= 1, "eval_interval", "must be >= 1"),
            (self.n_train >= 1, "n_train", "must be >= 1"),
            (self.n_test >= 1, "n_test", "must be >= 1"),
            (self.feature_dim >= 1, "feature_dim", "must be >= 1"),
            (self.poison_fraction > 0.0 and self.poison_fraction <= 1.0,
             "poison_fraction", "must be in (0, 1]"),
            (self.scaling_factor >= 0.0, "scaling_factor", "must be >= 0 (0 = n_clients)"),
            (self.gaussian_std >= 0.0, "gaussian_std", "must be >= 0"),
        ]
        if self.task == "classification":
            checks += [
                (self.n_classes >= 2, "n_classes", "must be >= 2"),
                (self.feature_dim >= self.n_classes, "feature_dim", "must be >= n_classes"),
                (self.n_clients >= self.n_classes, "n_clients", "must be >= n_classes"),
                (1.0 / self.n_classes <= self.noniid_x <= 1.0,
                 "noniid_x", "must be in [1/n_classes, 1]"),
                (0 <= self.trigger_target < self.n_classes, "trigger_target",
                 "must be a valid class"),
            ]
        if self.attack in ("minmax", "adaptive"):
            n_mal = self.malicious_count()
            checks.append((self.n_clients - n_mal >= 2, "malicious_fraction",
                           "needs at least two benign clients for this attack"))
        if self.attack == "scaling" and self.task != "classification":
            checks.append((False, "attack", "scaling attack needs a classification task"))
        if self.attack == "labelflip" and self.task != "classification":
            checks.append((False, "attack", "label flipping needs a classification task"))
        for ok, key, msg in checks:
            if not ok:
                raise ValueError(f"config key {key!r} {msg}")
        # delegates the filter parameter checks
        self.filter_config()

    def malicious_count(self):
        return int(self.malicious_fraction * self.n_clients + 1e-9)

    def filter_config(self):
        return FilteredMedianConfig(self.alpha, self.buffer_size, self.clip_threshold,
                                    self.eta, self.q_append_accepted_only)

    def resolved_trigger(self):
        if self.task != "classification":
            return None
        idx = tuple(self.trigger_indices) or (self.feature_dim - 2, self.feature_dim - 1)
        vals = tuple(self.trigger_values) or (4.0, -4.0)[: len(idx)]
        return taskbench.TriggerSpec(idx, vals, self.trigger_target)


@dataclass
class ClientState:
    client_id: int
    shard: taskbench.Dataset
    malicious: bool
    rng: RngStream


@dataclass
class MetricsLog:
    config: dict
    rows: list = field(default_factory=list)
    staleness: list = field(default_factory=list)
    selected: list = field(default_factory=list)
    diverged: bool = False

    @property
    def final(self):
        return self.rows[-1]

    def metric_columns(self):
        skip = {"round", "wall_clock"}
        return sorted(k for k in self.rows[0] if k not in skip)

    def to_csv(self, path):
        cols = self.metric_columns()
        lines = [",".join(["round"] + cols)]
        for row in self.rows:
            cells = [str(row["round"])]
            for c in cols:
                cells.append(_format_cell(row[c]))
            lines.append(",".join(cells))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _format_cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def sample_stale_base(t, tau_max, rng):
    """Round of the stale model handed to this round's client: t - tau with
    tau uniform on {0, ..., min(tau_max, t)}."""
    if t < 0:
        raise ValueError("round must be >= 0")
    tau = rng.integers(0, min(tau_max, t) + 1)
    return t - tau


class Simulation:
    """One seeded experiment run. Build once, call run() once."""

    def __init__(self, cfg: ExperimentConfig):
        cfg.validate()
        self.cfg = cfg
        root = RngStream(cfg.seed)
        data_rng, part_rng, self.sched_rng, pick_rng, client_root = root.spawn(5)

        if cfg.task == "classification":
            self.train = taskbench.gen_classification(
                cfg.n_classes, cfg.feature_dim, cfg.n_train, cfg.class_sep, data_rng)
            self.test = taskbench.gen_classification(
                cfg.n_classes, cfg.feature_dim, cfg.n_test, cfg.class_sep, data_rng)
            shards = taskbench.partition_noniid(self.train, cfg.n_clients, cfg.noniid_x, part_rng)
            self.model = taskbench.Model("softmax", cfg.feature_dim, cfg.n_classes)
        else:
            pool = taskbench.gen_regression(
                cfg.feature_dim, cfg.n_train + cfg.n_test, cfg.noise_std, data_rng)
            self.train = pool.subset(np.arange(cfg.n_train))
            self.test = pool.subset(np.arange(cfg.n_train, len(pool)))
            shards = taskbench.split_uniform(self.train, cfg.n_clients, part_rng)
            self.model = taskbench.Model("linear", cfg.feature_dim)

        n_mal = cfg.malicious_count()
        mal_ids = set()
        if n_mal and cfg.attack != "none":
            # Prefix of a seeded permutation, so sweeps over the malicious
            # fraction grow the same compromised set instead of resampling it.
            mal_ids = set(int(c) for c in pick_rng.permutation(cfg.n_clients)[:n_mal])
        self.malicious_ids = frozenset(mal_ids)
        self.trigger = cfg.resolved_trigger() if cfg.attack == "scaling" else None

        client_rngs = client_root.spawn(cfg.n_clients)
        self.clients = []
        for c in range(cfg.n_clients):
            shard = shards[c]
            if len(shard) == 0:
                raise ValueError(f"client {c} received an empty shard; use more samples")
            malicious = c in mal_ids
            if malicious and cfg.attack == "labelflip":
                shard = attacks.labelflip_poison(shard, cfg.n_classes)
            if malicious and cfg.attack == "scaling":
                shard = self._poison_with_trigger(shard, client_rngs[c])
            self.clients.append(ClientState(c, shard, malicious, client_rngs[c]))

        self.benign_ids = [c for c in range(cfg.n_clients) if c not in mal_ids]
        self.scaling_factor = cfg.scaling_factor or float(cfg.n_clients)
        self.hist = HistoryStore(cfg.buffer_size)
        self.defense = build_defense(cfg.defense, cfg.filter_config(),
                                     variant=cfg.variant, basgd_buckets=cfg.basgd_buckets)

    def _poison_with_trigger(self, shard, rng):
        n_poison = max(1, int(round(self.cfg.poison_fraction * len(shard))))
        idx = np.sort(rng.choice(len(shard), min(n_poison, len(shard)), replace=False))
        poisoned = taskbench.apply_trigger(shard.subset(idx), self.trigger or
                                           self.cfg.resolved_trigger(), relabel=True)
        keep = np.setdiff1d(np.arange(len(shard)), idx)
        rest = shard.subset(keep)
        return taskbench.Dataset(
            np.concatenate([rest.features, poisoned.features]),
            np.concatenate([rest.labels, poisoned.labels]),
            "classification", shard.n_classes,
            np.concatenate([rest.triggered, poisoned.triggered]))

    def honest_gradient(self, client, w_base, rng=None):
        shard = client.shard
        model = self.model.with_params(w_base)
        if self.cfg.full_batch or len(shard) <= self.cfg.batch_size:
            return taskbench.dataset_gradient(model, shard)
        rng = client.rng if rng is None else rng
        idx = rng.choice(len(shard), self.cfg.batch_size, replace=False)
        return taskbench.gradient(model, shard.features[idx], shard.labels[idx])

    def _benign_snapshot(self, w_base, rng):
        """What each benign client would send this round, as simulated by the
        attacker: minibatch gradients drawn from the attacker's own stream so
        honest clients' streams stay untouched."""
        return [self.honest_gradient(self.clients[c], w_base, rng=rng)
                for c in self.benign_ids]

    def local_step(self, client, w_base, t):
        """The update client sends this round: honest gradient or attack payload."""
        attack = self.cfg.attack
        if not client.malicious or attack in ("none", "labelflip"):
            return self.honest_gradient(client, w_base)
        if attack == "signflip":
            return attacks.signflip(self.honest_gradient(client, w_base))
        if attack == "gaussian":
            return attacks.gaussian_fabricate(self.model.dim, client.rng,
                                              self.cfg.gaussian_std)
        if attack == "scaling":
            return attacks.scaling_attack(self.honest_gradient(client, w_base),
                                          self.scaling_factor)
        ctx = attacks.AttackContext(
            benign_updates=self._benign_snapshot(w_base, client.rng),
            malicious_ids=self.malicious_ids,
            global_w=w_base,
            defense_view=self.hist,
            rng=client.rng,
            attacker_id=client.client_id)
        if attack == "minmax":
            return attacks.minmax_attack(ctx)
        return attacks.adaptive_attack(ctx, self.cfg.filter_config())

    def benign_objective_gradient(self, w):
        model = self.model.with_params(w)
        grads = [taskbench.dataset_gradient(model, self.clients[c].shard)
                 for c in self.benign_ids]
        return np.mean(np.stack(grads), axis=0)

    def _eval_row(self, t, w, decision, started):
        cfg = self.cfg
        model = self.model.with_params(w)
        row = {"round": t,
               "accepted": decision.accepted,
               "lam": decision.lam,
               "staleness": self.staleness_trace[-1]}
        if cfg.task == "classification":
            row["ter"] = taskbench.test_error_rate(model, self.test)
            if self.trigger is not None:
                row["asr"] = taskbench.attack_success_rate(model, self.test, self.trigger)
        else:
            row["rmse"] = taskbench.rmse(model, self.test)
        grad_h = self.benign_objective_gradient(w)
        row["grad_norm"] = l2_norm(grad_h)
        agg = decision.aggregate if decision.aggregate is not None else np.zeros_like(w)
        row["tracking_err"] = float(np.sum((agg - grad_h) ** 2))
        row["rel_est_error"] = self._mean_estimation_error(decision, model)
        row["wall_clock"] = time.perf_counter() - started
        return row

    def _mean_estimation_error(self, decision, model):
        """Cohort-level relative estimation error over the benign estimated
        clients: stacked error norm over stacked truth norm, which keeps one
        client's near-zero gradient from dominating the ratio."""
        if not decision.estimates:
            return None
        err_sq = truth_sq = 0.0
        seen = False
        for k, est in decision.estimates.items():
            if k not in self.benign_ids:
                continue
            truth = taskbench.dataset_gradient(model, self.clients[k].shard)
            err_sq += float(np.sum((est.estimate - truth) ** 2))
            truth_sq += float(np.sum(truth**2))
            seen = True
        if not seen or truth_sq == 0.0:
            return None
        return math.sqrt(err_sq / truth_sq)

    def run(self):
        cfg = self.cfg
        started = time.perf_counter()
        log = MetricsLog(config=asdict(cfg))
        self.staleness_trace = log.staleness
        w = self.model.params.copy()
        for t in range(cfg.rounds):
            self.hist.record_global(t, w)
            i = self.sched_rng.integers(cfg.n_clients)
            base = sample_stale_base(t, cfg.tau_max, self.sched_rng)
            log.selected.append(i)
            log.staleness.append(t - base)
            g = self.local_step(self.clients[i], self.hist.model(base), t)
            decision = self.defense.process(i, g, base, t, self.hist)
            if t % cfg.eval_interval == 0 or t == cfg.rounds - 1:
                log.rows.append(self._eval_row(t, w, decision, started))
            if decision.aggregate is not None:
                w_next = w - cfg.eta * decision.aggregate
                if not np.all(np.isfinite(w_next)):
                    if cfg.defense != "async_sgd":
                        raise RuntimeError(f"defense {cfg.defense} let the model diverge")
                    log.diverged = True
                    self._mark_diverged(log, t)
                    return log
                w = w_next
        return log

    def _mark_diverged(self, log, t):
        """AsyncSGD is allowed to blow up; close the log with worst-case metrics."""
        row = dict(log.rows[-1]) if log.rows else {"round": t}
        row["round"] = t
        if self.cfg.task == "classification":
            row["ter"] = 1.0
            if self.trigger is not None:
                row["asr"] = 1.0
        else:
            row["rmse"] = math.inf
        row["grad_norm"] = math.inf
        row["tracking_err"] = math.inf
        if not log.rows or log.rows[-1]["round"] != t:
            log.rows.append(row)
        else:
            log.rows[-1] = row


def run_experiment(cfg: ExperimentConfig) -> MetricsLog:
    return Simulation(cfg).run()


def _window_means(rows, key, window):
    """Mean of a metric over consecutive round windows, skipping absent values."""
    buckets = {}
    for row in rows:
        v = row.get(key)
        if v is None:
            continue
        buckets.setdefault(row["round"] // window, []).append(v)
    return [float(np.mean(buckets[k])) for k in sorted(buckets)]


def theory_probe(log: MetricsLog, window=100):
    """Empirical probes of the convergence analysis quantities.

    Reports windowed averages of the squared benign-gradient norm, the squared
    tracking error of the applied aggregate, and the relative estimation
    error, plus the staleness bound check.
    """
    if not log.rows:
        raise ValueError("run has no metric rows")
    tau_max = log.config["tau_max"]
    grad_sq = _window_means(
        [{"round": r["round"], "g2": r["grad_norm"] ** 2} for r in log.rows], "g2", window)
    tracking = _window_means(log.rows, "tracking_err", window)
    rel_est = _window_means(log.rows, "rel_est_error", window)
    max_stale = max(log.staleness) if log.staleness else 0

    half = max(1, len(tracking) // 2)
    tracking_floor = 4.0 * float(np.mean(tracking[half:])) if tracking else math.nan
    plateau = float(np.mean(grad_sq[-2:])) if grad_sq else math.nan
    warm = [v for v in rel_est[2:]] if len(rel_est) > 2 else rel_est
    report = {
        "window": window,
        "grad_sq_windows": grad_sq,
        "tracking_windows": tracking,
        "rel_est_windows": rel_est,
        "max_staleness": max_stale,
        "staleness_within_bound": max_stale <= tau_max,
        "plateau_grad_sq": plateau,
        "tracking_floor": tracking_floor,
        "plateau_below_10x_floor": bool(plateau <= 10.0 * tracking_floor)
        if tracking else False,
        "rel_est_final_below_first": bool(warm[-1] < warm[0]) if len(warm) >= 2 else False,
        "tracking_bounded": bool(
            all(math.isfinite(v) for v in tracking)
            and (len(tracking) < 2
                 or tracking[-1] <= 5.0 * float(np.median(tracking)))),
    }
    return report
