"""Episodic multi-task optimization and run orchestration.

One training step runs a single forward over all episode images (support
and query together, so batch norm sees the episode as one batch), builds
the classification loss from query posteriors against prototypes, the
auxiliary loss from every image's patch projections against its class's
soft target, combines them as (1-lambda) l_cls + lambda l_aux, and takes
one optimizer step.

With lambda = 0 the auxiliary branch is never built: the total loss IS
the classification loss, auxiliary parameters receive no gradient and
keep their initialization, and (with name-keyed init) the parameter
trajectory matches a classification-only model bit for bit in 64-bit
single-threaded mode.

Evaluation never touches label texts or word vectors: episodes are
scored purely by posterior argmax. Each evaluation episode draws from
its own index-keyed stream, so results are independent of thread
scheduling and evaluation order.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .backbone import aux_predict
from .config import save_config
from .checkpoint import write_tensors
from .episodes import augment, eval_transform, sample_episode
from .errors import ConfigError, DivergenceError
from .manifest import load_manifest
from .metric import classification_loss, compute_prototypes, distances, posterior
from .model import Model, ModelConfig, episode_embeddings
from .seeding import (
    DOMAIN_EVAL_EPISODE,
    DOMAIN_TRAIN_EPISODE,
    DOMAIN_VAL_EPISODE,
    indexed_rng,
)
from .semantics import WordVectorTable, aux_loss, load_word_vectors, soft_target
from .synth import SynthConfig, generate_synthetic
from .tensor import Tensor, backward, no_grad, precision

MOMENTUM = 0.9
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def total_loss(l_cls, l_aux, lambda_):
    """(1-lambda) l_cls + lambda l_aux on the graph."""
    if not 0.0 <= lambda_ <= 1.0:
        raise ConfigError(f"lambda must be in [0, 1], got {lambda_}")
    a = l_cls if isinstance(l_cls, Tensor) else Tensor(l_cls)
    b = l_aux if isinstance(l_aux, Tensor) else Tensor(l_aux)
    return T.add(T.scale(a, 1.0 - lambda_), T.scale(b, lambda_))


# ---------------------------------------------------------------------------
# optimizers


def optimizer_step(theta, grad, state, kind, lr, *, weight_decay=0.01):
    """One parameter's update; mutates and returns (theta, state).

    sgd_momentum:      v <- mu v + g;  theta <- theta - lr v
    adam_decoupled_wd: bias-corrected Adam moments, weight decay applied
                       directly to theta scaled by lr.
    """
    if kind == "sgd_momentum":
        v = state.get("v")
        if v is None:
            v = np.zeros_like(theta)
        v = MOMENTUM * v + grad
        state["v"] = v
        return theta - lr * v, state
    if kind == "adam_decoupled_wd":
        m = state.get("m")
        if m is None:
            m = np.zeros_like(theta)
            state["v"] = np.zeros_like(theta)
            state["t"] = 0
        v = state["v"]
        t = state["t"] + 1
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grad * grad
        mhat = m / (1.0 - ADAM_BETA1**t)
        vhat = v / (1.0 - ADAM_BETA2**t)
        state.update(m=m, v=v, t=t)
        return theta - lr * (mhat / (np.sqrt(vhat) + ADAM_EPS) + weight_decay * theta), state
    raise ConfigError(f"unknown optimizer kind {kind!r}")


class Optimizer:
    """Applies optimizer_step to every named parameter that has a gradient."""

    def __init__(self, kind, lr, weight_decay=0.01):
        if kind not in ("sgd_momentum", "adam_decoupled_wd"):
            raise ConfigError(f"unknown optimizer kind {kind!r}")
        self.kind = kind
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = {}

    def step(self, params):
        for name, p in params.items():
            if p.grad is None:
                continue
            st = self.state.setdefault(name, {})
            p.data, _ = optimizer_step(
                p.data, p.grad, st, self.kind, self.lr, weight_decay=self.weight_decay
            )
            p.grad = None


class PlateauScheduler:
    """Halve the lr when the validation metric stops improving.

    An improvement is a gain of more than `threshold` over the best seen
    value; `patience` consecutive non-improving epochs trigger one halving,
    never below `floor`.
    """

    def __init__(self, lr, factor=0.5, patience=20, threshold=1e-4, floor=1e-6):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.floor = floor
        self.best = -math.inf
        self.bad_epochs = 0

    def update(self, metric):
        if metric > self.best + self.threshold:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.lr = max(self.lr * self.factor, self.floor)
                self.bad_epochs = 0
        return self.lr


# ---------------------------------------------------------------------------
# one training step


@dataclass
class StepMetrics:
    loss_cls: float
    loss_aux: float
    loss_total: float
    accuracy: float


def train_step(model, opt, sup_x, qry_x, qry_labels, targets, config, step_index):
    """One forward/backward/update on prepared episode batches.

    targets: (K, l_out) soft-target rows in episode class order, or None
    when lambda is zero. Support batches are class-major (K blocks of N),
    query labels index episode classes.
    """
    lam = config.lambda_
    fwd = episode_embeddings(model, sup_x, qry_x, training=True, need_aux=lam > 0.0)
    if not (np.isfinite(fwd.support_emb.data).all() and np.isfinite(fwd.query_emb.data).all()):
        raise DivergenceError("non-finite embeddings", step=step_index)
    k, n = config.K, config.N
    d = fwd.support_emb.data.shape[1]
    protos = compute_prototypes(T.reshape(fwd.support_emb, (k, n, d)))
    post = posterior(distances(fwd.query_emb, protos))
    l_cls = classification_loss(post, qry_labels)

    if lam > 0.0:
        preds = aux_predict(fwd.aux_patches, tau=config.tau)
        sup_rows = np.repeat(targets, n, axis=0)
        qry_rows = targets[np.asarray(qry_labels)]
        rows = np.concatenate([sup_rows, qry_rows], axis=0)
        l_aux = aux_loss(preds, rows, kind=config.aux_loss)
        l_tot = total_loss(l_cls, l_aux, lam)
        aux_val = float(l_aux.data)
    else:
        l_aux = None
        l_tot = l_cls
        aux_val = 0.0

    tot_val = float(l_tot.data)
    if not np.isfinite(tot_val):
        raise DivergenceError(
            f"non-finite loss {tot_val} (cls {float(l_cls.data)}, aux {aux_val})",
            step=step_index,
        )
    acc = float((np.argmax(post.data, axis=1) == np.asarray(qry_labels)).mean())
    cls_val = float(l_cls.data)
    backward(l_tot)
    opt.step(model.parameters())
    return StepMetrics(loss_cls=cls_val, loss_aux=aux_val, loss_total=tot_val, accuracy=acc)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    mean_acc: float
    ci95: float
    n_episodes: int
    accuracies: np.ndarray
    loss_cls: float
    losses: np.ndarray

    def __post_init__(self):
        if self.accuracies.size and (self.accuracies.min() < 0 or self.accuracies.max() > 1):
            raise ConfigError("episode accuracies must lie in [0, 1]")


def ci95_half_width(accuracies):
    """1.96 sample-stddev / sqrt(n); defined 0 for a single episode."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size <= 1:
        return 0.0
    return float(1.96 * a.std(ddof=1) / np.sqrt(a.size))


def _episode_batches(ds, config, rng, split, training):
    """Sample one episode and transform its images to model input size."""
    ep = sample_episode(ds, config.K, config.N, config.M, rng, split=split)
    size = config.image_size
    if training and config.augment:
        sup = np.stack([augment(im, rng, target=size) for im in ep.support_images])
        qry = np.stack([augment(im, rng, target=size) for im in ep.query_images])
    else:
        sup = np.stack([eval_transform(im, target=size) for im in ep.support_images])
        qry = np.stack([eval_transform(im, target=size) for im in ep.query_images])
    return ep, sup, qry


def _eval_one(model, ds, config, split, domain, index):
    rng = indexed_rng(config.seed, domain, index)
    ep, sup, qry = _episode_batches(ds, config, rng, split, training=False)
    with no_grad():
        fwd = episode_embeddings(model, sup, qry, training=False, need_aux=False)
        d = fwd.support_emb.data.shape[1]
        protos = compute_prototypes(T.reshape(fwd.support_emb, (config.K, config.N, d)))
        post = posterior(distances(fwd.query_emb, protos))
        loss = float(classification_loss(post, ep.query_labels).data)
    acc = float((np.argmax(post.data, axis=1) == ep.query_labels).mean())
    return acc, loss


def evaluate(model, ds, split, n_episodes, config, *, threads=1, domain=None):
    """Score n_episodes fresh episodes from one split; never reads labels."""
    if domain is None:
        domain = DOMAIN_VAL_EPISODE if split == "val" else DOMAIN_EVAL_EPISODE
    if n_episodes < 1:
        raise ConfigError(f"evaluation needs at least one episode, got {n_episodes}")
    accs = np.zeros(n_episodes)
    losses = np.zeros(n_episodes)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = pool.map(
                lambda i: _eval_one(model, ds, config, split, domain, i), range(n_episodes)
            )
            for i, (acc, loss) in enumerate(results):
                accs[i], losses[i] = acc, loss
    else:
        for i in range(n_episodes):
            accs[i], losses[i] = _eval_one(model, ds, config, split, domain, i)
    return EvalReport(
        mean_acc=float(accs.mean()),
        ci95=ci95_half_width(accs),
        n_episodes=n_episodes,
        accuracies=accs,
        loss_cls=float(losses.mean()),
        losses=losses,
    )


# ---------------------------------------------------------------------------
# run orchestration


def build_dataset(config):
    """The episodic dataset plus the word-vector table for its labels."""
    if config.dataset == "synthetic":
        synth = SynthConfig(
            n_classes=config.synth_classes,
            items_per_class=config.synth_items,
            image_size=config.synth_image_size,
            twin_fraction=config.synth_twin_fraction,
            bimodal_fraction=config.synth_bimodal_fraction,
            semantic_dim=config.synth_semantic_dim,
            train_classes=config.synth_train,
            val_classes=config.synth_val,
            test_classes=config.synth_test,
            noise=config.synth_noise,
        )
        ds = generate_synthetic(synth, seed=config.seed)
        if config.word_vectors:
            table = load_word_vectors(config.word_vectors)
        else:
            table = WordVectorTable(
                vectors={c.label: c.semantic for c in ds.classes},
                dim=config.synth_semantic_dim,
            )
        return ds, table
    if not os.path.isdir(config.dataset):
        raise ConfigError(f"dataset path {config.dataset!r} does not exist")
    ds = load_manifest(config.dataset)
    if not config.word_vectors:
        raise ConfigError("directory datasets need a word_vectors file")
    return ds, load_word_vectors(config.word_vectors)


def build_model(config, table):
    mc = ModelConfig(
        fusion=config.fusion,
        l_out=table.dim,
        filters=config.filters,
        in_channels=3,
        scale=config.scale,
    )
    return Model.create(mc, seed=config.seed)


def _soft_target_rows(ds, table, config):
    """Per-class soft targets for the train split, keyed by dataset class id."""
    rows = {}
    for cid in ds.splits.get("train", ()):
        rows[cid] = soft_target(ds.classes[cid].label, table, tau_t=config.tau_t).probs
    return rows


@dataclass
class TrainResult:
    model: Model
    metrics_rows: list
    test_report: EvalReport
    out_dir: str | None = None
    diverged_at: int | None = None


def _metrics_line(epoch, split, mean_acc, ci95, loss_cls, loss_aux, lr):
    return (
        f"{epoch},{split},{mean_acc:.8f},{ci95:.8f},{loss_cls:.8f},{loss_aux:.8f},{lr:.8f}"
    )


METRICS_HEADER = "epoch,split,mean_acc,ci95,loss_cls,loss_aux,lr"


def train_run(config, out_dir=None):
    """Full training run; optionally writes checkpoint, metrics, and config."""
    config.validate()
    with precision(config.precision):
        ds, table = build_dataset(config)
        model = build_model(config, table)
        targets_by_cid = _soft_target_rows(ds, table, config) if config.lambda_ > 0 else {}
        opt = Optimizer(config.optimizer, config.lr, weight_decay=config.weight_decay)
        sched = PlateauScheduler(config.lr)
        rows = []
        for epoch in range(config.epochs):
            e_cls = np.zeros(config.episodes_per_epoch)
            e_aux = np.zeros(config.episodes_per_epoch)
            e_acc = np.zeros(config.episodes_per_epoch)
            for i in range(config.episodes_per_epoch):
                step_index = epoch * config.episodes_per_epoch + i
                rng = indexed_rng(config.seed, DOMAIN_TRAIN_EPISODE, step_index)
                ep, sup, qry = _episode_batches(ds, config, rng, "train", training=True)
                targets = (
                    np.stack([targets_by_cid[cid] for cid in ep.class_map])
                    if config.lambda_ > 0
                    else None
                )
                m = train_step(
                    model, opt, sup, qry, ep.query_labels, targets, config, step_index
                )
                e_cls[i], e_aux[i], e_acc[i] = m.loss_cls, m.loss_aux, m.accuracy
            rows.append(
                _metrics_line(
                    epoch, "train", e_acc.mean(), ci95_half_width(e_acc),
                    e_cls.mean(), e_aux.mean(), opt.lr,
                )
            )
            if config.val_episodes > 0:
                rep = evaluate(
                    model, ds, "val", config.val_episodes, config, threads=config.threads
                )
                rows.append(
                    _metrics_line(
                        epoch, "val", rep.mean_acc, rep.ci95, rep.loss_cls, 0.0, opt.lr
                    )
                )
                opt.lr = sched.update(rep.mean_acc)
        test_report = evaluate(
            model, ds, "test", config.eval_episodes, config, threads=config.threads
        )
        rows.append(
            _metrics_line(
                config.epochs, "test", test_report.mean_acc, test_report.ci95,
                test_report.loss_cls, 0.0, opt.lr,
            )
        )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_tensors(os.path.join(out_dir, "model.sct1"), model.state_entries())
        with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as f:
            f.write(METRICS_HEADER + "\n")
            f.write("\n".join(rows) + "\n")
        save_config(os.path.join(out_dir, "config.txt"), config)
    return TrainResult(model=model, metrics_rows=rows, test_report=test_report, out_dir=out_dir)


SWEEP_PARAMS = ("lambda", "tau", "scale")
SWEEP_HEADER = "param,value,mean_acc,ci95"


def sweep(config, param, values, out_dir=None):
    """One full run per value (shared seed); scores on the validation split."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    fname = {"lambda": "lambda_", "tau": "tau", "scale": "scale"}[param]
    lines = []
    for v in values:
        if not np.isfinite(v):
            raise ConfigError(f"sweep value {v} is not finite")
        run_cfg = replace(config, **{fname: float(v)}).validate()
        sub = os.path.join(out_dir, f"{param}_{v:g}") if out_dir is not None else None
        result = train_run(run_cfg, sub)
        with precision(run_cfg.precision):
            ds, _ = build_dataset(run_cfg)
            rep = evaluate(
                result.model, ds, "val", run_cfg.eval_episodes, run_cfg,
                threads=run_cfg.threads,
            )
        lines.append(f"{param},{v:g},{rep.mean_acc:.8f},{rep.ci95:.8f}")
    csv_text = SWEEP_HEADER + "\n" + "\n".join(lines) + "\n"
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "sweep.csv"), "w", encoding="utf-8") as f:
            f.write(csv_text)
        from .svgplot import plot_csv

        with open(os.path.join(out_dir, "sweep.svg"), "w", encoding="utf-8") as f:
            f.write(plot_csv(csv_text, "sweep"))
    return csv_text


ABLATION_VARIANTS = (
    ("baseline", 0.0, "none"),
    ("mt", None, "none"),
    ("mt_se", None, "squeeze_excitation"),
    ("mt_cam", None, "cam"),
    ("mt_concat", None, "concat"),
)
ABLATION_HEADER = "variant,fusion,lambda,mean_acc,ci95,seed"


def ablate(config, out_dir=None):
    """Train the five comparison variants from one base config, same seed."""
    if config.lambda_ <= 0:
        raise ConfigError("ablation base config needs lambda > 0 for the multi-task variants")
    lines = []
    for name, lam, fusion in ABLATION_VARIANTS:
        run_cfg = replace(
            config,
            lambda_=config.lambda_ if lam is None else lam,
            fusion=fusion,
        ).validate()
        sub = os.path.join(out_dir, name) if out_dir is not None else None
        result = train_run(run_cfg, sub)
        rep = result.test_report
        lines.append(
            f"{name},{fusion},{run_cfg.lambda_:g},{rep.mean_acc:.8f},{rep.ci95:.8f},{config.seed}"
        )
    csv_text = ABLATION_HEADER + "\n" + "\n".join(lines) + "\n"
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.csv"), "w", encoding="utf-8") as f:
            f.write(csv_text)
        from .svgplot import plot_csv

        with open(os.path.join(out_dir, "ablation.svg"), "w", encoding="utf-8") as f:
            f.write(plot_csv(csv_text, "ablation"))
    return csv_text
