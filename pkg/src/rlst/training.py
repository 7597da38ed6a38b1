"""Return-estimate targets, loss aggregation and the optimization loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (ParallelCorpus, SyntheticTaskSpec, Vocabulary, build_vocab, encode_pairs,
                   make_batches, read_corpus_file, synth_generate)
from .episode import READ, WRITE, Episode, Rollout, rollout_train
from .metrics import evaluate
from .network import RLSTNet, RLSTNetConfig, init_network

log = logging.getLogger(__name__)

NORMALIZER_FLOOR = 1e-8
BEST_NAME = "best.rlst"
METRIC_COLUMNS = ("epoch", "minibatch_n", "loss_m", "loss_e", "bar_loss_m", "bar_loss_e", "eta",
                  "aggregated_loss", "mean_reward", "mean_read_lead", "val_bleu")


class TrainingError(RuntimeError):
    pass


@dataclass
class QTargets:
    value: np.ndarray
    head: np.ndarray
    token: np.ndarray
    mask: np.ndarray


def build_q_targets(rollout: Rollout, gamma: float, M: float) -> QTargets:
    """Bootstrapped targets for the return estimate of each taken action.

    With ``m`` the larger of the two estimates at the next step (just the
    WRITE estimate if that step was forced):

    * READ before the input is exhausted: ``m``
    * READ after it: ``-M + gamma * m``
    * WRITE of a non-final token: ``reward + gamma * m``
    * WRITE of the final token: ``reward``
    """
    if rollout.y is None or not np.all(rollout.terminal):
        raise ValueError("targets need completed training rollouts")
    act, alive = rollout.action, rollout.active
    # READ is not available at forced steps, so its estimate there never
    # gets trained and must not leak into the bootstrap
    best = np.where(rollout.forced, rollout.q_write, np.maximum(rollout.q_read, rollout.q_write))
    nxt = np.zeros_like(best)
    nxt[:-1] = best[1:]
    read = alive & (act == READ)
    write = alive & (act == WRITE)
    late = read & (rollout.i_before >= rollout.x_len[None, :])
    final = write & (rollout.j_before == rollout.y_len[None, :] - 1)
    value = np.zeros_like(best)
    value = np.where(read & ~late, nxt, value)
    value = np.where(late, -M + gamma * nxt, value)
    value = np.where(write & ~final, rollout.reward + gamma * nxt, value)
    value = np.where(final, rollout.reward, value)
    B = rollout.batch_size
    j = np.minimum(rollout.j_before, rollout.y.shape[1] - 1)
    token = np.where(write, rollout.y[np.arange(B)[None, :], j], -1)
    return QTargets(value=value, head=np.where(alive, act, -1), token=token, mask=alive.copy())


def episode_losses(rollout: Rollout, targets: QTargets):
    """Batch means of the per-episode mistranslation and estimation losses.

    Per episode, the cross-entropy is averaged over WRITE steps and the
    squared estimation error over all steps. Returns two scalar Tensors.
    """
    write = targets.token >= 0
    n_write = write.sum(axis=0)
    n_steps = targets.mask.sum(axis=0)
    if np.any(n_write == 0):
        raise ValueError("every episode must contain at least one WRITE")
    B = rollout.batch_size
    V = rollout.vocab_size
    w_m = (write / (n_write * B)).ravel()
    w_e = (targets.mask / (n_steps * B)).ravel()
    head = ad.concat(rollout.outputs, axis=0)
    dtype = head.value.dtype
    loss_m = ad.softmax_cross_entropy(ad.slice_cols(head, 0, V),
                                      np.maximum(targets.token, 0).ravel(), w_m)
    chosen = ad.select_cols(ad.slice_cols(head, V, V + 2), np.maximum(targets.head, 0).ravel())
    loss_e = ad.mse(chosen, targets.value.ravel().astype(dtype), w_e)
    return loss_m, loss_e


@dataclass(frozen=True)
class LossNormalizer:
    rho: float = 0.99
    n: int = 0
    bar_m: float = 0.0
    bar_e: float = 0.0


def normalizer_weight(n: int, rho: float) -> float:
    return rho * (1.0 - rho ** (n - 1)) / (1.0 - rho ** n)


def normalizer_update(state: LossNormalizer, loss_m: float, loss_e: float) -> LossNormalizer:
    n = state.n + 1
    w = normalizer_weight(n, state.rho)
    return dataclasses.replace(state, n=n, bar_m=w * state.bar_m + (1.0 - w) * float(loss_m),
                               bar_e=w * state.bar_e + (1.0 - w) * float(loss_e))


def eta(n, N, eta_min=0.02, eta_max=0.2) -> float:
    """Estimation-loss weight rising from ``eta_min`` towards ``eta_max``."""
    return eta_max - (eta_max - eta_min) * math.exp(-3.0 * n / N)


@dataclass(frozen=True)
class EtaSchedule:
    eta_min: float = 0.02
    eta_max: float = 0.2
    N: int = 50000

    def __call__(self, n):
        return eta(n, self.N, self.eta_min, self.eta_max)


def aggregate_loss(loss_m, loss_e, state: LossNormalizer, eta_value: float):
    """``loss_m / bar_m + eta * loss_e / bar_e`` with the averages held constant."""
    if state.n < 1:
        raise ValueError("update the normalizer before aggregating")
    bar_m = max(state.bar_m, NORMALIZER_FLOOR)
    bar_e = max(state.bar_e, NORMALIZER_FLOOR)
    if isinstance(loss_m, ad.Tensor):
        return ad.add(ad.scale(loss_m, 1.0 / bar_m), ad.scale(loss_e, eta_value / bar_e))
    return loss_m / bar_m + eta_value * loss_e / bar_e


@dataclass(frozen=True)
class Hyper:
    gamma: float = 0.9
    M: float = 3.0
    eps: float = 0.3
    tf_ratio: float = 1.0
    clip_norm: float = 10.0


def train_minibatch(net: RLSTNet, batch, state: LossNormalizer, schedule: EtaSchedule,
                    optimizer: ad.Adam, hyper: Hyper, rng, index=None):
    """One optimization step on a batch of episodes.

    Returns the metrics row and the updated normalizer state.
    """
    with ad.Tape() as tape:
        ro = rollout_train(net, batch, eps=hyper.eps, tf_ratio=hyper.tf_ratio, rng=rng,
                           M=hyper.M)
        targets = build_q_targets(ro, hyper.gamma, hyper.M)
        loss_m, loss_e = episode_losses(ro, targets)
        lm, le = float(loss_m.value), float(loss_e.value)
        state = normalizer_update(state, lm, le)
        weight = schedule(state.n)
        loss = aggregate_loss(loss_m, loss_e, state, weight)
    total = float(loss.value)
    if not all(map(math.isfinite, (lm, le, total))):
        where = state.n if index is None else index
        raise TrainingError(f"non-finite loss at minibatch {where}: "
                            f"loss_m={lm}, loss_e={le}, aggregated={total}")
    grads = net.named_grads(ad.backward(tape, loss))
    grads = ad.clip_global_norm(grads, hyper.clip_norm)
    optimizer.step(net.params, grads)
    leads = (ro.i_before - ro.j_before)[ro.active]
    row = {
        "minibatch_n": state.n, "loss_m": lm, "loss_e": le, "bar_loss_m": state.bar_m,
        "bar_loss_e": state.bar_e, "eta": weight, "aggregated_loss": total,
        "mean_reward": float(ro.reward[ro.has_reward].mean()),
        "mean_read_lead": float(leads.mean()),
    }
    return row, state


# -- full runs --------------------------------------------------------------

@dataclass
class Datasets:
    train: ParallelCorpus
    valid: ParallelCorpus
    test: ParallelCorpus


def load_datasets(config: RunConfig) -> Datasets:
    if config.task:
        spec = SyntheticTaskSpec(task=config.task, alphabet_size=config.alphabet_size,
                                 min_len=config.min_len, max_len=config.max_len,
                                 num_samples=config.num_samples, seed=config.seed)
        return Datasets(*synth_generate(spec).split())
    if not config.train_path:
        raise ValueError("config needs either task or train_path")
    train = read_corpus_file(Path(config.train_path))
    if config.valid_path:
        valid = read_corpus_file(Path(config.valid_path))
        test = read_corpus_file(Path(config.test_path)) if config.test_path else valid
        return Datasets(train, valid, test)
    return Datasets(*train.split())


def build_vocabs(config: RunConfig, train: ParallelCorpus):
    min_freq = 1 if config.task else config.min_freq
    return build_vocab(train.sources, min_freq), build_vocab(train.targets, min_freq)


def net_config(config: RunConfig, src_vocab: Vocabulary, trg_vocab: Vocabulary):
    return RLSTNetConfig(
        src_vocab_size=len(src_vocab), trg_vocab_size=len(trg_vocab), emb_dim=config.emb_dim,
        hidden_dim=config.hidden_dim, num_gru_layers=config.num_gru_layers,
        leaky_slope=config.leaky_slope, dropout_in=config.dropout_in,
        dropout_out=config.dropout_out, precision=config.precision)


def _check_out_dir(path: Path):
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ValueError(f"output directory {path} is not writable: {exc}") from None


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunResult:
    out_dir: Path
    metrics_path: Path
    best_path: Path
    best_epoch: int
    best_val_bleu: float
    val_bleu: list
    test_report: object = None


def train_run(config: RunConfig, progress=None) -> RunResult:
    """Train for ``config.epochs`` epochs, checkpointing every epoch.

    Writes ``metrics.csv``, ``epoch_NNN.rlst`` files, ``best.rlst`` (highest
    validation BLEU so far, first epoch wins ties), the vocabularies and a
    test-split report for the best model.
    """
    out = Path(config.out_dir)
    _check_out_dir(out)
    data = load_datasets(config)
    src_vocab, trg_vocab = build_vocabs(config, data.train)
    src_vocab.save(out / "src.vocab")
    trg_vocab.save(out / "trg.vocab")
    train_pairs = encode_pairs(data.train, src_vocab, trg_vocab)
    valid_pairs = encode_pairs(data.valid, src_vocab, trg_vocab)
    test_pairs = encode_pairs(data.test, src_vocab, trg_vocab)

    net = init_network(net_config(config, src_vocab, trg_vocab), seed=config.seed)
    optimizer = ad.Adam(lr=config.lr, weight_decay=config.weight_decay)
    schedule = EtaSchedule(config.eta_min, config.eta_max, config.n_minibatches(len(train_pairs)))
    hyper = Hyper(gamma=config.gamma, M=config.read_penalty, eps=config.epsilon,
                  tf_ratio=config.teacher_forcing, clip_norm=config.clip_norm)
    state = LossNormalizer(rho=config.rho)
    meta = {"config": config.to_dict(), "seed": config.seed}

    metrics_path = out / "metrics.csv"
    best_path = out / BEST_NAME
    best_bleu, best_epoch, val_history = -1.0, 0, []
    with open(metrics_path, "w", newline="", encoding="utf-8") as f:
        for line in config.lines():
            f.write(f"# {line}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for epoch in range(1, config.epochs + 1):
            order_rng = np.random.default_rng([config.seed, epoch])
            batches = make_batches(train_pairs, config.batch_size, order_rng)
            for k, batch in enumerate(batches):
                rng = np.random.default_rng([config.seed, epoch, k])
                row, state = train_minibatch(net, [Episode(x, y) for x, y in batch], state,
                                             schedule, optimizer, hyper, rng)
                row["epoch"] = epoch
                if k == len(batches) - 1:
                    report = evaluate(net, valid_pairs, smoothing=config.bleu_smoothing)
                    row["val_bleu"] = report.bleu
                    val_history.append(report.bleu)
                writer.writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])
            f.flush()
            bleu = val_history[-1]
            ckpt_meta = dict(meta, epoch=epoch, n=state.n, val_bleu=bleu,
                             normalizer=dataclasses.asdict(state))
            save_checkpoint(out / f"epoch_{epoch:03d}.rlst", net, optimizer.state,
                            src_vocab, trg_vocab, **ckpt_meta)
            if bleu > best_bleu:
                best_bleu, best_epoch = bleu, epoch
                save_checkpoint(best_path, net, optimizer.state, src_vocab, trg_vocab,
                                **ckpt_meta)
            if progress:
                progress(epoch, row, bleu)
            log.info("epoch %d: loss_m=%.4f val_bleu=%.4f", epoch, row["loss_m"], bleu)

    best = load_checkpoint(best_path, precision=config.precision)
    test_report = evaluate(best.net, test_pairs, smoothing=config.bleu_smoothing)
    _write_report(out / "test_report.csv", test_report)
    if config.figures:
        from .plotting import plot_learning_curves
        plot_learning_curves(metrics_path, out / "learning_curves.png")
    return RunResult(out, metrics_path, best_path, best_epoch, best_bleu, val_history,
                     test_report)


def _write_report(path, report):
    from .metrics import REPORT_COLUMNS
    row = report.as_row()
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        writer.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
