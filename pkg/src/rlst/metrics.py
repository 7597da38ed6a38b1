"""Corpus BLEU, token accuracy, READ/WRITE timing traces and evaluation."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .data import EOS, PAD
from .episode import READ, WRITE, Rollout, infer_batch

log = logging.getLogger(__name__)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[k:k + n]) for k in range(len(tokens) - n + 1))


def bleu_stats(candidates, references, max_n=4):
    """Clipped n-gram matches and totals per order, plus corpus lengths."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates for {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = list(cand), list(ref)
        if not ref:
            raise ValueError("empty reference sentence")
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            c_counts = _ngrams(cand, n)
            r_counts = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r_counts[g]) for g, c in c_counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    return matches, totals, c_len, r_len


def corpus_bleu(candidates, references, max_n=4, smoothing="off") -> float:
    """Single-reference corpus BLEU in [0, 1] with uniform n-gram weights.

    ``smoothing="add-one"`` adds one to the numerator and denominator of the
    precisions of order two and above. An order for which the candidates
    hold no n-grams at all is dropped from the geometric mean.
    """
    if smoothing not in ("off", "add-one"):
        raise ValueError(f"unknown smoothing {smoothing!r}")
    matches, totals, c_len, r_len = bleu_stats(candidates, references, max_n)
    if c_len == 0:
        return 0.0
    # orders longer than every candidate have no n-grams and are left out
    orders = [n for n in range(max_n) if totals[n] > 0]
    log_p = 0.0
    for n in orders:
        num, den = matches[n], totals[n]
        if smoothing == "add-one" and n > 0:
            num, den = num + 1, den + 1
        if num == 0:
            return 0.0
        log_p += math.log(num / den) / len(orders)
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


def strip_special(ids):
    return [int(k) for k in ids if int(k) not in (EOS, PAD)]


def token_accuracy(candidates, references) -> float:
    """Position-wise matches over the total number of reference tokens."""
    hits = total = 0
    for cand, ref in zip(candidates, references):
        hits += sum(a == b for a, b in zip(cand, ref))
        total += len(ref)
    return hits / total if total else 0.0


@dataclass(frozen=True)
class TraceRow:
    t: int
    reads: int
    writes: int
    active: int


TRACE_COLUMNS = ("t", "reads", "writes", "active")


def trace_actions(rollout: Rollout, rows=None) -> list[TraceRow]:
    """Per-step counts of READ and WRITE actions over a batch of rollouts.

    ``rows`` selects episodes (e.g. those with a given source length).
    """
    cols = np.arange(rollout.batch_size) if rows is None else np.asarray(rows, dtype=int)
    if cols.size == 0:
        log.warning("trace_actions: no rollouts selected")
        return []
    act = rollout.action[:, cols]
    alive = rollout.active[:, cols]
    out = []
    for t in range(act.shape[0]):
        n_alive = int(alive[t].sum())
        if n_alive == 0:
            break
        out.append(TraceRow(t, int((alive[t] & (act[t] == READ)).sum()),
                            int((alive[t] & (act[t] == WRITE)).sum()), n_alive))
    return out


def first_write_steps(rollout: Rollout):
    is_write = rollout.active & (rollout.action == WRITE)
    return is_write.argmax(axis=0)


def read_leads(rollout: Rollout):
    """``i - j`` before every active step, flattened over the batch."""
    return (rollout.i_before - rollout.j_before)[rollout.active]


@dataclass(frozen=True)
class EvalReport:
    n: int
    bleu: float
    token_accuracy: float
    mean_read_lead: float
    mean_len_ratio: float
    mean_first_write: float
    mean_first_write_frac: float
    smoothing: str

    def as_row(self):
        row = asdict(self)
        row["bleu100"] = 100.0 * self.bleu
        return row


REPORT_COLUMNS = ("n", "bleu", "bleu100", "token_accuracy", "mean_read_lead", "mean_len_ratio",
                  "mean_first_write", "mean_first_write_frac", "smoothing")


def infer_dataset(net, sources, batch_size=256, max_out=None):
    """Greedy inference over many sources, in batches of similar length."""
    order = sorted(range(len(sources)), key=lambda k: len(sources[k]))
    rollouts = [None] * len(sources)
    for a in range(0, len(order), batch_size):
        idx = order[a:a + batch_size]
        ro = infer_batch(net, [sources[k] for k in idx], max_out=max_out)
        for col, k in enumerate(idx):
            rollouts[k] = (ro, col)
    return rollouts


def evaluate(net, pairs, max_out=None, smoothing="off", batch_size=256) -> EvalReport:
    """Greedy on-line decoding of ``(x, y)`` id pairs, scored against ``y``."""
    sources = [x for x, _ in pairs]
    refs = [list(y) for _, y in pairs]
    results = infer_dataset(net, sources, batch_size=batch_size, max_out=max_out)
    cands, leads, first, frac = [], [], [], []
    for (ro, col), x in zip(results, sources):
        cands.append(ro.tokens[col])
        leads.append(read_leads_col(ro, col))
        fw = int(first_write_steps(ro)[col])
        first.append(fw)
        frac.append(fw / len(x))
    bleu = corpus_bleu([strip_special(c) for c in cands], [strip_special(r) for r in refs],
                       smoothing=smoothing)
    all_leads = np.concatenate(leads) if leads else np.zeros(0)
    return EvalReport(
        n=len(pairs), bleu=bleu, token_accuracy=token_accuracy(cands, refs),
        mean_read_lead=float(all_leads.mean()) if all_leads.size else 0.0,
        mean_len_ratio=float(np.mean([len(c) / len(r) for c, r in zip(cands, refs)])),
        mean_first_write=float(np.mean(first)), mean_first_write_frac=float(np.mean(frac)),
        smoothing=smoothing)


def read_leads_col(rollout: Rollout, col: int):
    alive = rollout.active[:, col]
    return (rollout.i_before[:, col] - rollout.j_before[:, col])[alive]
