"""The READ/WRITE decision process.

All episodes of a batch advance in lock-step: every row takes one action per
decision step until it terminates, after which it is carried along inactive.
Trajectories are stored as ``[step, row]`` arrays in a :class:`Rollout`;
:meth:`Rollout.records` gives the per-episode :class:`StepRecord` view.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import EOS, NULL, PAD
from .network import RLSTNet, initial_hidden, step

READ, WRITE = 0, 1
START = -1
INFER_READ_SLACK = 8


@dataclass(frozen=True)
class Episode:
    x: tuple
    y: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(int(k) for k in self.x))
        if self.y is not None:
            object.__setattr__(self, "y", tuple(int(k) for k in self.y))
        for name, seq in (("x", self.x), ("y", self.y)):
            if seq is None:
                continue
            if len(seq) < 1 or seq[-1] != EOS:
                raise ValueError(f"episode {name} must be non-empty and end with EOS: {seq}")
            if EOS in seq[:-1] or PAD in seq:
                raise ValueError(f"episode {name} has EOS or PAD inside the sequence: {seq}")

    @property
    def horizon(self):
        return len(self.x) + len(self.y)


def compose_input(action_prev, x, i, z_prev):
    """Network input pair ``(src_tok, trg_tok)`` after ``action_prev``."""
    if action_prev == START:
        return x[0], NULL
    if action_prev == READ:
        return (x[i] if i < len(x) else PAD), NULL
    return NULL, z_prev


def select_action(q_read, q_write, steps_remaining, writes_remaining, read_masked, eps, rng):
    """Epsilon-greedy choice with feasibility forcing.

    Works elementwise on scalars or arrays. Returns ``(action, forced,
    explored)``; ``forced`` is set when the horizon or the READ mask leaves
    WRITE as the only admissible action.
    """
    q_read = np.asarray(q_read)
    q_write = np.asarray(q_write)
    steps_remaining = np.asarray(steps_remaining)
    writes_remaining = np.asarray(writes_remaining)
    if np.any(writes_remaining > steps_remaining):
        raise ValueError("more writes remaining than decision steps left")
    greedy = np.where(q_write > q_read, WRITE, READ)
    forced = (steps_remaining == writes_remaining) | np.asarray(read_masked, dtype=bool)
    explored = ~forced & (rng.random(greedy.shape) < eps)
    action = np.where(forced, WRITE, np.where(explored, 1 - greedy, greedy))
    if action.ndim == 0:
        return int(action), bool(forced), bool(explored)
    return action.astype(np.int8), forced, explored


@dataclass(frozen=True)
class StepRecord:
    t: int
    action: int
    i_before: int
    j_before: int
    forced: bool
    explored: bool
    logits: np.ndarray
    q_read: float
    q_write: float
    reward: float | None
    reward_index: int | None
    src_in: int
    trg_in: int


@dataclass
class Rollout:
    """A batch of trajectories, one column per episode.

    ``outputs[t]`` is the head Tensor of step ``t`` (on the tape when recorded
    in a training context). ``y_len`` is all zeros for inference rollouts.
    """

    x_len: np.ndarray
    y: np.ndarray | None
    y_len: np.ndarray
    action: np.ndarray
    active: np.ndarray
    i_before: np.ndarray
    j_before: np.ndarray
    forced: np.ndarray
    explored: np.ndarray
    q_read: np.ndarray
    q_write: np.ndarray
    has_reward: np.ndarray
    reward: np.ndarray
    reward_index: np.ndarray
    src_in: np.ndarray
    trg_in: np.ndarray
    outputs: list
    tokens: list
    terminal: np.ndarray
    vocab_size: int

    @property
    def batch_size(self):
        return len(self.x_len)

    @property
    def num_steps(self):
        return self.action.shape[0]

    def logits(self, t):
        return self.outputs[t].value[:, :self.vocab_size]

    def steps_taken(self):
        return self.active.sum(axis=0)

    def records(self, b: int) -> list[StepRecord]:
        out = []
        for t in np.flatnonzero(self.active[:, b]):
            has = bool(self.has_reward[t, b])
            out.append(StepRecord(
                t=int(t), action=int(self.action[t, b]),
                i_before=int(self.i_before[t, b]), j_before=int(self.j_before[t, b]),
                forced=bool(self.forced[t, b]), explored=bool(self.explored[t, b]),
                logits=np.array(self.logits(t)[b], dtype=np.float64),
                q_read=float(self.q_read[t, b]), q_write=float(self.q_write[t, b]),
                reward=float(self.reward[t, b]) if has else None,
                reward_index=int(self.reward_index[t, b]) if has else None,
                src_in=int(self.src_in[t, b]), trg_in=int(self.trg_in[t, b]),
            ))
        return out

    @classmethod
    def assemble(cls, x_len, y, action, active, outputs, vocab_size, M,
                 forced=None, explored=None, src_in=None, trg_in=None,
                 tokens=None, terminal=None):
        """Derive counters, rewards and reward indices from an action table.

        ``y`` is a ``[rows, max_len]`` PAD-padded target array, or None at
        inference (no rewards are emitted then).
        """
        x_len = np.asarray(x_len)
        action = np.asarray(action)
        active = np.asarray(active, dtype=bool)
        T, B = action.shape
        is_read = active & (action == READ)
        is_write = active & (action == WRITE)
        i_before = np.cumsum(is_read, axis=0) - is_read
        j_before = np.cumsum(is_write, axis=0) - is_write
        values = np.stack([o.value for o in outputs]).astype(np.float64)
        q_read = values[:, :, vocab_size]
        q_write = values[:, :, vocab_size + 1]
        reward = np.zeros((T, B))
        if y is not None:
            y = np.asarray(y)
            y_len = (y != PAD).sum(axis=1)
            logits = values[:, :, :vocab_size]
            zmax = logits.max(axis=2, keepdims=True)
            log_norm = np.log(np.exp(logits - zmax).sum(axis=2)) + zmax[..., 0]
            j_idx = np.minimum(j_before, y.shape[1] - 1)
            target = y[np.arange(B)[None, :], j_idx]
            picked = np.take_along_axis(logits, target[..., None], axis=2)[..., 0]
            late_read = is_read & (i_before >= x_len[None, :])
            has_reward = is_write | late_read
            reward = np.where(is_write, picked - log_norm, 0.0)
            reward = np.where(late_read, -float(M), reward)
        else:
            y_len = np.zeros(B, dtype=int)
            has_reward = np.zeros((T, B), dtype=bool)
        reward_index = np.where(has_reward, np.cumsum(has_reward, axis=0) - 1, -1)
        zeros = np.zeros((T, B), dtype=bool)
        pads = np.full((T, B), PAD)
        if terminal is None:
            terminal = is_write.sum(axis=0) == y_len if y is not None else np.ones(B, dtype=bool)
        return cls(
            x_len=x_len, y=y, y_len=y_len, action=np.where(active, action, -1).astype(np.int8),
            active=active, i_before=i_before, j_before=j_before,
            forced=zeros.copy() if forced is None else np.asarray(forced) & active,
            explored=zeros.copy() if explored is None else np.asarray(explored) & active,
            q_read=q_read, q_write=q_write, has_reward=has_reward, reward=reward,
            reward_index=reward_index,
            src_in=pads if src_in is None else np.asarray(src_in),
            trg_in=pads.copy() if trg_in is None else np.asarray(trg_in),
            outputs=list(outputs), tokens=tokens if tokens is not None else [[] for _ in range(B)],
            terminal=np.asarray(terminal), vocab_size=vocab_size,
        )


def pad_sequences(seqs, width=None, fill=PAD):
    width = max(len(s) for s in seqs) if width is None else width
    out = np.full((len(seqs), width), fill, dtype=np.int64)
    for b, s in enumerate(seqs):
        out[b, :len(s)] = s
    return out


def _as_episodes(episodes):
    if isinstance(episodes, Episode):
        return [episodes]
    return [e if isinstance(e, Episode) else Episode(*e) for e in episodes]


def _run(net: RLSTNet, xs, ys, *, train, eps, tf_ratio, rng, M, max_out=None,
         mask_reads=True):
    B = len(xs)
    V = net.config.trg_vocab_size
    rows = np.arange(B)
    x_len = np.array([len(x) for x in xs])
    # one trailing PAD column so a read past the end sees PAD
    xpad = pad_sequences(xs, int(x_len.max()) + 1)
    if ys is not None:
        ypad = pad_sequences(ys)
        y_len = np.array([len(y) for y in ys])
        horizon = x_len + y_len
        teacher = rng.random(B) < tf_ratio
        read_cap = x_len + int(horizon.max())
    else:
        cap = 2 * x_len + 16 if max_out is None else np.full(B, int(max_out))
        read_cap = x_len if mask_reads else x_len + INFER_READ_SLACK
        horizon = read_cap + cap
    i = np.zeros(B, dtype=np.int64)
    j = np.zeros(B, dtype=np.int64)
    prev = np.full(B, START)
    z_prev = np.full(B, NULL)
    active = np.ones(B, dtype=bool)
    hidden = initial_hidden(net, B)
    tokens = [[] for _ in range(B)]
    terminal = np.zeros(B, dtype=bool)
    rec = {k: [] for k in ("action", "active", "forced", "explored", "src", "trg")}
    outputs = []
    dropout_rng = rng if train else None
    t = 0
    while active.any():
        src = np.where(prev == WRITE, NULL, xpad[rows, np.minimum(i, xpad.shape[1] - 1)])
        trg = np.where(prev == WRITE, z_prev, NULL)
        src = np.where(active, src, PAD)
        trg = np.where(active, trg, NULL)
        out, hidden = step(net, src, trg, hidden, train, dropout_rng)
        vals = out.value
        steps_left = np.where(active, horizon - t, 1)
        if ys is not None:
            writes_left = np.where(active, y_len - j, 0)
            masked = np.zeros(B, dtype=bool)
        else:
            writes_left = np.zeros(B, dtype=np.int64)
            masked = i >= read_cap
        action, forced, explored = select_action(
            vals[:, V], vals[:, V + 1], steps_left, writes_left, masked, eps, rng)
        emitted = vals[:, :V].argmax(axis=1)
        is_write = active & (action == WRITE)
        is_read = active & (action == READ)
        for b in np.flatnonzero(is_write):
            tokens[b].append(int(emitted[b]))
        if ys is not None:
            y_j = ypad[rows, np.minimum(j, ypad.shape[1] - 1)]
            fed = np.where(teacher, y_j, emitted)
        else:
            fed = emitted
        z_prev = np.where(is_write, fed, z_prev)
        prev = np.where(active, action, prev)
        i += is_read
        j += is_write
        for name, arr in (("action", action), ("active", active.copy()), ("forced", forced),
                          ("explored", explored), ("src", src), ("trg", trg)):
            rec[name].append(arr)
        outputs.append(out)
        if ys is not None:
            done = active & (j == y_len)
            terminal |= done
        else:
            wrote_eos = is_write & (emitted == EOS)
            capped = is_write & (j >= cap) & ~wrote_eos
            for b in np.flatnonzero(capped):
                tokens[b].append(EOS)
            done = active & (wrote_eos | capped)
            terminal |= done
        active = active & ~done
        t += 1
        if ys is not None and t > int(horizon.max()):
            raise RuntimeError("training rollout exceeded its horizon")
    st = {k: np.stack(v) for k, v in rec.items()}
    return Rollout.assemble(
        x_len, ypad if ys is not None else None, st["action"], st["active"], outputs, V, M,
        forced=st["forced"], explored=st["explored"], src_in=st["src"], trg_in=st["trg"],
        tokens=tokens, terminal=terminal)


def rollout_train(net: RLSTNet, episodes, eps=0.3, tf_ratio=1.0, rng=None, M=3.0,
                  train=True) -> Rollout:
    """Run training episodes until each has written exactly ``|y|`` tokens.

    Open a :class:`~rlst.autodiff.Tape` around the call to make the head
    outputs differentiable. ``train=False`` disables dropout.
    """
    episodes = _as_episodes(episodes)
    if any(e.y is None for e in episodes):
        raise ValueError("training episodes need a target sequence")
    rng = np.random.default_rng() if rng is None else rng
    return _run(net, [e.x for e in episodes], [e.y for e in episodes], train=train,
                eps=eps, tf_ratio=tf_ratio, rng=rng, M=M)


def infer_batch(net: RLSTNet, xs, max_out=None, mask_reads=True) -> Rollout:
    """Greedy on-line transduction of a batch of EOS-terminated sources."""
    xs = [tuple(int(k) for k in x) for x in xs]
    for x in xs:
        Episode(x)
    return _run(net, xs, None, train=False, eps=0.0, tf_ratio=0.0,
                rng=np.random.default_rng(0), M=0.0, max_out=max_out, mask_reads=mask_reads)


def rollout_infer(net: RLSTNet, x, max_out=None, mask_reads=True) -> list[int]:
    """Output tokens ``z`` (ending with EOS) for one source sequence."""
    return infer_batch(net, [x], max_out=max_out, mask_reads=mask_reads).tokens[0]


def constant_outputs(values) -> list:
    """Wrap per-step ``[rows, V+2]`` arrays as head Tensors (for replay/tests)."""
    return [ad.constant(v) for v in values]
