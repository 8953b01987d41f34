"""Budget-tied training recipe and the downstream finetuning protocol.

Pretraining: masked-token objective, bias-corrected Adam with decoupled
weight decay, global-norm clipping, a one-cycle learning rate tied to
the budget, and a linear micro-batch accumulation ramp. The loop is
single-epoch: sequences are consumed in dataset order and never
revisited. All randomness flows through one seeded generator, so a
fixed (seed, config, data) triple reproduces runs bit for bit in
step-budget mode.

Divergence handling: any non-finite loss or gradient aborts the run and
restores parameters from the snapshot taken at the last curve point.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .budget import Budget, BudgetLedger
from .errors import ConfigurationError, ContractError
from .model import Model, param_count
from .tensor import (
    Tape, Tensor, add, cross_entropy_from_logits, dropout, gather_rows,
    matmul, reshape, truncated_normal,
)
from .tokenizer import CLS_ID, MASK_ID, PAD_ID, SEP_ID, WordPieceModel

SCHEDULE_KINDS = ("one_cycle", "triangular", "cosine_decay", "linear_decay", "constant")


@dataclass
class MaskingConfig:
    rate: float = 0.15
    p_mask: float = 0.8
    p_random: float = 0.1
    p_keep: float = 0.1

    def validate(self) -> None:
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigurationError("masking rate must be within [0, 1]")
        total = self.p_mask + self.p_random + self.p_keep
        if abs(total - 1.0) > 1e-9:
            raise ConfigurationError("p_mask + p_random + p_keep must be 1")
        if min(self.p_mask, self.p_random, self.p_keep) < 0:
            raise ConfigurationError("treatment probabilities must be nonnegative")


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-12
    weight_decay: float = 0.01
    clip_norm: float | None = 0.5

    def validate(self) -> None:
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("betas must be in [0, 1)")
        if self.eps <= 0:
            raise ConfigurationError("eps must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be nonnegative")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigurationError("clip_norm must be positive when set")


@dataclass
class ScheduleConfig:
    kind: str = "one_cycle"
    peak_lr: float = 1e-3
    peak_fraction: float = 0.5
    total_steps: int = 0

    def validate(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if self.peak_lr <= 0:
            raise ConfigurationError("peak_lr must be positive")
        if not 0 < self.peak_fraction < 1:
            raise ConfigurationError("peak_fraction must be in (0, 1)")


@dataclass
class BatchRampConfig:
    micro_batch: int = 128
    final_batch: int = 4096
    ramp_end_fraction: float = 0.6

    def validate(self) -> None:
        if self.micro_batch < 1:
            raise ConfigurationError("micro_batch must be positive")
        if self.final_batch < self.micro_batch:
            raise ConfigurationError("final_batch must be >= micro_batch")
        if not 0 <= self.ramp_end_fraction <= 1:
            raise ConfigurationError("ramp_end_fraction must be in [0, 1]")

    def factor(self) -> int:
        return max(1, _round_half_up(self.final_batch / self.micro_batch))


@dataclass
class FinetuneProtocol:
    epochs: int = 5
    batch_size: int = 16
    lr: float = 4e-5
    dropout: float = 0.1

    def validate(self) -> None:
        if not 1 <= self.epochs <= 5:
            raise ConfigurationError("epochs must be within [1, 5]")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError("dropout must be in [0, 1)")


@dataclass
class CurvePoint:
    step: int
    tokens: int
    lr: float
    loss: float
    seconds: float


class LossCurve:
    """Ordered (tokens, loss) trajectory of one run."""

    def __init__(self, points: list[CurvePoint] | None = None):
        self.points: list[CurvePoint] = []
        for p in points or []:
            self.append(p)

    def append(self, point: CurvePoint) -> None:
        if self.points:
            last = self.points[-1]
            if point.tokens <= last.tokens:
                raise ContractError("curve tokens must be strictly increasing")
            if point.seconds < last.seconds:
                raise ContractError("curve seconds must be nondecreasing")
        self.points.append(point)

    def __len__(self) -> int:
        return len(self.points)

    def tokens(self) -> np.ndarray:
        return np.asarray([p.tokens for p in self.points], dtype=np.float64)

    def losses(self) -> np.ndarray:
        return np.asarray([p.loss for p in self.points], dtype=np.float64)

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.to_csv_text())

    def to_csv_text(self) -> str:
        lines = ["step,tokens,lr,loss,seconds"]
        for p in self.points:
            lines.append(f"{p.step},{p.tokens},{p.lr!r},{p.loss!r},{p.seconds!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, path: str) -> "LossCurve":
        with open(path, encoding="ascii") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        if not lines or lines[0] != "step,tokens,lr,loss,seconds":
            raise ContractError(f"{path}: not a curve file")
        curve = cls()
        for ln in lines[1:]:
            s, t, lr, loss, sec = ln.split(",")
            curve.append(CurvePoint(int(s), int(t), float(lr), float(loss), float(sec)))
        return curve


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def mask_batch(
    seqs: np.ndarray,
    cfg: MaskingConfig,
    rng: np.random.Generator,
    vocab_size: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Apply masked-token corruption to a (B, S) batch.

    Returns (inputs, flat_positions, labels). Positions index the
    flattened batch row-major; labels hold the original ids there.
    <sep> and <pad> are never selected. A row in which the independent
    rate-draw selects nothing gets one forced label position whose
    input stays unchanged.
    """
    cfg.validate()
    seqs = np.asarray(seqs)
    if (seqs == MASK_ID).any():
        raise ContractError("input sequences already contain <mask>")
    B, S = seqs.shape
    u_sel = rng.random((B, S))
    eligible = (seqs != SEP_ID) & (seqs != PAD_ID)
    selected = (u_sel < cfg.rate) & eligible

    forced: list[int] = []
    empty_rows = np.flatnonzero(~selected.any(axis=1))
    for row in empty_rows:
        cand = np.flatnonzero(eligible[row])
        if cand.size == 0:
            continue
        pos = int(cand[rng.integers(0, cand.size)])
        forced.append(row * S + pos)

    organic = np.flatnonzero(selected.ravel())
    inputs = seqs.copy()
    if organic.size:
        u_treat = rng.random(organic.size)
        to_mask = organic[u_treat < cfg.p_mask]
        to_random = organic[(u_treat >= cfg.p_mask) & (u_treat < cfg.p_mask + cfg.p_random)]
        inputs.ravel()[to_mask] = MASK_ID
        if to_random.size:
            inputs.ravel()[to_random] = rng.integers(0, vocab_size, to_random.size)

    positions = np.sort(np.concatenate([organic, np.asarray(forced, dtype=np.int64)]))
    positions = positions.astype(np.int64)
    labels = seqs.ravel()[positions]
    return inputs, positions, labels


def mask_mlm(
    seq: np.ndarray, cfg: MaskingConfig, rng: np.random.Generator, vocab_size: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Single-sequence form of mask_batch."""
    inputs, positions, labels = mask_batch(
        np.asarray(seq)[None, :], cfg, rng, vocab_size
    )
    return inputs[0], positions, labels


def lr_at(step: float, cfg: ScheduleConfig) -> float:
    """Learning rate at an (integer or fractional) step of the schedule."""
    cfg.validate()
    T = cfg.total_steps
    if T <= 0:
        raise ContractError("schedule total_steps not set")
    if step < 0 or step > T:
        raise ContractError(f"step {step} outside [0, {T}]")
    if cfg.kind == "constant":
        return cfg.peak_lr
    if cfg.kind == "cosine_decay":
        return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * step / T))
    if cfg.kind == "linear_decay":
        return cfg.peak_lr * (T - step) / T
    # one_cycle and triangular share the linear up/down shape.
    peak_step = cfg.peak_fraction * T
    if step <= peak_step:
        return cfg.peak_lr * (step / peak_step)
    return cfg.peak_lr * ((T - step) / (T - peak_step))


def accumulation_at(step: int, cfg: BatchRampConfig, total_steps: int) -> int:
    """Micro-batches accumulated at a step: 1 rising linearly to
    final/micro by ramp_end_fraction of the budget, constant after."""
    cfg.validate()
    if total_steps <= 0:
        raise ContractError("total_steps not set")
    factor = cfg.factor()
    ramp_end = cfg.ramp_end_fraction * total_steps
    if step >= ramp_end:
        return factor
    value = 1.0 + (factor - 1.0) * (step / ramp_end)
    return max(1, _round_half_up(value))


class AdamState:
    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    cfg: OptimizerConfig,
    decay_exempt=None,
) -> None:
    """Bias-corrected Adam with decoupled weight decay.

    Decay multiplies parameters by (1 - lr*wd) before the moment-based
    update; decay_exempt(name) skips it (layer norms, positional scale).
    """
    cfg.validate()
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        # float64 accumulation of float32 values cannot overflow, so a
        # non-finite sum means a non-finite gradient entry.
        if not math.isfinite(float(np.sum(g, dtype=np.float64))):
            raise FloatingPointError(f"non-finite gradient in {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        if cfg.weight_decay and not (decay_exempt and decay_exempt(name)):
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def clip_gradients(grads, clip_norm: float | None) -> float:
    """Scale gradients in place so the global L2 norm is at most
    clip_norm; returns the pre-clip norm."""
    grads = [g for g in grads if g is not None]
    sq = 0.0
    for g in grads:
        r = g.ravel()
        sq += float(np.einsum("i,i->", r, r, dtype=np.float64))
    total = math.sqrt(sq)
    if clip_norm is not None and total > clip_norm and total > 0:
        factor = clip_norm / total
        for g in grads:
            g *= factor
    return total


@dataclass
class PretrainResult:
    curve: LossCurve
    steps: int
    tokens: int
    samples: int
    aborted: bool = False
    abort_reason: str | None = None
    ledger: BudgetLedger | None = None


def planned_samples(schedule: ScheduleConfig, ramp: BatchRampConfig) -> int:
    """Sequences an uninterrupted step-budget run would consume."""
    total = 0
    for step in range(schedule.total_steps):
        total += accumulation_at(step, ramp, schedule.total_steps) * ramp.micro_batch
    return total


def pretrain(
    model: Model,
    dataset,
    *,
    schedule: ScheduleConfig,
    ramp: BatchRampConfig,
    optimizer: OptimizerConfig,
    masking: MaskingConfig,
    budget: Budget,
    seed: int = 0,
    curve_interval: int = 50,
    checkpoint_path: str | None = None,
) -> PretrainResult:
    """Run the pretraining loop until the budget or the data runs out.

    The model is updated in place. In step-budget mode the curve's
    seconds column is written as 0.0 so identical runs produce
    byte-identical curve files; wallclock mode records real elapsed
    time and estimates total_steps from a 30-second calibration phase,
    re-estimating every five minutes.
    """
    for c in (schedule, ramp, optimizer, masking, budget):
        c.validate()
    if dataset.sequence_count < ramp.micro_batch:
        raise ConfigurationError("dataset smaller than one micro-batch")
    if curve_interval < 1:
        raise ConfigurationError("curve_interval must be positive")

    rng = np.random.default_rng(seed)
    eval_rng = np.random.default_rng(seed + 1)
    wallclock_mode = budget.kind == "seconds"
    ledger = BudgetLedger(budget=budget, flops_per_token=6.0 * param_count(model.config))
    curve = LossCurve()
    state = AdamState()
    sched = ScheduleConfig(
        kind=schedule.kind,
        peak_lr=schedule.peak_lr,
        peak_fraction=schedule.peak_fraction,
        total_steps=schedule.total_steps,
    )

    if wallclock_mode:
        # Provisional horizon; refined after the calibration window.
        sched.total_steps = max(1, int(budget.amount * 10))
    else:
        sched.total_steps = int(budget.amount)

    start = time.monotonic()
    next_reestimate = 30.0
    seqs = dataset.sequences
    vocab_size = dataset.vocab_size
    cursor = 0
    step = 0
    samples = 0
    aborted = False
    abort_reason = None

    def elapsed() -> float:
        return time.monotonic() - start

    def curve_seconds() -> float:
        return elapsed() if wallclock_mode else 0.0

    def eval_first_batch_loss() -> float:
        rows = seqs[:ramp.micro_batch]
        inputs, positions, labels = mask_batch(rows, masking, eval_rng, vocab_size)
        logits = model.logits(inputs, masked_positions=positions)
        return float(cross_entropy_from_logits(logits, labels).item())

    if budget.amount > 0:
        curve.append(CurvePoint(0, 0, 0.0, eval_first_batch_loss(), curve_seconds()))
    last_good = model.snapshot()
    last_good_state = (0, 0, 0)

    # Overflow in a diverging step is reported through the finiteness
    # guard as FloatingPointError; numpy's own warnings just add noise.
    err_state = np.seterr(over="ignore", invalid="ignore", divide="ignore")
    try:
        while True:
            if not wallclock_mode and step >= sched.total_steps:
                break
            if wallclock_mode and elapsed() >= budget.amount:
                break
            if (wallclock_mode and step > 0
                    and (elapsed() >= next_reestimate
                         or step >= sched.total_steps)):
                rate = step / elapsed()
                remaining = max(0.0, budget.amount - elapsed())
                sched.total_steps = max(step + 1, step + int(rate * remaining))
                next_reestimate = elapsed() + 300.0

            acc = accumulation_at(step, ramp, sched.total_steps)
            if cursor + acc * ramp.micro_batch > seqs.shape[0]:
                break  # single epoch: not enough rows for a full step
            model.zero_grads()
            step_loss = 0.0
            for _ in range(acc):
                rows = seqs[cursor:cursor + ramp.micro_batch]
                cursor += ramp.micro_batch
                inputs, positions, labels = mask_batch(rows, masking, rng, vocab_size)
                with Tape() as tape:
                    logits = model.logits(inputs, masked_positions=positions)
                    loss = cross_entropy_from_logits(logits, labels)
                    scaled = loss * (1.0 / acc)
                    tape.backward(scaled)
                step_loss += loss.item() / acc
                ledger.record(tokens=rows.size)
            if not math.isfinite(step_loss):
                raise FloatingPointError("non-finite training loss")
            samples += acc * ramp.micro_batch
            clip_gradients(
                (p.grad for p in model.params.values()), optimizer.clip_norm
            )
            lr = lr_at(min(step, sched.total_steps), sched)
            adam_step(model.params, state, lr, optimizer, Model.decay_exempt)
            step += 1
            ledger.record(steps=1)
            if step % curve_interval == 0:
                curve.append(CurvePoint(step, ledger.tokens_ingested, lr,
                                        step_loss, curve_seconds()))
                last_good = model.snapshot()
                last_good_state = (step, ledger.tokens_ingested, samples)
            last_loss = step_loss
            last_lr = lr
    except FloatingPointError as exc:
        model.restore(last_good)
        aborted = True
        abort_reason = str(exc)
        step, tokens_done, samples = last_good_state
    else:
        tokens_done = ledger.tokens_ingested
        if step > 0 and step % curve_interval != 0:
            curve.append(CurvePoint(step, ledger.tokens_ingested, last_lr,
                                    last_loss, curve_seconds()))
    finally:
        np.seterr(**err_state)

    ledger.wallclock_elapsed = max(ledger.wallclock_elapsed, elapsed())
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    return PretrainResult(
        curve=curve,
        steps=step,
        tokens=tokens_done,
        samples=samples,
        aborted=aborted,
        abort_reason=abort_reason,
        ledger=ledger,
    )


# ---------------------------------------------------------------------------
# Finetuning


@dataclass
class TaskExample:
    text: str
    text2: str | None
    label: str


def load_task(path: str) -> list[TaskExample]:
    """Tab-separated rows: text[<tab>text2]<tab>label."""
    examples: list[TaskExample] = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) == 2:
                examples.append(TaskExample(cols[0], None, cols[1]))
            elif len(cols) == 3:
                examples.append(TaskExample(cols[0], cols[1], cols[2]))
            else:
                raise ConfigurationError(f"task row needs 2 or 3 columns: {line!r}")
    return examples


def encode_task_batch(
    wp: WordPieceModel, examples: list[TaskExample], seq_len: int
) -> np.ndarray:
    """<cls> text [<sep> text2], truncated to seq_len, padded with <pad>."""
    out = np.full((len(examples), seq_len), PAD_ID, dtype=np.int32)
    for i, ex in enumerate(examples):
        ids = [CLS_ID] + wp.encode(ex.text)
        if ex.text2 is not None:
            ids += [SEP_ID] + wp.encode(ex.text2)
        ids = ids[:seq_len]
        out[i, : len(ids)] = ids
    return out


@dataclass
class FinetuneMetrics:
    accuracy: float
    matthews: float | None
    n_train: int
    n_eval: int
    label_names: list[str] = field(default_factory=list)


def matthews_correlation(true_ids: np.ndarray, pred_ids: np.ndarray, n_classes: int) -> float:
    """Multiclass Matthews correlation from the confusion counts."""
    n = true_ids.size
    if n == 0:
        return 0.0
    correct = float(np.sum(true_ids == pred_ids))
    t_counts = np.bincount(true_ids, minlength=n_classes).astype(np.float64)
    p_counts = np.bincount(pred_ids, minlength=n_classes).astype(np.float64)
    cov_tp = correct * n - float(t_counts @ p_counts)
    cov_pp = float(n * n - p_counts @ p_counts)
    cov_tt = float(n * n - t_counts @ t_counts)
    if cov_pp <= 0 or cov_tt <= 0:
        return 0.0
    return cov_tp / math.sqrt(cov_pp * cov_tt)


def finetune(
    model: Model,
    wp: WordPieceModel,
    train_examples: list[TaskExample],
    protocol: FinetuneProtocol,
    seed: int = 0,
    eval_examples: list[TaskExample] | None = None,
    optimizer: OptimizerConfig | None = None,
    compute_matthews: bool = False,
) -> FinetuneMetrics:
    """Full-model finetuning with a fresh linear head on <cls>.

    Updates the model in place; callers comparing seeds should restore
    a parameter snapshot between calls. Reports accuracy on
    eval_examples (train set when absent).
    """
    protocol.validate()
    if not train_examples:
        raise ConfigurationError("empty task")
    optimizer = optimizer or OptimizerConfig()
    optimizer.validate()
    labels = sorted({ex.label for ex in train_examples})
    if len(labels) < 2:
        raise ConfigurationError("task needs at least two classes")
    label_id = {name: i for i, name in enumerate(labels)}
    eval_examples = eval_examples if eval_examples is not None else train_examples
    for ex in eval_examples:
        if ex.label not in label_id:
            raise ConfigurationError(f"eval label {ex.label!r} unseen in training")

    cfg = model.config
    rng = np.random.default_rng(seed)
    d = cfg.hidden_dim
    n_classes = len(labels)
    head_w = Tensor(truncated_normal((d, n_classes), 0.02, rng, model.dtype),
                    requires_grad=True, name="cls_head_w")
    head_b = Tensor(np.zeros(n_classes, model.dtype), requires_grad=True,
                    name="cls_head_b")
    trainable = dict(model.params)
    trainable["cls_head_w"] = head_w
    trainable["cls_head_b"] = head_b

    x_train = encode_task_batch(wp, train_examples, cfg.seq_len)
    y_train = np.asarray([label_id[ex.label] for ex in train_examples], dtype=np.int64)

    n = len(train_examples)
    bs = protocol.batch_size
    batches_per_epoch = (n + bs - 1) // bs
    total_steps = protocol.epochs * batches_per_epoch
    sched = ScheduleConfig(kind="cosine_decay", peak_lr=protocol.lr,
                           total_steps=total_steps)
    state = AdamState()

    def class_logits(ids_batch: np.ndarray, train_mode: bool) -> Tensor:
        key_mask = ids_batch != PAD_ID
        rate = protocol.dropout if train_mode else 0.0
        hidden = model.encode(ids_batch, key_mask=key_mask,
                              dropout_rate=rate, rng=rng if train_mode else None)
        B, S, _ = hidden.shape
        flat = reshape(hidden, (B * S, d))
        cls_h = gather_rows(flat, np.arange(B) * S)
        if rate:
            cls_h = dropout(cls_h, rate, rng)
        return add(matmul(cls_h, head_w), head_b)

    step = 0
    for _ in range(protocol.epochs):
        order = rng.permutation(n)
        for b in range(batches_per_epoch):
            rows = order[b * bs:(b + 1) * bs]
            for p in trainable.values():
                p.zero_grad()
            with Tape() as tape:
                logits = class_logits(x_train[rows], train_mode=True)
                loss = cross_entropy_from_logits(logits, y_train[rows])
                tape.backward(loss)
            clip_gradients((p.grad for p in trainable.values()), optimizer.clip_norm)
            lr = lr_at(min(step, total_steps), sched)
            adam_step(trainable, state, lr, optimizer, Model.decay_exempt)
            step += 1

    x_eval = encode_task_batch(wp, eval_examples, cfg.seq_len)
    y_eval = np.asarray([label_id[ex.label] for ex in eval_examples], dtype=np.int64)
    preds = np.empty_like(y_eval)
    for b in range(0, len(eval_examples), 64):
        logits = class_logits(x_eval[b:b + 64], train_mode=False)
        preds[b:b + 64] = np.argmax(logits.data, axis=1)
    accuracy = float(np.mean(preds == y_eval))
    mcc = matthews_correlation(y_eval, preds, n_classes) if compute_matthews else None
    return FinetuneMetrics(
        accuracy=accuracy,
        matthews=mcc,
        n_train=n,
        n_eval=len(eval_examples),
        label_names=labels,
    )
