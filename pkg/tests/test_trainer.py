"""Trainer tests: masking statistics, schedule values, the accumulation
ramp, Adam, the pretraining loop contract, and finetuning."""

import math

import numpy as np
import pytest

from cramlab.budget import Budget
from cramlab.corpus import PackedDataset
from cramlab.errors import ConfigurationError, ContractError
from cramlab.model import ModelConfig, build
from cramlab.tensor import Tape, Tensor, add, mul
from cramlab.tokenizer import CLS_ID, MASK_ID, PAD_ID, SEP_ID
from cramlab.trainer import (
    AdamState,
    BatchRampConfig,
    CurvePoint,
    FinetuneProtocol,
    LossCurve,
    MaskingConfig,
    OptimizerConfig,
    ScheduleConfig,
    TaskExample,
    accumulation_at,
    adam_step,
    clip_gradients,
    encode_task_batch,
    finetune,
    load_task,
    lr_at,
    mask_batch,
    mask_mlm,
    matthews_correlation,
    planned_samples,
    pretrain,
)


def toy_dataset(n_rows=200, seq_len=16, vocab_size=64, fill=None, seed=0):
    rng = np.random.default_rng(seed)
    if fill is None:
        # ids from 5 keep the special range (and <mask> inputs) out
        seqs = rng.integers(5, vocab_size, size=(n_rows, seq_len), dtype=np.int32)
    else:
        seqs = np.full((n_rows, seq_len), fill, dtype=np.int32)
    counts = np.bincount(seqs.ravel(), minlength=vocab_size).astype(np.int64)
    return PackedDataset(seqs, seq_len, vocab_size, counts)


def tiny_model(seed=0, **overrides):
    kw = dict(num_layers=2, hidden_dim=32, num_heads=4, ffn_dim=64,
              vocab_size=64, seq_len=16)
    kw.update(overrides)
    return build(ModelConfig(**kw), seed=seed)


# ---------------------------------------------------------------------------
# Masking


def test_masking_selection_rate_large_sample():
    rng = np.random.default_rng(0)
    seqs = rng.integers(5, 4096, size=(800, 128), dtype=np.int64)
    _, positions, _ = mask_batch(seqs, MaskingConfig(), rng, 4096)
    assert seqs.size >= 100_000
    rate = positions.size / seqs.size
    assert abs(rate - 0.15) < 0.01


def test_masking_treatment_split_large_sample():
    rng = np.random.default_rng(1)
    seqs = rng.integers(5, 4096, size=(800, 128), dtype=np.int64)
    inputs, positions, labels = mask_batch(seqs, MaskingConfig(), rng, 4096)
    got = inputs.ravel()[positions]
    n = positions.size
    frac_mask = np.mean(got == MASK_ID)
    frac_keep = np.mean(got == labels)
    frac_random = np.mean((got != labels) & (got != MASK_ID))
    assert abs(frac_mask - 0.8) < 0.02
    # a random draw can hit the original id; with V=4096 that is < 1e-4
    assert abs(frac_keep - 0.1) < 0.02
    assert abs(frac_random - 0.1) < 0.02
    assert n > 0.14 * seqs.size


def test_masking_never_selects_sep_or_pad():
    rng = np.random.default_rng(2)
    seqs = rng.integers(5, 64, size=(50, 32), dtype=np.int64)
    seqs[:, 7] = SEP_ID
    seqs[:, 20:] = PAD_ID
    inputs, positions, _ = mask_batch(seqs, MaskingConfig(rate=1.0), rng, 64)
    cols = positions % 32
    assert not np.any(cols == 7)
    assert not np.any(cols >= 20)
    assert np.all(inputs[:, 7] == SEP_ID)
    assert np.all(inputs[:, 20:] == PAD_ID)


def test_masking_rate_one_selects_every_eligible_position():
    rng = np.random.default_rng(3)
    seqs = rng.integers(5, 64, size=(10, 16), dtype=np.int64)
    _, positions, labels = mask_batch(seqs, MaskingConfig(rate=1.0), rng, 64)
    assert positions.size == seqs.size
    np.testing.assert_array_equal(labels, seqs.ravel())


def test_masking_rate_zero_forces_one_untouched_position_per_row():
    rng = np.random.default_rng(4)
    seqs = rng.integers(5, 64, size=(12, 16), dtype=np.int64)
    inputs, positions, labels = mask_batch(seqs, MaskingConfig(rate=0.0), rng, 64)
    assert positions.size == 12
    rows = positions // 16
    np.testing.assert_array_equal(np.sort(rows), np.arange(12))
    np.testing.assert_array_equal(inputs, seqs)  # forced slots stay unchanged
    np.testing.assert_array_equal(labels, seqs.ravel()[positions])


def test_masking_skips_rows_with_no_eligible_slot():
    seqs = np.full((2, 8), SEP_ID, dtype=np.int64)
    seqs[1] = np.arange(5, 13)
    rng = np.random.default_rng(5)
    _, positions, _ = mask_batch(seqs, MaskingConfig(rate=0.0), rng, 64)
    assert positions.size == 1
    assert positions[0] // 8 == 1


def test_masking_labels_hold_original_ids():
    rng = np.random.default_rng(6)
    seqs = rng.integers(5, 4096, size=(40, 64), dtype=np.int64)
    inputs, positions, labels = mask_batch(seqs, MaskingConfig(), rng, 4096)
    np.testing.assert_array_equal(labels, seqs.ravel()[positions])
    changed = inputs.ravel()[positions] != labels
    assert changed.any()


def test_masking_positions_sorted_unique():
    rng = np.random.default_rng(7)
    seqs = rng.integers(5, 64, size=(30, 32), dtype=np.int64)
    _, positions, _ = mask_batch(seqs, MaskingConfig(), rng, 64)
    assert positions.dtype == np.int64
    assert np.all(np.diff(positions) > 0)


def test_masking_rejects_mask_token_in_input():
    seqs = np.full((2, 8), 9, dtype=np.int64)
    seqs[0, 3] = MASK_ID
    with pytest.raises(ContractError):
        mask_batch(seqs, MaskingConfig(), np.random.default_rng(0), 64)


def test_masking_deterministic_for_fixed_seed():
    seqs = np.random.default_rng(8).integers(5, 64, size=(20, 16), dtype=np.int64)
    a = mask_batch(seqs, MaskingConfig(), np.random.default_rng(42), 64)
    b = mask_batch(seqs, MaskingConfig(), np.random.default_rng(42), 64)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_mask_mlm_matches_batch_form():
    seq = np.random.default_rng(9).integers(5, 64, size=32, dtype=np.int64)
    inp1, pos1, lab1 = mask_mlm(seq, MaskingConfig(), np.random.default_rng(3), 64)
    inp2, pos2, lab2 = mask_batch(seq[None, :], MaskingConfig(), np.random.default_rng(3), 64)
    np.testing.assert_array_equal(inp1, inp2[0])
    np.testing.assert_array_equal(pos1, pos2)
    np.testing.assert_array_equal(lab1, lab2)


def test_masking_config_rejects_bad_split():
    with pytest.raises(ConfigurationError):
        MaskingConfig(p_mask=0.7, p_random=0.1, p_keep=0.1).validate()
    with pytest.raises(ConfigurationError):
        MaskingConfig(rate=1.5).validate()


# ---------------------------------------------------------------------------
# Schedule


def test_one_cycle_frozen_values():
    cfg = ScheduleConfig(kind="one_cycle", peak_lr=1e-3, peak_fraction=0.5,
                         total_steps=100)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(25, cfg) == 1e-3 * 0.5
    assert lr_at(50, cfg) == 1e-3
    assert lr_at(75, cfg) == 1e-3 * 0.5
    assert lr_at(100, cfg) == 0.0


def test_triangular_equals_one_cycle():
    a = ScheduleConfig(kind="one_cycle", peak_lr=2e-4, peak_fraction=0.3, total_steps=77)
    b = ScheduleConfig(kind="triangular", peak_lr=2e-4, peak_fraction=0.3, total_steps=77)
    for step in range(78):
        assert lr_at(step, a) == lr_at(step, b)


def test_cosine_decay_values():
    cfg = ScheduleConfig(kind="cosine_decay", peak_lr=1e-3, total_steps=100)
    assert lr_at(0, cfg) == pytest.approx(1e-3, abs=0)
    assert lr_at(50, cfg) == pytest.approx(5e-4, rel=1e-12)
    assert lr_at(100, cfg) == pytest.approx(0.0, abs=1e-19)
    assert lr_at(25, cfg) == pytest.approx(1e-3 * 0.5 * (1 + math.sqrt(0.5)), rel=1e-12)


def test_linear_decay_and_constant():
    lin = ScheduleConfig(kind="linear_decay", peak_lr=8e-4, total_steps=200)
    assert lr_at(0, lin) == 8e-4
    assert lr_at(50, lin) == pytest.approx(6e-4, rel=1e-12)
    assert lr_at(200, lin) == 0.0
    const = ScheduleConfig(kind="constant", peak_lr=3e-4, total_steps=10)
    assert all(lr_at(s, const) == 3e-4 for s in range(11))


def test_lr_at_range_and_config_errors():
    cfg = ScheduleConfig(total_steps=10)
    with pytest.raises(ContractError):
        lr_at(-1, cfg)
    with pytest.raises(ContractError):
        lr_at(11, cfg)
    with pytest.raises(ContractError):
        lr_at(0, ScheduleConfig(total_steps=0))
    with pytest.raises(ConfigurationError):
        lr_at(0, ScheduleConfig(kind="warmup_decay", total_steps=10))
    with pytest.raises(ConfigurationError):
        ScheduleConfig(peak_fraction=1.0, total_steps=10).validate()
    with pytest.raises(ConfigurationError):
        ScheduleConfig(peak_lr=0.0, total_steps=10).validate()


# ---------------------------------------------------------------------------
# Accumulation ramp


def test_ramp_factor_rounds_half_up():
    assert BatchRampConfig(micro_batch=2, final_batch=33).factor() == 17
    assert BatchRampConfig(micro_batch=2, final_batch=7).factor() == 4
    assert BatchRampConfig(micro_batch=8, final_batch=8).factor() == 1


def test_accumulation_ramp_shape():
    cfg = BatchRampConfig(micro_batch=8, final_batch=32, ramp_end_fraction=0.5)
    total = 12
    values = [accumulation_at(s, cfg, total) for s in range(total)]
    assert values == [1, 2, 2, 3, 3, 4, 4, 4, 4, 4, 4, 4]
    assert values == sorted(values)


def test_accumulation_saturates_at_ramp_end():
    cfg = BatchRampConfig(micro_batch=4, final_batch=64, ramp_end_fraction=0.6)
    assert accumulation_at(60, cfg, 100) == 16
    assert accumulation_at(99, cfg, 100) == 16
    zero_ramp = BatchRampConfig(micro_batch=4, final_batch=64, ramp_end_fraction=0.0)
    assert accumulation_at(0, zero_ramp, 100) == 16


def test_planned_samples_hand_value():
    sched = ScheduleConfig(total_steps=12)
    ramp = BatchRampConfig(micro_batch=8, final_batch=32, ramp_end_fraction=0.5)
    # sum of per-step accumulation [1,2,2,3,3,4,4,...] times micro
    assert planned_samples(sched, ramp) == 312


def test_ramp_config_errors():
    with pytest.raises(ConfigurationError):
        BatchRampConfig(micro_batch=0).validate()
    with pytest.raises(ConfigurationError):
        BatchRampConfig(micro_batch=16, final_batch=8).validate()
    with pytest.raises(ContractError):
        accumulation_at(0, BatchRampConfig(), 0)


# ---------------------------------------------------------------------------
# Optimizer


def test_adam_first_step_closed_form():
    g = 0.37
    p = Tensor(np.array([2.0], np.float32), requires_grad=True)
    p.grad = np.array([g], np.float32)
    state = AdamState()
    cfg = OptimizerConfig(weight_decay=0.0)
    adam_step({"w": p}, state, 1e-3, cfg)
    # bias correction cancels on step one: update = lr * g / (|g| + eps)
    expected = 2.0 - 1e-3 * g / (abs(g) + cfg.eps)
    assert p.data[0] == pytest.approx(expected, rel=1e-6)
    assert state.t == 1


def test_adam_decay_applies_before_update_and_respects_exemption():
    w = Tensor(np.array([1.0, -2.0], np.float32), requires_grad=True)
    norm_g = Tensor(np.array([1.0, 1.0], np.float32), requires_grad=True)
    w.grad = np.zeros(2, np.float32)
    norm_g.grad = np.zeros(2, np.float32)
    cfg = OptimizerConfig(weight_decay=0.01)
    adam_step({"w": w, "norm_g": norm_g}, AdamState(), 0.5, cfg,
              decay_exempt=lambda name: name == "norm_g")
    # zero gradient: the moment update is exactly zero, decay is all that acts
    np.testing.assert_allclose(w.data, [1.0 * (1 - 0.005), -2.0 * (1 - 0.005)], rtol=1e-6)
    np.testing.assert_array_equal(norm_g.data, [1.0, 1.0])


def test_adam_skips_params_without_grad():
    p = Tensor(np.array([5.0], np.float32), requires_grad=True)
    state = AdamState()
    adam_step({"w": p}, state, 1e-2, OptimizerConfig())
    assert p.data[0] == 5.0
    assert "w" not in state.m


def test_adam_rejects_non_finite_gradient():
    p = Tensor(np.array([1.0], np.float32), requires_grad=True)
    p.grad = np.array([np.inf], np.float32)
    with pytest.raises(FloatingPointError):
        adam_step({"w": p}, AdamState(), 1e-3, OptimizerConfig())


def test_adam_converges_on_quadratic_bowl():
    p = Tensor(np.array([8.0], np.float32), requires_grad=True)
    state = AdamState()
    cfg = OptimizerConfig(weight_decay=0.0, clip_norm=None)
    for _ in range(200):
        p.zero_grad()
        with Tape() as tape:
            d = add(p, -3.0)
            loss = mul(d, d)
            tape.backward(loss)
        adam_step({"p": p}, state, 0.1, cfg)
    assert abs(float(p.data[0]) - 3.0) < 0.05


def test_clip_rescales_to_threshold():
    a = np.array([3.0], np.float32)
    b = np.array([4.0], np.float32)
    norm = clip_gradients([a, b], 0.5)
    assert norm == pytest.approx(5.0, rel=1e-7)
    np.testing.assert_allclose(a, [0.3], rtol=1e-6)
    np.testing.assert_allclose(b, [0.4], rtol=1e-6)


def test_clip_leaves_small_gradients_alone():
    a = np.array([0.1, 0.2], np.float32)
    norm = clip_gradients([a, None], 10.0)
    assert norm == pytest.approx(math.sqrt(0.05), rel=1e-6)
    np.testing.assert_array_equal(a, np.array([0.1, 0.2], np.float32))


def test_optimizer_config_errors():
    with pytest.raises(ConfigurationError):
        OptimizerConfig(beta1=1.0).validate()
    with pytest.raises(ConfigurationError):
        OptimizerConfig(eps=0.0).validate()
    with pytest.raises(ConfigurationError):
        OptimizerConfig(clip_norm=0.0).validate()


# ---------------------------------------------------------------------------
# Loss curve


def test_curve_csv_round_trip_is_exact():
    curve = LossCurve()
    curve.append(CurvePoint(0, 0, 0.0, math.log(32768.0), 0.0))
    curve.append(CurvePoint(50, 12800, 0.1 + 0.2, 7.123456789012345, 1e-17))
    curve.append(CurvePoint(100, 25600, 1e-3, 6.5, 2.5))
    text = curve.to_csv_text()
    path_free = [ln.split(",") for ln in text.strip().splitlines()[1:]]
    assert len(path_free) == 3
    back = LossCurve([CurvePoint(int(s), int(t), float(lr), float(loss), float(sec))
                      for s, t, lr, loss, sec in path_free])
    for p, q in zip(curve.points, back.points):
        assert (p.step, p.tokens, p.lr, p.loss, p.seconds) == \
            (q.step, q.tokens, q.lr, q.loss, q.seconds)


def test_curve_file_round_trip(tmp_path):
    curve = LossCurve([CurvePoint(0, 0, 0.0, 8.3177, 0.0),
                       CurvePoint(10, 1280, 5e-4, 7.9, 0.0)])
    path = str(tmp_path / "curve.csv")
    curve.to_csv(path)
    back = LossCurve.from_csv(path)
    assert back.to_csv_text() == curve.to_csv_text()


def test_curve_rejects_non_monotonic_points():
    curve = LossCurve([CurvePoint(0, 100, 0.0, 1.0, 1.0)])
    with pytest.raises(ContractError):
        curve.append(CurvePoint(1, 100, 0.0, 1.0, 2.0))
    with pytest.raises(ContractError):
        curve.append(CurvePoint(1, 200, 0.0, 1.0, 0.5))


def test_curve_rejects_foreign_header(tmp_path):
    path = tmp_path / "curve.csv"
    path.write_text("step,tokens,loss\n0,0,1.0\n")
    with pytest.raises(ContractError):
        LossCurve.from_csv(str(path))


# ---------------------------------------------------------------------------
# Pretraining loop


def run_small(model, data, total_steps, interval=4, seed=11, micro=8,
              final=None, ramp_end=0.5, peak_lr=1e-3, checkpoint=None):
    return pretrain(
        model, data,
        schedule=ScheduleConfig(kind="one_cycle", peak_lr=peak_lr,
                                total_steps=total_steps),
        ramp=BatchRampConfig(micro_batch=micro, final_batch=final or micro,
                             ramp_end_fraction=ramp_end),
        optimizer=OptimizerConfig(),
        masking=MaskingConfig(),
        budget=Budget(kind="steps", amount=total_steps),
        seed=seed,
        curve_interval=interval,
        checkpoint_path=checkpoint,
    )


def test_pretrain_loss_decreases_on_constant_data():
    model = tiny_model(seed=1)
    data = toy_dataset(n_rows=400, fill=7)
    res = run_small(model, data, total_steps=40)
    pts = res.curve.points
    assert pts[0].step == 0
    assert pts[-1].loss < pts[0].loss


def test_pretrain_curve_steps_lr_tokens_and_seconds():
    model = tiny_model(seed=2)
    data = toy_dataset(n_rows=200)
    res = run_small(model, data, total_steps=10, interval=4)
    pts = res.curve.points
    assert [p.step for p in pts] == [0, 4, 8, 10]
    sched = ScheduleConfig(kind="one_cycle", peak_lr=1e-3, total_steps=10)
    # the recorded lr is the one used by the most recent update
    for p in pts[1:]:
        assert p.lr == lr_at(p.step - 1, sched)
    for p in pts:
        assert p.seconds == 0.0
    np.testing.assert_array_equal([p.tokens for p in pts],
                                  [0, 4 * 128, 8 * 128, 10 * 128])
    assert res.steps == 10
    assert res.tokens == 10 * 8 * 16


def test_pretrain_conserves_planned_samples():
    model = tiny_model(seed=3)
    data = toy_dataset(n_rows=400)
    sched = ScheduleConfig(total_steps=12)
    ramp = BatchRampConfig(micro_batch=8, final_batch=32, ramp_end_fraction=0.5)
    res = run_small(model, data, total_steps=12, final=32)
    assert res.samples == planned_samples(sched, ramp) == 312
    assert res.tokens == 312 * 16


def test_pretrain_single_epoch_stops_when_data_runs_out():
    model = tiny_model(seed=4)
    data = toy_dataset(n_rows=40)
    res = run_small(model, data, total_steps=100, interval=3)
    assert res.steps == 5  # 40 rows / micro 8, never revisited
    assert res.curve.points[-1].step == 5
    assert res.samples == 40


def test_pretrain_is_deterministic_bit_for_bit(tmp_path):
    data = toy_dataset(n_rows=200, seed=5)
    texts, blobs = [], []
    for run in range(2):
        model = tiny_model(seed=9)
        ckpt = str(tmp_path / f"m{run}.ckpt")
        res = run_small(model, data, total_steps=12, checkpoint=ckpt)
        texts.append(res.curve.to_csv_text())
        blobs.append((tmp_path / f"m{run}.ckpt").read_bytes())
    assert texts[0] == texts[1]
    assert blobs[0] == blobs[1]


def test_pretrain_aborts_and_restores_on_divergence():
    model = tiny_model(seed=6)
    data = toy_dataset(n_rows=800)
    res = pretrain(
        model, data,
        schedule=ScheduleConfig(kind="constant", peak_lr=1e4, total_steps=40),
        ramp=BatchRampConfig(micro_batch=8, final_batch=8),
        optimizer=OptimizerConfig(weight_decay=0.5),
        masking=MaskingConfig(),
        budget=Budget(kind="steps", amount=40),
        seed=13,
        curve_interval=5,
    )
    assert res.aborted
    assert "non-finite" in res.abort_reason
    assert res.steps == res.curve.points[-1].step
    for p in model.params.values():
        assert np.all(np.isfinite(p.data))


def test_pretrain_rejects_dataset_smaller_than_micro_batch():
    model = tiny_model(seed=7)
    data = toy_dataset(n_rows=4)
    with pytest.raises(ConfigurationError):
        run_small(model, data, total_steps=5)


def test_pretrain_wallclock_mode_records_elapsed_seconds():
    model = tiny_model(seed=8)
    data = toy_dataset(n_rows=4000)
    res = pretrain(
        model, data,
        schedule=ScheduleConfig(kind="one_cycle", peak_lr=1e-3),
        ramp=BatchRampConfig(micro_batch=8, final_batch=8),
        optimizer=OptimizerConfig(),
        masking=MaskingConfig(),
        budget=Budget(kind="seconds", amount=1.0),
        seed=21,
        curve_interval=10,
    )
    assert res.steps > 0
    assert res.curve.points[-1].seconds > 0.0
    assert res.ledger.wallclock_elapsed >= 1.0 or res.samples == data.sequence_count


# ---------------------------------------------------------------------------
# Task encoding and metrics


def test_load_task_parses_two_and_three_columns(tmp_path):
    path = tmp_path / "task.tsv"
    path.write_text("seal cove\tcoast\nseal cove\tstone ridge\tinland\n\n", encoding="utf-8")
    examples = load_task(str(path))
    assert len(examples) == 2
    assert examples[0].text == "seal cove" and examples[0].text2 is None
    assert examples[0].label == "coast"
    assert examples[1].text2 == "stone ridge" and examples[1].label == "inland"


def test_load_task_rejects_wrong_column_count(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("a\tb\tc\td\n", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_task(str(path))


def test_encode_task_batch_layout(wp_small):
    examples = [
        TaskExample("misty harbor", None, "x"),
        TaskExample("misty", "harbor", "y"),
    ]
    batch = encode_task_batch(wp_small, examples, 16)
    assert batch.shape == (2, 16)
    assert batch[0, 0] == CLS_ID and batch[1, 0] == CLS_ID
    first = wp_small.encode("misty")
    sep_col = 1 + len(first)
    assert batch[1, sep_col] == SEP_ID
    row0 = [CLS_ID] + wp_small.encode("misty harbor")
    np.testing.assert_array_equal(batch[0, :len(row0)], row0)
    assert np.all(batch[0, len(row0):] == PAD_ID)


def test_encode_task_batch_truncates(wp_small):
    long_text = " ".join(["harbor"] * 40)
    batch = encode_task_batch(wp_small, [TaskExample(long_text, None, "z")], 12)
    assert batch.shape == (1, 12)
    assert not np.any(batch == PAD_ID)


def test_matthews_perfect_inverted_constant():
    t = np.array([0, 1, 0, 1, 1, 0])
    assert matthews_correlation(t, t, 2) == pytest.approx(1.0)
    assert matthews_correlation(t, 1 - t, 2) == pytest.approx(-1.0)
    assert matthews_correlation(t, np.ones_like(t), 2) == 0.0


def test_matthews_matches_binary_formula():
    rng = np.random.default_rng(17)
    t = rng.integers(0, 2, 200)
    p = rng.integers(0, 2, 200)
    tp = float(np.sum((t == 1) & (p == 1)))
    tn = float(np.sum((t == 0) & (p == 0)))
    fp = float(np.sum((t == 0) & (p == 1)))
    fn = float(np.sum((t == 1) & (p == 0)))
    denom = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    expected = 0.0 if denom == 0 else (tp * tn - fp * fn) / denom
    assert matthews_correlation(t, p, 2) == pytest.approx(expected, abs=1e-12)


# ---------------------------------------------------------------------------
# Finetuning


def pick_separable_words(wp, lexicon, count=2):
    """First few lexicon words with distinct, unk-free encodings."""
    from cramlab.tokenizer import UNK_ID
    chosen, seen = [], set()
    for word in lexicon:
        ids = tuple(wp.encode(word))
        if UNK_ID in ids or ids in seen:
            continue
        seen.add(ids)
        chosen.append(word)
        if len(chosen) == count:
            return chosen
    raise AssertionError("lexicon/tokenizer fixture lost its coverage")


def test_finetune_separates_two_constant_classes(wp_small, lexicon):
    word_a, word_b = pick_separable_words(wp_small, lexicon)
    train = []
    for i in range(16):
        train.append(TaskExample(word_a, None, "alpha"))
        train.append(TaskExample(word_b, None, "beta"))
    model = tiny_model(seed=10, vocab_size=len(wp_small.vocab))
    metrics = finetune(
        model, wp_small, train,
        FinetuneProtocol(epochs=5, batch_size=8, lr=1e-2),
        seed=3, compute_matthews=True,
    )
    assert metrics.accuracy >= 0.9
    assert metrics.matthews is not None and metrics.matthews >= 0.8
    assert metrics.label_names == ["alpha", "beta"]
    assert metrics.n_train == 32 and metrics.n_eval == 32


def test_finetune_validation_errors(wp_small):
    model = tiny_model(seed=11, vocab_size=len(wp_small.vocab))
    with pytest.raises(ConfigurationError):
        finetune(model, wp_small, [], FinetuneProtocol())
    one_class = [TaskExample("misty", None, "only")] * 4
    with pytest.raises(ConfigurationError):
        finetune(model, wp_small, one_class, FinetuneProtocol())
    train = [TaskExample("misty", None, "a"), TaskExample("harbor", None, "b")]
    stray = [TaskExample("misty", None, "c")]
    with pytest.raises(ConfigurationError):
        finetune(model, wp_small, train, FinetuneProtocol(), eval_examples=stray)


def test_finetune_protocol_bounds():
    with pytest.raises(ConfigurationError):
        FinetuneProtocol(epochs=6).validate()
    with pytest.raises(ConfigurationError):
        FinetuneProtocol(epochs=0).validate()
    with pytest.raises(ConfigurationError):
        FinetuneProtocol(dropout=1.0).validate()
