import numpy as np
import pytest

from coassembly.geometry import Capsule, EnvironmentState
from coassembly.intention import (
    EXPERT,
    FEATURE_DIM,
    ORIGINAL,
    PSEUDO,
    AttackConfig,
    LabeledDataset,
    MLPParams,
    PredictionSmoother,
    TrainConfig,
    TrainingDivergedError,
    WRIST_CAPSULE,
    accuracy,
    attack,
    featurize,
    forward,
    geometric_expert_oracle,
    iada_train,
    init_params,
    input_gradient,
    load_model,
    loss_and_grads,
    predict,
    save_model,
    softmax,
    train,
)
from coassembly.labels import ALL_LABELS, IDLE, label_from_index, label_index, reach_label

DT = 1.0 / 30.0


def env_at(wrist, t) -> EnvironmentState:
    wrist = np.asarray(wrist, dtype=float)
    cap = Capsule(wrist, wrist + [0.0, 0.0, -0.09], 0.04)
    return EnvironmentState(human_capsules={WRIST_CAPSULE: cap},
                            human_velocities={}, timestamp=t)


def window_along(start, velocity, ticks=5):
    start = np.asarray(start, dtype=float)
    velocity = np.asarray(velocity, dtype=float)
    return [env_at(start + velocity * (k * DT), k * DT) for k in range(ticks)]


BLOCKS = {i + 1: np.array([0.4 + 0.1 * (i % 4), -0.3 + 0.2 * (i // 4), 0.02])
          for i in range(12)}


# ---------------------------------------------------------------------------
# featurize
# ---------------------------------------------------------------------------

def test_stationary_wrist_has_zero_speed_features():
    x = featurize(window_along([0.5, 0.0, 0.2], [0, 0, 0]), BLOCKS)
    speeds = x[3:48:4]
    np.testing.assert_allclose(speeds, 0.0, atol=1e-12)
    assert x[-1] == 0.0


def test_straight_approach_speed_is_exact_and_bounds_others():
    target = 5
    pos = BLOCKS[target]
    start = pos + np.array([-0.3, 0.0, 0.0])
    x = featurize(window_along(start, [0.5, 0.0, 0.0]), BLOCKS)
    speeds = x[3:48:4]
    assert speeds[target - 1] == pytest.approx(0.5, abs=1e-9)
    assert np.all(speeds <= 0.5 + 1e-9)
    assert x[-1] == pytest.approx(0.5, abs=1e-9)


def test_featurize_matches_single_pass_reference():
    rng = np.random.default_rng(2)
    for _ in range(20):
        start = rng.uniform(-0.5, 0.8, 3)
        vel = rng.uniform(-0.6, 0.6, 3)
        window = window_along(start, vel)
        got = featurize(window, BLOCKS)
        # independent reference: explicit loop over the window ends
        w_new = window[-1].human_capsules[WRIST_CAPSULE].a
        w_old = window[0].human_capsules[WRIST_CAPSULE].a
        dt = window[-1].timestamp - window[0].timestamp
        want = []
        for b in range(1, 13):
            p = BLOCKS[b]
            want.extend(p - w_new)
            want.append((np.linalg.norm(p - w_old) - np.linalg.norm(p - w_new)) / dt)
        want.append(np.linalg.norm(w_new - w_old) / dt)
        np.testing.assert_allclose(got, np.array(want), atol=1e-9)


def test_featurize_pads_short_windows():
    single = [env_at([0.4, 0.1, 0.2], 0.0)]
    x = featurize(single, BLOCKS)
    np.testing.assert_allclose(x[3:48:4], 0.0)


def test_inserted_blocks_contribute_zero_features():
    blocks = dict(BLOCKS)
    del blocks[3]
    x = featurize(window_along([0.5, 0, 0.2], [0.1, 0, 0]), blocks)
    np.testing.assert_allclose(x[8:12], 0.0)


# ---------------------------------------------------------------------------
# predict / softmax
# ---------------------------------------------------------------------------

def zeroed_head_params(seed=0) -> MLPParams:
    params = init_params(seed)
    params.weights[-1][:] = 0.0
    params.biases[-1][:] = 0.0
    return params


def test_uniform_logits_give_uniform_confidence_and_low_index_label():
    params = zeroed_head_params()
    label, conf = predict(params, np.zeros(FEATURE_DIM))
    assert label == ALL_LABELS[0]
    assert conf == pytest.approx(1.0 / 13.0)


def test_predict_invariant_to_logit_shift():
    params = init_params(3)
    x = np.random.default_rng(0).normal(size=FEATURE_DIM)
    label0, conf0 = predict(params, x)
    shifted = params.copy()
    shifted.biases[-1] += 7.3
    label1, conf1 = predict(shifted, x)
    assert label0 == label1
    assert conf1 == pytest.approx(conf0, abs=1e-12)


def test_predict_rejects_non_finite_input():
    x = np.zeros(FEATURE_DIM)
    x[3] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        predict(init_params(0), x)


def test_softmax_normalized_and_strictly_inside_unit_interval():
    # scale stays inside the float64 range where 1 - p is representable
    rng = np.random.default_rng(4)
    logits = rng.normal(scale=3.0, size=(200, 13))
    p = softmax(logits)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(p > 0.0)
    assert np.all(p < 1.0)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_backprop_matches_central_finite_differences():
    rng = np.random.default_rng(8)
    params = init_params(8)
    X = rng.normal(size=(10, FEATURE_DIM))
    y = rng.integers(0, 13, size=10)
    _, gw, gb, _ = loss_and_grads(params, X, y)
    h = 1e-5
    for _ in range(20):
        layer = int(rng.integers(0, len(params.weights)))
        use_bias = bool(rng.integers(0, 2))
        if use_bias:
            i = int(rng.integers(0, params.biases[layer].size))
            params.biases[layer][i] += h
            lp = loss_and_grads(params, X, y)[0]
            params.biases[layer][i] -= 2 * h
            lm = loss_and_grads(params, X, y)[0]
            params.biases[layer][i] += h
            analytic = gb[layer][i]
        else:
            i = int(rng.integers(0, params.weights[layer].shape[0]))
            j = int(rng.integers(0, params.weights[layer].shape[1]))
            params.weights[layer][i, j] += h
            lp = loss_and_grads(params, X, y)[0]
            params.weights[layer][i, j] -= 2 * h
            lm = loss_and_grads(params, X, y)[0]
            params.weights[layer][i, j] += h
            analytic = gw[layer][i, j]
        fd = (lp - lm) / (2 * h)
        denom = max(abs(fd), abs(analytic), 1e-8)
        assert abs(fd - analytic) / denom < 1e-4


def test_input_gradient_sign_matches_finite_differences():
    rng = np.random.default_rng(9)
    agree = total = 0
    for _ in range(10):
        params = init_params(int(rng.integers(0, 1000)))
        x = rng.normal(size=FEATURE_DIM)
        y = np.array([int(rng.integers(0, 13))])
        g = input_gradient(params, x[None, :], y)[0]
        h = 1e-6
        for j in range(0, FEATURE_DIM, 5):
            if abs(g[j]) <= 1e-6:
                continue
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            lp = loss_and_grads(params, xp[None, :], y)[0]
            lm = loss_and_grads(params, xm[None, :], y)[0]
            fd = (lp - lm) / (2 * h)
            total += 1
            if np.sign(fd) == np.sign(g[j]):
                agree += 1
    assert total > 50
    assert agree / total >= 0.95


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def synthetic_dataset(n: int, seed: int) -> LabeledDataset:
    """Reach-like windows toward a labeled block, or idle drift.

    Windows where a second block is approached almost as fast as the target
    (collinear alignments) are re-drawn: the feature genuinely cannot
    determine the label there, mirroring the expert oracle's reject rule.
    """
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    while len(feats) < n:
        start = rng.uniform([0.2, -0.5, 0.0], [0.9, 0.5, 0.4])
        if rng.uniform() < 0.25:
            label = IDLE
            vel = rng.uniform(-0.03, 0.03, 3)
            x = featurize(window_along(start, vel), BLOCKS)
        else:
            b = int(rng.integers(1, 13))
            label = reach_label(b)
            to = BLOCKS[b] - start
            vel = to / np.linalg.norm(to) * rng.uniform(0.4, 1.0)
            x = featurize(window_along(start, vel), BLOCKS)
            speeds = np.sort(x[3:48:4])
            if speeds[-1] - speeds[-2] < 0.15 * speeds[-1]:
                continue
        feats.append(x)
        labels.append(label)
    return LabeledDataset(np.array(feats), labels, [ORIGINAL] * n)


def params_equal(a: MLPParams, b: MLPParams) -> bool:
    return (all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
            and all(np.array_equal(x, y) for x, y in zip(a.biases, b.biases)))


def test_single_point_memorization():
    data = synthetic_dataset(1, 0)
    params = train(data, TrainConfig(epochs=400, batch_size=1, learning_rate=0.2, seed=1))
    loss, *_ = loss_and_grads(params, data.features, data.label_indices())
    assert loss < 1e-3


def test_zero_learning_rate_keeps_initialization():
    data = synthetic_dataset(32, 1)
    params = train(data, TrainConfig(epochs=3, learning_rate=0.0, seed=5))
    assert params_equal(params, init_params(5))


def test_training_deterministic_given_seed():
    data = synthetic_dataset(128, 2)
    cfg = TrainConfig(epochs=5, seed=9)
    assert params_equal(train(data, cfg), train(data, cfg))


def test_training_reaches_high_accuracy_on_synthetic_set():
    data = synthetic_dataset(1500, 3)
    held = synthetic_dataset(400, 4)
    params = train(data, TrainConfig(epochs=120, seed=0))
    assert accuracy(params, data.features, data.label_indices()) >= 0.98
    assert accuracy(params, held.features, held.label_indices()) >= 0.95


def test_divergence_raises_with_diagnostics():
    data = synthetic_dataset(64, 5)
    with pytest.raises(TrainingDivergedError, match="non-finite"):
        train(data, TrainConfig(epochs=50, learning_rate=1e9, seed=0))


# ---------------------------------------------------------------------------
# attack
# ---------------------------------------------------------------------------

def test_attack_zero_budget_is_identity():
    params = init_params(1)
    x = np.random.default_rng(2).normal(size=FEATURE_DIM)
    np.testing.assert_array_equal(attack(params, x, "R_3", 0.0), x)


def test_attack_respects_box_and_never_decreases_loss():
    rng = np.random.default_rng(3)
    data = synthetic_dataset(200, 6)
    params = train(data, TrainConfig(epochs=20, seed=2))
    for _ in range(30):
        i = int(rng.integers(0, len(data)))
        x = data.features[i]
        label = data.labels[i]
        eps = float(rng.uniform(0.0, 0.2))
        x_adv = attack(params, x, label, eps)
        assert np.abs(x_adv - x).max() <= eps + 1e-15
        y = np.array([label_index(label)])
        l0 = loss_and_grads(params, x[None, :], y)[0]
        l1 = loss_and_grads(params, x_adv[None, :], y)[0]
        assert l1 >= l0 - 1e-12


# ---------------------------------------------------------------------------
# IADA
# ---------------------------------------------------------------------------

def test_iada_zero_rounds_and_zero_epsilon_reduce_to_plain_training():
    data = synthetic_dataset(150, 7)
    cfg = TrainConfig(epochs=10, seed=3)
    plain = train(data, cfg)
    for attack_cfg, rounds in [(AttackConfig(epsilon=0.1), 0),
                               (AttackConfig(epsilon=0.0), 2)]:
        model, aug = iada_train(data, attack_cfg, geometric_expert_oracle,
                                rounds, cfg)
        assert params_equal(model, plain)
        assert len(aug) == len(data)


def test_iada_growth_bounded_and_provenance_tagged():
    data = synthetic_dataset(120, 8)
    cfg = TrainConfig(epochs=8, seed=4)
    rounds = 2
    model, aug = iada_train(data, AttackConfig(epsilon=0.08), geometric_expert_oracle,
                            rounds, cfg)
    assert len(aug) <= len(data) * (1 + rounds)
    new = [p for p in aug.provenance if p != ORIGINAL]
    assert set(new) <= {EXPERT, PSEUDO}
    assert aug.provenance[: len(data)] == [ORIGINAL] * len(data)


def test_expert_oracle_labels_and_rejections():
    # clear approach toward block 2 (diagonal, off the block grid axes)
    away = np.array([-0.2, -0.2, 0.15])
    vel = -away / np.linalg.norm(away) * 0.6
    x = featurize(window_along(BLOCKS[2] + away, vel), BLOCKS)
    assert geometric_expert_oracle(x) == "R_2"
    # static wrist: idle
    x = featurize(window_along([0.5, 0, 0.2], [0, 0, 0]), BLOCKS)
    assert geometric_expert_oracle(x) == IDLE
    # two blocks nearly equidistant: reject
    x = np.zeros(FEATURE_DIM)
    x[0:3] = [0.10, 0.0, 0.0]
    x[3] = 0.5
    x[4:7] = [0.0, 0.11, 0.0]
    x[7] = 0.4
    assert geometric_expert_oracle(x) is None


# ---------------------------------------------------------------------------
# smoothing and serialization
# ---------------------------------------------------------------------------

def test_smoother_majority_and_sticky_ties():
    sm = PredictionSmoother()
    assert sm.update("R_1") == "R_1"
    assert sm.update("R_2") == "R_1"      # tie: stays
    assert sm.update("R_2") == "R_2"      # majority flips
    sm2 = PredictionSmoother()
    for lbl, want in [("R_1", "R_1"), ("R_2", "R_1"), ("R_3", "R_1")]:
        # three distinct labels: no majority, vote stays where it was
        assert sm2.update(lbl) == want


def test_model_save_load_round_trip(tmp_path):
    data = synthetic_dataset(64, 9)
    params = train(data, TrainConfig(epochs=5, seed=6))
    path = tmp_path / "model.mlp"
    save_model(params, path)
    loaded = load_model(path)
    assert params_equal(params, loaded)
    x = data.features[0]
    assert predict(params, x) == predict(loaded, x)


def test_model_load_rejects_unknown_format(tmp_path):
    path = tmp_path / "bogus.mlp"
    path.write_text("not a model\n")
    with pytest.raises(ValueError, match="not a"):
        load_model(path)


def test_dataset_csv_round_trip(tmp_path):
    data = synthetic_dataset(40, 10)
    data.provenance[5] = EXPERT
    path = tmp_path / "demos.csv"
    data.to_csv(path)
    back = LabeledDataset.from_csv(path)
    np.testing.assert_array_equal(back.features, data.features)
    assert back.labels == data.labels
    assert back.provenance == data.provenance
