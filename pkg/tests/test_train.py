from dataclasses import replace

import numpy as np
import pytest
from sklearn.base import clone

from robustleak import nn
from robustleak.attacks import AttackConfig, PerturbationConstraint
from robustleak.data import accuracy, adv_accuracy, gen_synthetic, mini_faces
from robustleak.exceptions import InputError
from robustleak.train import (RobustMLPClassifier, TrainConfig, fit, initial_model,
                              train_dist_adv, train_ibp_verified, train_mixed_ratio,
                              train_natural, train_pgd_adv)
from robustleak.verify import verified_accuracy


@pytest.fixture(scope="module")
def desk():
    return gen_synthetic(10, 50, 20, 0.03, seed=1)


@pytest.fixture(scope="module")
def tiny():
    return gen_synthetic(3, 20, 6, 0.08, seed=3)


def same(a, b):
    return all(np.array_equal(p, q) for p, q in zip(a.weights + a.biases, b.weights + b.biases))


def short(method, **kw):
    base = dict(method=method, hidden_sizes=(16,), epochs=5, batch_size=10, seed=4)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    for bad in (dict(method="sgd"), dict(alpha=1.5), dict(adv_train_ratio=-0.1),
                dict(da_weight=-1.0), dict(epochs=-1), dict(loss_variant="hinge")):
        with pytest.raises(InputError):
            TrainConfig(**bad)


def test_empty_data_rejected():
    with pytest.raises(InputError):
        fit((np.zeros((0, 3)), np.zeros(0, dtype=int)), TrainConfig())


@pytest.mark.parametrize("method", ["natural", "pgd-adv", "dist-adv", "diff-adv", "ibp-verified"])
def test_zero_epochs_returns_initial_model(tiny, method):
    cfg = short(method, epochs=0)
    model, history = fit(tiny, cfg)
    assert same(model, initial_model(6, 3, cfg))
    assert history.rows == []


def test_natural_fits_separable_desk_data(desk):
    model = train_natural(desk, TrainConfig(hidden_sizes=(32,), epochs=100, seed=0))
    assert accuracy(model, desk.X, desk.y) >= 0.99


def test_natural_loss_curve_decreases(desk):
    _, history = fit(desk, TrainConfig(hidden_sizes=(32,), epochs=60, seed=0))
    loss = history.column("natural_loss")
    assert np.all(np.isfinite(loss))
    assert all(loss[e + 10] <= loss[e] for e in range(50))


def test_training_is_deterministic(tiny):
    a, ha = fit(tiny, short("pgd-adv"))
    b, hb = fit(tiny, short("pgd-adv"))
    assert same(a, b)
    for name in ha.FIELDS:
        np.testing.assert_array_equal(ha.column(name), hb.column(name))


def test_pgd_adv_at_zero_epsilon_is_natural(tiny):
    natural = train_natural(tiny, short("natural"))
    robust = train_pgd_adv(tiny, short("pgd-adv", constraint=PerturbationConstraint(0.0)))
    assert same(natural, robust)


def test_dist_adv_with_huge_penalty_is_natural(tiny):
    natural = train_natural(tiny, short("natural"))
    cfg = short("dist-adv", attack=AttackConfig(steps=7, step_size=0.01, gamma=1e6))
    assert same(natural, train_dist_adv(tiny, cfg))


def test_dist_adv_needs_positive_gamma(tiny):
    with pytest.raises(InputError):
        train_dist_adv(tiny, short("dist-adv", attack=AttackConfig(step_size=0.01, gamma=0.0)))


def test_diff_adv_alpha_one_is_natural(tiny):
    natural = train_natural(tiny, short("natural"))
    assert same(natural, fit(tiny, short("diff-adv", alpha=1.0))[0])


def test_diff_adv_at_x_zero_epsilon_is_scaled_natural(tiny):
    # robust term vanishes, leaving alpha * CE; same as natural with lr scaled by alpha
    cfg = short("diff-adv", alpha=0.5, constraint=PerturbationConstraint(0.0),
                attack=AttackConfig(steps=3, step_size=0.01))
    robust, hist = fit(tiny, cfg)
    natural = train_natural(tiny, short("natural", lr=0.005))
    for p, q in zip(robust.weights, natural.weights):
        np.testing.assert_allclose(p, q, rtol=1e-10, atol=1e-12)
    assert np.all(hist.column("robust_loss") == 0)


def test_diff_adv_robust_term_decreases():
    # near-uniform initial outputs give a near-zero KL that grows with the logits;
    # once it peaks, training drives it down
    cfg = TrainConfig(method="diff-adv", hidden_sizes=(32,), epochs=200, alpha=0.5, seed=0)
    _, history = fit(mini_faces(0), cfg)
    robust = history.column("robust_loss")
    peak = int(robust.argmax())
    assert peak < 100
    assert robust[-10:].mean() < 0.5 * robust[peak]


def test_ibp_at_zero_epsilon_is_weighted_natural(tiny):
    cfg = short("ibp-verified", alpha=0.5, constraint=PerturbationConstraint(0.0))
    robust, _ = fit(tiny, cfg)
    natural = train_natural(tiny, short("natural"))
    for p, q in zip(robust.weights, natural.weights):
        np.testing.assert_allclose(p, q, rtol=1e-10, atol=1e-12)


def test_ibp_requires_alpha_below_one(tiny):
    with pytest.raises(InputError):
        train_ibp_verified(tiny, short("ibp-verified", alpha=1.0))


def test_ibp_eps_ramp_is_linear(tiny):
    from robustleak.train import _Trainer
    cfg = short("ibp-verified", epochs=4, batch_size=20)
    trainer = _Trainer(tiny.X, tiny.y, 3, cfg)
    # 3 steps per epoch, ramp over the first 6 steps
    values = []
    for step in range(12):
        trainer.step_count = step
        values.append(trainer.current_epsilon())
    np.testing.assert_allclose(values[:7], 0.05 * np.arange(7) / 6)
    assert values[-1] == 0.05


def test_ibp_gradient_matches_finite_differences(tiny):
    # the robust-term gradient flows through the interval propagation
    from robustleak.train import _Trainer
    from robustleak.verify import ibp_bounds, worst_case_logits
    cfg = short("ibp-verified", alpha=0.0, eps_ramp=0.0, hidden_sizes=(5,))
    trainer = _Trainer(tiny.X[:8], tiny.y[:8], 3, cfg)
    model = trainer.model
    Xb, yb = tiny.X[:8], tiny.y[:8]

    def robust_loss(m):
        b = ibp_bounds(m, Xb, cfg.constraint)
        return float(np.mean(nn.cross_entropy(nn.softmax(worst_case_logits(b.low, b.high, yb)), yb)))

    _, _, grads = trainer._ibp_step(Xb, yb)
    h = 1e-6
    for layer in range(len(model.weights)):
        w = model.weights[layer]
        for idx in [(0, 0), (1, 2), (w.shape[0] - 1, w.shape[1] - 1)]:
            old = w[idx]
            w[idx] = old + h
            up = robust_loss(model)
            w[idx] = old - h
            down = robust_loss(model)
            w[idx] = old
            assert grads.weights[layer][idx] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-8)


def test_ibp_verified_beats_natural(desk):
    c = PerturbationConstraint(0.05)
    ibp = train_ibp_verified(desk, TrainConfig(method="ibp-verified", hidden_sizes=(32,),
                                               epochs=60, constraint=c, seed=0))
    natural = train_natural(desk, TrainConfig(hidden_sizes=(32,), epochs=60, seed=0))
    v_ibp = verified_accuracy(ibp, desk.X, desk.y, c)
    assert v_ibp > 0
    assert v_ibp >= verified_accuracy(natural, desk.X, desk.y, c)


def test_robust_training_raises_adversarial_accuracy():
    data = gen_synthetic(4, 40, 10, 0.12, seed=5)
    c = PerturbationConstraint(0.1)
    base = dict(hidden_sizes=(32,), epochs=40, constraint=c, seed=0)
    natural = train_natural(data, TrainConfig(**base))
    pgd = train_pgd_adv(data, TrainConfig(method="pgd-adv", **base))
    dist = train_dist_adv(data, TrainConfig(method="dist-adv", **base,
                                            attack=AttackConfig(steps=7, step_size=0.025, gamma=1.0)))
    nat_adv = adv_accuracy(natural, data.X, data.y, c)
    assert adv_accuracy(pgd, data.X, data.y, c) >= nat_adv
    assert adv_accuracy(dist, data.X, data.y, c) > nat_adv


def test_mixed_ratio_endpoints(tiny):
    natural = train_natural(tiny, short("natural"))
    pgd = train_pgd_adv(tiny, short("pgd-adv"))
    assert same(natural, train_mixed_ratio(tiny, short("pgd-adv", adv_train_ratio=0.0)))
    assert same(pgd, train_mixed_ratio(tiny, short("pgd-adv", adv_train_ratio=1.0)))


def test_da_regularizer_training_runs(tiny):
    model, history = fit(tiny, short("pgd-adv", da_weight=0.5))
    assert np.all(np.isfinite(history.column("robust_loss")))
    assert not same(model, fit(tiny, short("pgd-adv"))[0])


def test_softplus_variant_trains(tiny):
    _, history = fit(tiny, short("ibp-verified", loss_variant="softplus-margin"))
    assert np.all(np.isfinite(history.column("robust_loss")))


def test_history_csv(tiny, tmp_path):
    _, history = fit(tiny, short("pgd-adv", epochs=3), record_adv=True)
    path = tmp_path / "h.csv"
    history.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,natural_loss,robust_loss,train_acc,adv_train_acc"
    assert len(lines) == 4
    assert np.all(np.isfinite(history.column("adv_train_acc")))


def test_estimator_matches_functional_api(tiny):
    clf = RobustMLPClassifier(method="pgd-adv", hidden_sizes=(16,), epochs=5, batch_size=10,
                              random_state=4)
    clf.fit(tiny.X, tiny.y)
    model, _ = fit(tiny, short("pgd-adv"))
    assert same(clf.model_, model)
    np.testing.assert_array_equal(clf.predict(tiny.X), nn.logits(model, tiny.X).argmax(1))
    np.testing.assert_allclose(clf.predict_proba(tiny.X).sum(1), 1.0)
    assert clone(clf).get_params() == clf.get_params()


def test_estimator_maps_arbitrary_labels(tiny):
    labels = np.array(["a", "b", "c"])[tiny.y]
    clf = RobustMLPClassifier(hidden_sizes=(32,), epochs=150, random_state=0).fit(tiny.X, labels)
    assert set(clf.predict(tiny.X)) <= {"a", "b", "c"}
    assert clf.score(tiny.X, labels) > 0.9


def test_estimator_attack_overrides():
    cfg = RobustMLPClassifier(method="dist-adv", gamma=3.0, attack_steps=2).train_config()
    assert cfg.resolved_attack.gamma == 3.0 and cfg.resolved_attack.steps == 2
    assert replace(cfg, attack=None).resolved_attack.gamma == 1.0


def test_mixed_ratio_adv_accuracy_non_decreasing():
    data = gen_synthetic(4, 40, 10, 0.12, seed=5)
    c = PerturbationConstraint(0.1)
    wins = 0
    for seed in range(3):
        accs = [adv_accuracy(train_mixed_ratio(data, TrainConfig(
                    method="pgd-adv", hidden_sizes=(32,), epochs=40, constraint=c,
                    adv_train_ratio=r, seed=seed)), data.X, data.y, c)
                for r in (0.0, 0.5, 1.0)]
        wins += accs[0] <= accs[1] <= accs[2]
    assert wins >= 2
