import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from prospect import dataset as D
from prospect import diffcore as dc
from prospect import trainer as T
from prospect import worlds as W
from prospect.model import ModelConfig, ProspectModel, init_params

TINY = dict(enc_widths=(4, 4, 4, 4), dec_widths=(4, 4, 4, 4), keypoints=8, transform_hidden=16, value_hidden=8,
            noise_dim=4)


def tiny(**kw):
    return ModelConfig(**{**TINY, **kw})


@pytest.fixture(scope="module")
def stack_eps():
    return W.generate_episodes("stack", 40, 11)


def test_adam_matches_torch():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=(3, 2))
    params = {"w": w0.copy()}
    opt = T.Adam(params, 0.01, 0.9, 0.999, 1e-8)
    tw = torch.tensor(w0, requires_grad=True)
    topt = torch.optim.Adam([tw], lr=0.01, betas=(0.9, 0.999), eps=1e-8)
    for _ in range(25):
        g = rng.normal(size=(3, 2))
        params = opt.update(params, {"w": g})
        topt.zero_grad()
        tw.grad = torch.from_numpy(g.copy())
        topt.step()
    np.testing.assert_allclose(params["w"], tw.detach().numpy(), rtol=1e-6, atol=1e-9)


def test_zero_learning_rate_keeps_weights(stack_eps):
    cfg = tiny()
    params = init_params(cfg, 0)
    batch = next(D.make_batches(stack_eps, 8))
    new, loss = T.train_step(params, batch, cfg, T.TrainConfig(learning_rate=0.0), 1)
    assert np.isfinite(loss)
    assert all(np.array_equal(new[k], params[k]) for k in params)


def test_overfit_single_sample():
    ep = W.scripted_episode(W.sample_world("stack", 1), "expert", 1)
    table = D.PairTable([ep])
    batch = table.batch(np.array([0]))
    cfg = tiny(dropout=0.0, noise_dim=0)
    tc = T.TrainConfig(learning_rate=3e-3)
    params = init_params(cfg, 0)
    opt = T.Adam(params, tc.learning_rate, tc.beta1, tc.beta2, tc.eps)
    losses = []
    for i in range(200):
        params, loss = T.train_step(params, batch, cfg, tc, i, opt)
        losses.append(loss)
    assert losses[-1] <= 0.5 * losses[0]


def test_train_step_reproducible_in_double(stack_eps):
    cfg = tiny()
    tc = T.TrainConfig(precision="double")
    batch = next(D.make_batches(stack_eps, 8))

    def trace():
        params = {k: v.astype(np.float64) for k, v in init_params(cfg, 2).items()}
        opt = T.Adam(params, tc.learning_rate, tc.beta1, tc.beta2, tc.eps)
        out = []
        for i in range(3):
            params, loss = T.train_step(params, batch, cfg, tc, T.step_seed(0, i), opt)
            out.append(loss)
        return out, params

    (la, pa), (lb, pb) = trace(), trace()
    assert la == lb
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_non_finite_loss_aborts_with_step(stack_eps):
    cfg = tiny()
    params = init_params(cfg, 0)
    params["dec_state.b"] = np.full_like(params["dec_state.b"], np.nan)
    with pytest.raises(FloatingPointError, match="step 1"):
        T.fit(params, stack_eps, cfg, T.TrainConfig(steps=2, batch_size=4))


def test_empty_batch_rejected(stack_eps):
    batch = D.PairTable(stack_eps).batch(np.array([], dtype=int))
    with pytest.raises(ValueError):
        T.train_step(init_params(tiny(), 0), batch, tiny(), T.TrainConfig(), 0)


def test_prior_loss_masked_to_success(stack_eps):
    cfg = tiny()
    table = D.PairTable(stack_eps)
    fails = np.flatnonzero(~table.success)[:4]
    batch = table.batch(fails)
    params = init_params(cfg, 0)

    def loss_with(prior_weight):
        g = dc.Graph("double")
        return float(T.loss_graph(g, g.bind(params), cfg, batch, 0.05, "infer", 0, 1.0, prior_weight).loss.value)

    assert loss_with(1.0) == loss_with(0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(steps=0)
    with pytest.raises(ValueError):
        T.TrainConfig(lam=1.5)
    assert T.TrainConfig.parse_value("lam", "0.1") == 0.1
    with pytest.raises(KeyError):
        T.TrainConfig.parse_value("momentum", "0.9")


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


@settings(max_examples=40)
@given(pairs=st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=30))
def test_auc_matches_pair_count(pairs):
    scores, labels = zip(*pairs)
    if len(set(labels)) < 2:
        assert T.auc(scores, labels) == 0.5
    else:
        assert T.auc(scores, labels) == pytest.approx(brute_auc(scores, labels), abs=1e-12)


def test_metrics_text_round_trip():
    r = T.MetricsReport(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, [(1, 2.0)])
    text = r.to_text()
    assert "value_auc=0.5" in text and "final_train_loss=2" in text
    back = T.MetricsReport.from_text(text)
    assert back.to_text().splitlines()[:6] == text.splitlines()[:6]


def test_loss_curve_decreases_on_expert_data():
    eps = W.generate_episodes("stack", 30, 12, {"expert": 1.0})
    tc = T.TrainConfig(steps=60, batch_size=8, log_every=3)
    result = T.fit(init_params(tiny(), 0), eps, tiny(), tc)
    losses = [l for _, l in result.loss_curve]
    k = max(1, len(losses) // 10)
    assert np.mean(losses[-k:]) < np.mean(losses[:k])


@pytest.fixture(scope="module")
def nav_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("nav")
    D.save_dataset(W.generate_episodes("nav", 400, 13), path)
    return path


def test_untrained_model_is_at_chance(nav_data):
    cfg = tiny(vocab_size=4)
    model = ProspectModel(cfg, seed=0)
    a = T.evaluate(model, nav_data, "val")
    b = T.evaluate(model, nav_data, "val")
    assert a.to_text() == b.to_text()
    assert abs(a.val_action_acc - 0.25) <= 0.1
    assert abs(a.value_auc - 0.5) <= 0.1
    for v in (a.val_image_mae, a.val_state_mae, a.val_gripper_mae, a.val_action_acc, a.prior_top1):
        assert np.isfinite(v)
    assert 0 <= a.value_auc <= 1


def test_train_run_outputs(tmp_path, nav_data):
    tc = T.TrainConfig(steps=4, batch_size=4, log_every=2, checkpoint_every=2)
    report = T.train_run(nav_data, tiny(), tc, tmp_path / "m")
    out = tmp_path / "m"
    assert sorted(p.name for p in out.iterdir()) == ["ckpt_000002.pwt", "ckpt_000004.pwt", "loss.csv",
                                                     "metrics.txt", "model.cfg", "model.pwt"]
    lines = (out / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and [l.split(",")[0] for l in lines[1:]] == ["1", "2", "4"]
    assert (out / "metrics.txt").read_text() == report.to_text()
    model = ProspectModel.load(out)
    assert model.config.vocab_size == 4
    assert T.evaluate(model, nav_data, "val").to_text().splitlines()[:6] == report.to_text().splitlines()[:6]


def test_lambda_zero_shadowed_heads_get_no_gradient(stack_eps):
    cfg = tiny(noise_dim=0, dropout=0.0)
    params = init_params(cfg, 0)
    for k in list(params):
        head, _, rest = k.partition(".")
        if head in ("head1", "head2"):
            params[k] = params["head0." + rest].copy()  # exact copies tie; the lowest index wins
    batch = next(D.make_batches(stack_eps, 8))
    g = dc.Graph("double")
    grads = dc.backward(g, T.loss_graph(g, g.bind(params), cfg, batch, 0.0, "train", 3).loss)
    assert np.abs(grads["head0.out.w"]).max() > 0
    for j in (1, 2):
        assert all(not np.any(grads[k]) for k in grads if k.startswith(f"head{j}."))
    g = dc.Graph("double")
    grads = dc.backward(g, T.loss_graph(g, g.bind(params), cfg, batch, 0.05, "train", 3).loss)
    assert all(np.abs(grads[f"head{j}.out.w"]).max() > 0 for j in range(4))
