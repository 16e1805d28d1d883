import copy

import numpy as np
import pytest
import torch

from oracles import sampled_gradient_error
from socialnav.config import EnvConfig, PolicyConfig
from socialnav.env import Action
from socialnav.perspective import Condition, InfluenceEstimate
from socialnav.policy import (
    DQNLearner,
    InfluenceDQN,
    InfluenceSource,
    PolicyInput,
    QNetwork,
    ReplayBuffer,
    ReplayItem,
    dqn_loss,
    dqn_targets,
    dqn_update,
    epsilon_at,
    q_values,
    select_action,
    train_policy,
)
from socialnav.world_model import FactoredBelief


def random_items(n, dim=128, seed=0, terminal=None):
    rng = np.random.default_rng(seed)
    return [
        ReplayItem(
            rng.random(dim).astype(np.float32),
            int(rng.integers(3)),
            float(rng.normal()),
            rng.random(dim).astype(np.float32),
            bool(rng.random() < 0.3) if terminal is None else terminal,
        )
        for _ in range(n)
    ]


# ---------------------------------------------------------------- Q-network


def test_q_vector_has_one_entry_per_action():
    torch.manual_seed(0)
    net = QNetwork()
    x = PolicyInput(FactoredBelief.uniform(), InfluenceEstimate(FactoredBelief.uniform(), Condition.UNIFORM_RANDOM))
    q = q_values(x, net)
    assert q.shape == (3,)
    assert np.array_equal(q, q_values(x, net))
    assert np.array_equal(q_values(x.vector(), net), q)


def test_fresh_network_values_are_small():
    rng = np.random.default_rng(0)
    for seed in range(5):
        torch.manual_seed(seed)
        net = QNetwork(init_scale=0.1)
        x = rng.dirichlet(np.ones(8), size=(200, 16)).reshape(200, 128)
        assert np.abs(q_values(x, net)).max() < 1.0


def test_q_values_reject_wrong_width():
    with pytest.raises(ValueError):
        q_values(np.zeros(10), QNetwork())


def test_select_action_examples():
    rng = np.random.default_rng(0)
    assert select_action(np.array([1.0, 3.0, 2.0]), 0.0, rng) == Action.TURN_RIGHT
    assert select_action(np.array([2.0, 2.0, 1.0]), 0.0, rng) == 0
    assert select_action(np.array([0.0, 5.0, 5.0]), 0.0, rng) == 1
    with pytest.raises(ValueError):
        select_action(np.zeros(3), 1.5, rng)


def test_full_exploration_is_uniform_within_three_sigma():
    rng = np.random.default_rng(7)
    n = 10_000
    counts = np.bincount([select_action(np.array([0.0, 9.0, 1.0]), 1.0, rng) for _ in range(n)], minlength=3)
    sigma = np.sqrt(n * (1 / 3) * (2 / 3))
    assert np.all(np.abs(counts - n / 3) <= 3 * sigma), counts


def test_epsilon_schedule():
    cfg = PolicyConfig()
    assert epsilon_at(0, 300, cfg) == 1.0
    assert epsilon_at(50, 300, cfg) == pytest.approx(0.525)
    assert epsilon_at(100, 300, cfg) == pytest.approx(0.05)
    assert epsilon_at(299, 300, cfg) == pytest.approx(0.05)


# ---------------------------------------------------------------- DQN update


def test_terminal_target_is_reward():
    r = torch.tensor([0.5, -1.0, 2.0])
    next_q = torch.tensor([[1.0, 4.0, 0.0], [3.0, 0.0, 0.0], [0.0, 0.0, -2.0]])
    term = torch.tensor([True, False, True])
    y = dqn_targets(r, next_q, term, 0.9)
    assert y[0].item() == 0.5 and y[2].item() == 2.0
    assert y[1].item() == pytest.approx(-1.0 + 0.9 * 3.0)


def test_zero_discount_target_is_reward():
    r = torch.tensor([0.5, -1.0])
    y = dqn_targets(r, torch.randn(2, 3), torch.tensor([False, False]), 0.0)
    assert torch.equal(y, r)


def test_dqn_loss_matches_hand_computation():
    torch.manual_seed(0)
    net, target = QNetwork(8, (4,)), QNetwork(8, (4,))
    items = random_items(5, dim=8, seed=3)
    with torch.no_grad():
        x = torch.as_tensor(np.stack([i.input for i in items]))
        xn = torch.as_tensor(np.stack([i.next_input for i in items]))
        q = net(x).numpy()
        qn = target(xn).numpy()
    y = np.array([i.reward + (0 if i.terminal else 0.95 * qn[k].max()) for k, i in enumerate(items)])
    taken = np.array([q[k, i.action] for k, i in enumerate(items)])
    expected = np.mean((taken - y) ** 2)
    assert dqn_loss(items, net, target, 0.95).item() == pytest.approx(expected, rel=1e-5)


def test_dqn_gradient_matches_finite_differences():
    torch.manual_seed(0)
    net = QNetwork(128, (256, 128), 0.1).double()
    target = copy.deepcopy(net)
    with torch.no_grad():
        for p in target.parameters():
            p.add_(0.05 * torch.randn_like(p))
    items = random_items(32, seed=4)
    error = sampled_gradient_error(lambda: dqn_loss(items, net, target, 0.95), net.parameters(), 16,
                                   np.random.default_rng(2))
    assert error <= 1e-3


def test_dqn_update_rejects_bad_input():
    net = QNetwork()
    opt = torch.optim.Adam(net.parameters())
    with pytest.raises(ValueError):
        dqn_update([], net, copy.deepcopy(net), 0.9, opt)
    with pytest.raises(ValueError):
        dqn_update(random_items(2), net, copy.deepcopy(net), 1.0, opt)
    bad = random_items(2)
    bad[0].reward = float("nan")
    with pytest.raises(FloatingPointError):
        dqn_update(bad, net, copy.deepcopy(net), 0.9, opt)


def test_target_network_is_frozen_between_refreshes():
    cfg = PolicyConfig(target_refresh=5, batch_size=8)
    learner = DQNLearner(128, cfg, seed=0)
    snapshot = copy.deepcopy(learner.target_net.state_dict())
    items = random_items(8)
    for _ in range(4):
        learner.update(items)
        for k, v in learner.target_net.state_dict().items():
            assert torch.equal(v, snapshot[k])
    learner.update(items)
    online = learner.net.state_dict()
    for k, v in learner.target_net.state_dict().items():
        assert torch.equal(v, online[k])
    assert any(not torch.equal(v, snapshot[k]) for k, v in learner.target_net.state_dict().items())


# ---------------------------------------------------------------- replay


def test_replay_evicts_oldest_first():
    buf = ReplayBuffer(3, 4)
    items = random_items(5, dim=4)
    for it in items:
        buf.add(it)
    assert len(buf) == 3
    kept = buf.items()
    assert [k.reward for k in kept] == pytest.approx([i.reward for i in items[2:]])
    assert all(np.array_equal(k.input, i.input) for k, i in zip(kept, items[2:]))


def test_replay_sample_shapes(rng):
    buf = ReplayBuffer(10, 4)
    for it in random_items(6, dim=4):
        buf.add(it)
    batch = buf.sample(16, rng)
    assert batch["inputs"].shape == (16, 4) and batch["actions"].shape == (16,)


# ---------------------------------------------------------------- training


def test_influence_source_caches_deterministic_estimates(small_model, small_dataset):
    ep = small_dataset.episodes[0]
    src = InfluenceSource(small_model, "shift", np.random.default_rng(0))
    obs = ep.observation_at(0)
    a, b = src.influence(obs, None), src.influence(obs, None)
    assert a is b
    assert np.array_equal(src.policy_input(obs, None).vector()[:64], small_model.encode(obs.window)[0].ravel().astype(np.float32))


def test_train_policy_curve_and_determinism(small_model):
    cfg = PolicyConfig(warmup=20, batch_size=16, target_refresh=10)
    net_a, curve_a = train_policy(EnvConfig(), small_model, "shift", 0, cfg, episodes=6)
    net_b, curve_b = train_policy(EnvConfig(), small_model, "shift", 0, cfg, episodes=6)
    assert curve_a.shape == (6, 3)
    assert list(curve_a[:, 0]) == list(range(6))
    assert np.array_equal(curve_a, curve_b)
    for pa, pb in zip(net_a.parameters(), net_b.parameters()):
        assert torch.equal(pa, pb)


def test_train_policy_requires_trained_model_and_valid_condition(small_model):
    from socialnav.world_model import WorldModel

    with pytest.raises(ValueError):
        train_policy(EnvConfig(), WorldModel(), "shift", 0, episodes=1)
    with pytest.raises(ValueError):
        train_policy(EnvConfig(), small_model, "oracle", 0, episodes=1)


def test_estimator_wrapper_round_trip(small_model, tmp_path):
    cfg = PolicyConfig(warmup=10, batch_size=8)
    est = InfluenceDQN("random", episodes=3, seed=1, policy_config=cfg).fit(small_model)
    X = np.random.default_rng(0).dirichlet(np.ones(8), size=(4, 16)).reshape(4, 128)
    path = tmp_path / "p.pt"
    est.save(path)
    loaded = InfluenceDQN.load(path)
    assert np.array_equal(loaded.decision_function(X), est.decision_function(X))
    assert set(est.predict(X)) <= {0, 1, 2}
    assert est.get_params()["condition"] == "random"
