"""Tests for the soft actor-critic core: sampling, losses, targets, replay."""

import numpy as np
import pytest

import oracles
from covr import numcore, sac


def _tiny_nets(seed=None, obs_dim=6, action_dim=2, latent_dim=4, hidden=5):
    rng = None if seed is None else numcore.rng_stream(seed)
    return sac.AgentNets(obs_dim=obs_dim, action_dim=action_dim,
                         latent_dim=latent_dim, hidden=hidden, rng=rng)


def _tiny_batch(seed, nets, size=4, guided="some"):
    rng = numcore.rng_stream(seed, domain=1)
    b = {
        "obs": rng.normal(size=(size, nets.obs_dim)),
        "action": rng.uniform(-1, 1, size=(size, nets.action_dim)),
        "reward": rng.normal(size=size),
        "next_obs": rng.normal(size=(size, nets.obs_dim)),
        "done": (rng.uniform(size=size) < 0.3).astype(float),
        "av": rng.uniform(-1, 1, size=(size, nets.action_dim)),
    }
    if guided == "some":
        b["av_mask"] = (rng.uniform(size=size) < 0.5).astype(float)
        b["av_mask"][0] = 1.0
    elif guided == "all":
        b["av_mask"] = np.ones(size)
    else:
        b["av_mask"] = np.zeros(size)
    return b


# ---------- action sampling ----------


def test_deterministic_action_is_tanh_of_mean_bias():
    nets = _tiny_nets()
    nets.actor.biases[-1][:2] = [0.7, -1.2]
    obs = np.zeros(nets.obs_dim)
    a, logp = sac.sample_action(nets, obs, rng=None, deterministic=True)
    assert np.allclose(a, np.tanh([0.7, -1.2]), atol=1e-15)


def test_tiny_logstd_gives_near_mean_sample():
    nets = _tiny_nets()
    nets.actor.biases[-1][2:] = -10.0
    a, _ = sac.sample_action(nets, np.zeros(nets.obs_dim), numcore.rng_stream(60))
    assert np.all(np.abs(a) < 1e-3)


def test_sampled_actions_strictly_inside_unit_box():
    nets = _tiny_nets(seed=61, obs_dim=4)
    nets.actor.biases[-1][2:] = 2.0
    rng = numcore.rng_stream(62)
    obs = rng.normal(size=(1000, 4))
    for _ in range(100):
        a, _ = sac.sample_action(nets, obs, rng)
        assert np.all(a > -1.0) and np.all(a < 1.0)


def test_log_prob_matches_sample_and_density_integrates_to_one():
    nets = _tiny_nets(seed=63, action_dim=1)
    obs = numcore.rng_stream(64).normal(size=nets.obs_dim)
    a, logp = sac.sample_action(nets, obs, numcore.rng_stream(65))
    again = sac.action_log_prob(nets, obs, a)
    assert abs(logp - again) < 1e-9

    grid = np.tanh(np.linspace(-7.0, 7.0, 20001))
    dens = np.array([np.exp(sac.action_log_prob(nets, obs, np.array([g]))) for g in grid])
    mass = np.trapezoid(dens, grid)
    assert abs(mass - 1.0) < 1e-3


def test_sampling_is_deterministic_given_stream():
    nets = _tiny_nets(seed=66)
    obs = np.ones(nets.obs_dim)
    a1, l1 = sac.sample_action(nets, obs, numcore.rng_stream(67))
    a2, l2 = sac.sample_action(nets, obs, numcore.rng_stream(67))
    assert np.array_equal(a1, a2) and l1 == l2


# ---------- critic loss ----------


def test_terminal_target_is_reward_exactly():
    nets = _tiny_nets(seed=68)
    batch = _tiny_batch(69, nets)
    batch["reward"] = np.full(4, 1.0)
    batch["done"] = np.ones(4)
    y = sac.critic_targets(nets, batch, gamma=0.99, rng=numcore.rng_stream(70))
    assert np.array_equal(y, np.ones(4))


def test_bellman_target_hand_fixture():
    nets = _tiny_nets()
    nets.q1_target.biases[-1][0] = 1.0
    nets.q2_target.biases[-1][0] = 1.0
    nets.q1.biases[-1][0] = 2.0
    nets.q2.biases[-1][0] = 2.0
    batch = _tiny_batch(71, nets, size=1)
    batch["reward"] = np.array([1.0])
    batch["done"] = np.array([0.0])

    _, next_logp = sac.sample_action(nets, batch["next_obs"], numcore.rng_stream(72))
    want_y = 1.0 + 0.99 * (1.0 - nets.alpha * next_logp[0])
    y = sac.critic_targets(nets, batch, gamma=0.99, rng=numcore.rng_stream(72))
    assert abs(y[0] - want_y) < 1e-12

    loss, _ = sac.critic_loss(nets, batch, gamma=0.99, rng=numcore.rng_stream(72))
    assert abs(loss - (2.0 - want_y) ** 2) < 1e-12


def test_bellman_fixture_with_zero_entropy_term_reads_199():
    # with logpi forced out of the picture the classic arithmetic appears
    nets = _tiny_nets()
    nets.q1_target.biases[-1][0] = 1.0
    nets.q2_target.biases[-1][0] = 1.0
    batch = _tiny_batch(73, nets, size=1)
    batch["reward"] = np.array([1.0])
    batch["done"] = np.array([0.0])
    nets.log_alpha[0] = -np.inf
    y = sac.critic_targets(nets, batch, gamma=0.99, rng=numcore.rng_stream(74))
    assert abs(y[0] - 1.99) < 1e-12


def test_identical_twin_targets_reduce_to_single_critic():
    nets = _tiny_nets(seed=75)
    nets.q2_target = nets.q1_target.copy()
    batch = _tiny_batch(76, nets)
    y = sac.critic_targets(nets, batch, gamma=0.99, rng=numcore.rng_stream(77))
    z = nets.encode(batch["next_obs"])
    a, logp = sac.sample_action(nets, batch["next_obs"], numcore.rng_stream(77))
    q = nets.q1_target.forward(np.hstack([z, a]))[:, 0]
    want = batch["reward"] + 0.99 * (1 - batch["done"]) * (q - nets.alpha * logp)
    assert np.allclose(y, want, atol=1e-12)


def test_critic_loss_gradients_match_finite_differences():
    # Targets are constants for the gradient, so the finite difference must
    # run with the Bellman targets frozen at their unperturbed values.
    nets = _tiny_nets(seed=78)
    batch = _tiny_batch(79, nets, size=3)
    y0 = sac.critic_targets(nets, batch, gamma=0.99, rng=numcore.rng_stream(80))
    loss_a, grads = sac.critic_loss(nets, batch, gamma=0.99, rng=numcore.rng_stream(80))
    loss_b, _ = sac.critic_loss(nets, batch, gamma=0.99, rng=None, targets=y0)
    assert loss_a == loss_b
    params = nets.encoder.parameters() + nets.q1.parameters() + nets.q2.parameters()
    analytic = grads["encoder"] + grads["q1"] + grads["q2"]

    def loss_fn():
        return sac.critic_loss(nets, batch, gamma=0.99, rng=None, targets=y0)[0]

    numeric = oracles.finite_difference_params(loss_fn, params)
    assert oracles.max_rel_err(analytic, numeric) < 1e-4


def test_non_finite_target_names_transition():
    nets = _tiny_nets(seed=81)
    batch = _tiny_batch(82, nets)
    batch["reward"][2] = np.inf
    with pytest.raises(FloatingPointError, match="transition 2"):
        sac.critic_targets(nets, batch, gamma=0.99, rng=numcore.rng_stream(83))


# ---------- actor loss ----------


def test_lambda_zero_ignores_guidance_bitwise():
    nets = _tiny_nets(seed=84)
    batch = _tiny_batch(85, nets, guided="all")
    unguided = dict(batch)
    unguided["av_mask"] = np.zeros(4)
    l1, g1, _ = sac.actor_loss_guided(nets, batch, lam=0.0, rng=numcore.rng_stream(86))
    l2, g2, _ = sac.actor_loss_guided(nets, unguided, lam=0.0, rng=numcore.rng_stream(86))
    assert l1 == l2
    for a, b in zip(g1, g2):
        assert np.array_equal(a, b)


def test_aligned_guidance_action_adds_nothing():
    nets = _tiny_nets(seed=87)
    batch = _tiny_batch(88, nets, size=2, guided="all")
    a, _ = sac.sample_action(nets, batch["obs"], numcore.rng_stream(89))
    batch["av"] = a
    l_guided, _, _ = sac.actor_loss_guided(nets, batch, lam=2.0, rng=numcore.rng_stream(89))
    l_plain, _, _ = sac.actor_loss_guided(nets, batch, lam=0.0, rng=numcore.rng_stream(89))
    assert abs(l_guided - l_plain) < 1e-12


def test_guidance_term_hand_fixture():
    nets = _tiny_nets()
    nets.actor.biases[-1][2:] = -10.0
    batch = _tiny_batch(90, nets, size=1, guided="all")
    batch["av"] = np.array([[0.5, 0.0]])
    l_guided, _, _ = sac.actor_loss_guided(nets, batch, lam=2.0, rng=numcore.rng_stream(91))
    l_plain, _, _ = sac.actor_loss_guided(nets, batch, lam=0.0, rng=numcore.rng_stream(91))
    assert abs((l_guided - l_plain) - 0.5) < 1e-3


def test_actor_loss_gradients_match_finite_differences():
    nets = _tiny_nets(seed=92)
    batch = _tiny_batch(93, nets, size=3, guided="some")
    _, grads, _ = sac.actor_loss_guided(nets, batch, lam=2.0, rng=numcore.rng_stream(94))

    def loss_fn():
        return sac.actor_loss_guided(nets, batch, lam=2.0, rng=numcore.rng_stream(94))[0]

    numeric = oracles.finite_difference_params(loss_fn, nets.actor.parameters())
    assert oracles.max_rel_err(grads, numeric) < 1e-4


def test_actor_loss_gradients_with_mean_guidance_variant():
    nets = _tiny_nets(seed=95)
    batch = _tiny_batch(96, nets, size=3, guided="all")
    _, grads, _ = sac.actor_loss_guided(
        nets, batch, lam=2.0, rng=numcore.rng_stream(97), guidance_on_mean=True)

    def loss_fn():
        return sac.actor_loss_guided(
            nets, batch, lam=2.0, rng=numcore.rng_stream(97), guidance_on_mean=True)[0]

    numeric = oracles.finite_difference_params(loss_fn, nets.actor.parameters())
    assert oracles.max_rel_err(grads, numeric) < 1e-4


def test_negative_lambda_rejected():
    nets = _tiny_nets(seed=98)
    batch = _tiny_batch(99, nets)
    with pytest.raises(ValueError, match="lambda"):
        sac.actor_loss_guided(nets, batch, lam=-1.0, rng=numcore.rng_stream(100))


# ---------- temperature ----------


def test_temperature_fixed_point_has_zero_gradient():
    nets = _tiny_nets()
    logp = np.full(5, -nets.target_entropy())
    loss, grad = sac.temperature_loss(nets, logp)
    assert loss == 0.0 and grad == 0.0


def test_temperature_pushes_alpha_up_when_entropy_low():
    nets = _tiny_nets()
    logp = np.full(5, -nets.target_entropy() + 1.0)
    _, grad = sac.temperature_loss(nets, logp)
    assert grad < 0.0  # descent on log-alpha raises alpha


def test_temperature_frozen_flag_suppresses_gradient():
    nets = _tiny_nets()
    logp = np.array([-5.0, 1.0])
    loss, grad = sac.temperature_loss(nets, logp, frozen=True)
    assert loss != 0.0 and grad == 0.0


def test_temperature_gradient_matches_finite_difference():
    nets = _tiny_nets(seed=101)
    logp = numcore.rng_stream(102).normal(size=6)
    _, grad = sac.temperature_loss(nets, logp)
    step = 1e-6
    orig = nets.log_alpha[0]
    nets.log_alpha[0] = orig + step
    hi, _ = sac.temperature_loss(nets, logp)
    nets.log_alpha[0] = orig - step
    lo, _ = sac.temperature_loss(nets, logp)
    nets.log_alpha[0] = orig
    assert abs(grad - (hi - lo) / (2 * step)) < 1e-6


# ---------- targets and entropy ----------


def test_soft_update_fixtures():
    nets = _tiny_nets(seed=103)
    online = [p.copy() for p in nets.q1.parameters()]
    sac.soft_update_targets(nets, 1.0)
    for p, o in zip(nets.q1_target.parameters(), online):
        assert np.array_equal(p, o)

    nets2 = _tiny_nets()
    nets2.q1.biases[-1][0] = 1.0
    sac.soft_update_targets(nets2, 0.005)
    assert abs(nets2.q1_target.biases[-1][0] - 0.005) < 1e-15


def test_soft_update_converges_to_online():
    nets = _tiny_nets(seed=104)
    for _ in range(3000):
        sac.soft_update_targets(nets, 0.01)
    for p, o in zip(nets.q1_target.parameters(), nets.q1.parameters()):
        assert np.allclose(p, o, atol=1e-9)


def test_entropy_estimate_matches_log_probs():
    nets = _tiny_nets(seed=105)
    obs = numcore.rng_stream(106).normal(size=(8, nets.obs_dim))
    _, logp = sac.sample_action(nets, obs, numcore.rng_stream(107))
    eps = sac.policy_entropy_estimate(nets, obs, numcore.rng_stream(107))
    assert abs(eps - (-logp.mean())) < 1e-12


# ---------- auxiliary predictor ----------


def test_aux_reward_component_zero_fixture():
    nets = sac.AgentNets(obs_dim=6, action_dim=2, latent_dim=4, hidden=5, aux=True)
    batch = _tiny_batch(108, nets)
    batch["reward"] = np.zeros(4)
    loss, _ = sac.aux_transition_loss(nets, batch)
    z_next = nets.encode(batch["next_obs"])
    want = np.mean(z_next ** 2)
    assert abs(loss - want) < 1e-12


def test_aux_gradients_match_finite_differences():
    nets = sac.AgentNets(obs_dim=6, action_dim=2, latent_dim=4, hidden=5,
                         aux=True, rng=numcore.rng_stream(109))
    batch = _tiny_batch(110, nets, size=3)
    z_next = nets.encode(batch["next_obs"])
    loss_a, grads = sac.aux_transition_loss(nets, batch)
    loss_b, _ = sac.aux_transition_loss(nets, batch, target_latents=z_next)
    assert loss_a == loss_b
    params = nets.encoder.parameters() + nets.aux.parameters()
    analytic = grads["encoder"] + grads["aux"]

    def loss_fn():
        return sac.aux_transition_loss(nets, batch, target_latents=z_next)[0]

    numeric = oracles.finite_difference_params(loss_fn, params)
    assert oracles.max_rel_err(analytic, numeric) < 1e-4


# ---------- replay buffer ----------


def _transition(rng, obs_dim=6, action_dim=2, with_av=False):
    return sac.Transition(
        obs=rng.normal(size=obs_dim), action=rng.uniform(-1, 1, size=action_dim),
        reward=float(rng.normal()), next_obs=rng.normal(size=obs_dim),
        done=bool(rng.uniform() < 0.1),
        a_v=rng.uniform(-1, 1, size=action_dim) if with_av else None,
        a_v_age=0 if with_av else -1,
    )


def test_replay_ring_overwrites_oldest():
    buf = sac.ReplayBuffer(capacity=5, obs_dim=6, action_dim=2)
    rng = numcore.rng_stream(111)
    for i in range(8):
        tr = _transition(rng)
        tr.reward = float(i)
        buf.add(tr)
    assert len(buf) == 5
    assert sorted(buf.rewards[: len(buf)].tolist()) == [3.0, 4.0, 5.0, 6.0, 7.0]


def test_replay_sample_unique_within_batch_and_deterministic():
    buf = sac.ReplayBuffer(capacity=50, obs_dim=6, action_dim=2)
    rng = numcore.rng_stream(112)
    for _ in range(30):
        buf.add(_transition(rng, with_av=True))
    b1 = buf.sample(numcore.rng_stream(113), 16)
    b2 = buf.sample(numcore.rng_stream(113), 16)
    assert np.array_equal(b1["obs"], b2["obs"])
    flat = [tuple(row) for row in b1["obs"]]
    assert len(set(flat)) == 16


def test_replay_preserves_guidance_mask():
    buf = sac.ReplayBuffer(capacity=10, obs_dim=6, action_dim=2)
    rng = numcore.rng_stream(114)
    buf.add(_transition(rng, with_av=True))
    buf.add(_transition(rng, with_av=False))
    batch = buf.sample(numcore.rng_stream(115), 2)
    assert sorted(batch["av_mask"].tolist()) == [0.0, 1.0]
    guided = batch["av"][batch["av_mask"] == 1.0]
    assert np.all(guided >= -1) and np.all(guided <= 1)


def test_replay_observations_stored_compactly():
    buf = sac.ReplayBuffer(capacity=4, obs_dim=6, action_dim=2)
    assert buf.obs.dtype == np.float32
    rng = numcore.rng_stream(116)
    tr = _transition(rng)
    buf.add(tr)
    batch = buf.sample(numcore.rng_stream(117), 1)
    assert batch["obs"].dtype == np.float64
    assert np.allclose(batch["obs"][0], tr.obs, atol=1e-6)


# ---------- agent orchestration ----------


def _smoke_agent(seed=118, **overrides):
    cfg = sac.SacConfig(obs_dim=6, action_dim=2, latent_dim=4, hidden=5,
                        replay_capacity=200, batch_size=8, warmup=0, **overrides)
    return sac.SacAgent(cfg, seed=seed)


def test_agent_update_touches_online_but_not_targets():
    agent = _smoke_agent(target_every=10**9)
    rng = numcore.rng_stream(119)
    for _ in range(20):
        agent.replay.add(_transition(rng))
    t_before = [p.copy() for p in agent.nets.q1_target.parameters()]
    a_before = [p.copy() for p in agent.nets.actor.parameters()]
    q_before = [p.copy() for p in agent.nets.q1.parameters()]
    agent.update()
    agent.update()
    assert all(np.array_equal(a, b) for a, b in
               zip(agent.nets.q1_target.parameters(), t_before))
    assert not all(np.array_equal(a, b) for a, b in
                   zip(agent.nets.q1.parameters(), q_before))
    assert not all(np.array_equal(a, b) for a, b in
                   zip(agent.nets.actor.parameters(), a_before))


def test_agent_actor_cadence():
    agent = _smoke_agent(actor_every=2)
    rng = numcore.rng_stream(120)
    for _ in range(20):
        agent.replay.add(_transition(rng))
    before = [p.copy() for p in agent.nets.actor.parameters()]
    agent.update()  # update 1: critic only
    assert all(np.array_equal(a, b) for a, b in
               zip(agent.nets.actor.parameters(), before))
    agent.update()  # update 2: actor steps
    assert not all(np.array_equal(a, b) for a, b in
                   zip(agent.nets.actor.parameters(), before))


def test_agent_checkpoint_round_trip(tmp_path):
    agent = _smoke_agent()
    rng = numcore.rng_stream(121)
    for _ in range(30):
        agent.replay.add(_transition(rng, with_av=True))
    for _ in range(6):
        agent.update()
    path = tmp_path / "agent.ckpt"
    sac.save_agent(path, agent.nets)
    clone = sac.load_agent(path)
    obs = numcore.rng_stream(122).normal(size=6)
    a1, _ = sac.sample_action(agent.nets, obs, rng=None, deterministic=True)
    a2, _ = sac.sample_action(clone, obs, rng=None, deterministic=True)
    assert np.array_equal(a1, a2)
    assert clone.log_alpha[0] == agent.nets.log_alpha[0]
    for p, q in zip(clone.q1_target.parameters(), agent.nets.q1_target.parameters()):
        assert np.array_equal(p, q)


def test_agent_critic_fits_synthetic_values():
    agent = _smoke_agent(seed=123, actor_every=10**9, lr_critic=3e-3)
    rng = numcore.rng_stream(124)
    for _ in range(60):
        tr = _transition(rng)
        tr.done = True
        tr.reward = float(np.sum(tr.obs[:2]))
        agent.replay.add(tr)
    first = None
    for i in range(400):
        info = agent.update()
        if first is None:
            first = info["critic_loss"]
    assert info["critic_loss"] < 0.1 * first
