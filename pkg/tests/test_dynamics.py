import numpy as np
import pytest

from candyman.atlas import ArchSpec, Atlas, Chart, check_atlas
from candyman.dataset import Dataset
from candyman.dynamics import (AtlasModel, ChartDynamics, ChartHasNoDynamicsData, RolloutDiverged, RolloutState,
                               assemble_chart_pairs, assign_initial, fit_dynamics, fit_phase_dynamics, load_model,
                               read_trajectory_csv, rollout, save_model, step)
from candyman.neuralnet import Mlp, PlainAutoencoder, TrainConfig, default_activations
from candyman.systems import gen_circle


def identity_net(dim):
    return Mlp([dim, dim], [np.eye(dim)], [np.zeros(dim)], ["linear"])


def identity_atlas(points, labels, domains):
    """Atlas whose charts are the identity map; lets dynamics plumbing be tested without training."""
    dim = points.shape[1]
    charts = [Chart(c, i, b, PlainAutoencoder(identity_net(dim), identity_net(dim))) for c, (i, b) in enumerate(domains)]
    centroids = np.array([points[i].mean(axis=0) for i, _ in domains])
    return Atlas(charts, centroids, points, np.asarray(labels))


# -- pairs ------------------------------------------------------------------


def test_whole_dataset_chart_gives_all_pairs():
    ds = gen_circle()
    atlas = identity_atlas(ds.points, np.zeros(40, int), [(np.arange(40), [])])
    pairs = assemble_chart_pairs(atlas, 0, ds)
    assert len(pairs.index) == 40
    assert np.array_equal(pairs.z1, ds.successors)


def test_contiguous_arc_pairs():
    t = np.linspace(0, 1, 20)
    ds = Dataset.from_series(np.c_[t, t**2])
    L = 8
    interior = np.arange(L)
    labels = np.r_[np.zeros(L, int), np.ones(len(ds) - L, int)]
    atlas = identity_atlas(ds.points, labels, [(interior, []), (np.arange(L, len(ds)), [])])
    assert len(assemble_chart_pairs(atlas, 0, ds).index) == L - 1


def test_chart_without_pairs_raises():
    pts = np.array([[0.0], [1.0], [2.0], [3.0]])
    ds = Dataset(pts, pts[::-1].copy())
    atlas = identity_atlas(pts, [0, 1, 1, 1], [([0], []), ([1, 2, 3], [])])
    with pytest.raises(ChartHasNoDynamicsData):
        assemble_chart_pairs(atlas, 0, ds)


def test_circle_pair_counts_cover_dataset(circle_model, circle_data):
    total = sum(len(assemble_chart_pairs(circle_model.atlas, c, circle_data["train"]).index)
                for c in range(len(circle_model.atlas)))
    assert total >= 40


# -- regression -------------------------------------------------------------


def test_identity_dynamics():
    from candyman.dynamics import ChartPairs
    z = np.linspace(-1, 1, 30)[:, None]
    arch = ArchSpec([1, 32, 32, 16, 4, 1])  # the circle dynamics shape
    cfg = TrainConfig(epochs=3000, lr_init=0.01, decay_rate=0.9, decay_every=200)
    dyn = fit_dynamics(0, ChartPairs(0, np.arange(30), z, z), arch, cfg)
    assert dyn.loss.final < 1e-6


def test_circle_one_step_error(circle_model, circle_data):
    # mean squared one-step error in local coordinates, the quantity the regression minimises
    from candyman.neuralnet import forward
    ds = circle_data["train"]
    for c, dyn in enumerate(circle_model.dynamics):
        pairs = assemble_chart_pairs(circle_model.atlas, c, ds)
        assert float(((forward(dyn.f, pairs.z0) - pairs.z1) ** 2).mean()) < 1e-3


def test_phase_net_constant_speed():
    z = np.linspace(-1, 1, 50)[:, None]
    rng = np.random.default_rng(0)
    delta = 0.02 + 1e-4 * rng.normal(size=50)
    net, _ = fit_phase_dynamics(z, delta, ArchSpec([1, 8, 1]), TrainConfig(epochs=500))
    from candyman.neuralnet import forward
    out = forward(net, z).ravel()
    assert out.std() < 0.05 * out.mean()
    assert out.mean() == pytest.approx(0.02, rel=0.01)


def test_phase_net_zero_deltas():
    z = np.linspace(-1, 1, 20)[:, None]
    net, _ = fit_phase_dynamics(z, np.zeros(20), ArchSpec([1, 8, 1]), TrainConfig(epochs=200))
    from candyman.neuralnet import forward
    assert np.abs(forward(net, z)).max() < 1e-4
    assert np.all(net.weights[-1] == 0)


# -- initial assignment -------------------------------------------------------


def test_assign_training_point_to_its_interior_chart(circle_model):
    atlas = circle_model.atlas
    for i in range(0, 40, 7):
        c, z = assign_initial(atlas, atlas.points[i])
        assert c == atlas.labels[i]
        assert np.allclose(z, atlas.charts[c].encode(atlas.points[i]))


def test_assign_tie_goes_to_lower_index():
    pts = np.array([[-1.0, 0.0], [1.0, 0.0], [5.0, 0.0]])
    atlas = identity_atlas(pts, [1, 0, 0], [([1, 2], []), ([0], [])])
    assert assign_initial(atlas, [0.0, 0.0])[0] == 1


def test_assignment_strategies_agree(circle_model):
    rng = np.random.default_rng(0)
    theta = rng.uniform(0, 2 * np.pi, 100)
    P = np.c_[np.cos(theta), np.sin(theta)] * (1 + 0.01 * rng.normal(size=(100, 1)))
    agree = sum(assign_initial(circle_model.atlas, p)[0] == assign_initial(circle_model.atlas, p, "nearest_centroid")[0]
                for p in P)
    assert agree >= 95


# -- stepping and rollout -------------------------------------------------------


def test_single_chart_never_transitions():
    ds = gen_circle()
    atlas = identity_atlas(ds.points, np.zeros(40, int), [(np.arange(40), [])])
    rot = np.array([[np.cos(0.1), -np.sin(0.1)], [np.sin(0.1), np.cos(0.1)]])
    model = AtlasModel(atlas, [ChartDynamics(0, Mlp([2, 2], [rot], [np.zeros(2)], ["linear"]))])
    traj = rollout(model, ds.points[0], 100)
    assert traj.events == [] and set(traj.chart_ids) == {0}


def test_rollout_zero_steps(circle_model):
    traj = rollout(circle_model, circle_model.atlas.points[3], 0)
    assert len(traj) == 1


def test_rollout_rejects_negative_steps(circle_model):
    with pytest.raises(ValueError):
        rollout(circle_model, circle_model.atlas.points[0], -1)


def test_divergence_reported_with_step():
    ds = gen_circle()
    atlas = identity_atlas(ds.points, np.zeros(40, int), [(np.arange(40), [])])
    model = AtlasModel(atlas, [ChartDynamics(0, Mlp([2, 2], [np.eye(2) * 1e200], [np.zeros(2)], ["linear"]))])
    with pytest.raises(RolloutDiverged) as err:
        rollout(model, ds.points[0], 10)
    assert err.value.step == 2


def test_circle_rollout_stays_on_circle_and_transitions(circle_model):
    traj = rollout(circle_model, circle_model.atlas.points[0], 1000)
    A = traj.ambient
    assert np.abs(np.linalg.norm(A, axis=1) - 1).max() < 0.05
    assert len(traj.events) > 0
    # transitions change chart only at events
    changes = np.flatnonzero(np.diff(traj.charts)) + 1
    assert changes.tolist() == [s for s, _, _ in traj.events]


def test_transition_consistency_bound(circle_model):
    atlas = circle_model.atlas
    max_err = [np.sqrt(((c.reconstruct(atlas.points[c.members]) - atlas.points[c.members]) ** 2).sum(1)).max()
               for c in atlas.charts]
    state = RolloutState(*assign_initial(atlas, atlas.points[0]))
    for _ in range(200):
        from candyman.neuralnet import forward
        a = state.chart_id
        z_new = forward(circle_model.dynamics[a].f, state.z)
        before = atlas.charts[a].decode(z_new)
        state, event = step(circle_model, state)
        if event is not None:
            after = atlas.charts[state.chart_id].decode(state.z)
            assert np.linalg.norm(after - before) <= 3 * (max_err[event[0]] + max_err[event[1]])


def test_chart_residency(circle_model):
    atlas = circle_model.atlas
    state = RolloutState(*assign_initial(atlas, atlas.points[5]))
    for _ in range(120):
        state, _ = step(circle_model, state)
        members, _, search = atlas.local(state.chart_id)
        j, _ = search.nearest(state.z)
        assert members[j] in atlas.charts[state.chart_id].members


def test_rollout_deterministic(circle_model):
    a = rollout(circle_model, circle_model.atlas.points[2], 200).ambient
    b = rollout(circle_model, circle_model.atlas.points[2], 200).ambient
    assert np.array_equal(a, b)


def test_single_ambient_search(circle_model, monkeypatch):
    from candyman.neighbor import NearestSearch
    calls = []
    original = NearestSearch.nearest

    def counting(self, q):
        calls.append(self.points.shape[1])
        return original(self, q)

    monkeypatch.setattr(NearestSearch, "nearest", counting)
    rollout(circle_model, circle_model.atlas.points[0], 50)
    ambient_dim = circle_model.atlas.ambient_dim
    latent = circle_model.atlas.charts[0].latent_dim
    assert calls.count(ambient_dim) == 1 if ambient_dim != latent else len(calls) == 51


# -- I/O ----------------------------------------------------------------------


def test_model_and_trajectory_round_trip(circle_model, tmp_path):
    save_model(circle_model, tmp_path / "m")
    back = load_model(tmp_path / "m")
    a = rollout(circle_model, circle_model.atlas.points[0], 100)
    b = rollout(back, back.atlas.points[0], 100)
    assert np.array_equal(a.ambient, b.ambient)
    a.to_csv(tmp_path / "t.csv")
    t = read_trajectory_csv(tmp_path / "t.csv")
    assert np.array_equal(t.ambient, a.ambient) and np.array_equal(t.charts, a.charts)
    header = (tmp_path / "t.csv").read_text().splitlines()[0].split(",")
    assert header[:2] == ["step", "chart_id"] and "phase" in header
