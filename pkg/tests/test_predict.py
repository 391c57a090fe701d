import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from urbanflow import scenegen
from urbanflow.errors import DivergenceError, InvalidArgument, InvalidGeometry
from urbanflow.predict import evaluate as ev
from urbanflow.predict import models, train
from urbanflow.predict.data import PairRecord, pair_state, read_dataset, write_dataset
from urbanflow.predict.reference import IntersectionGeometry, reference_trajectory


@pytest.fixture(scope="module")
def records():
    world = scenegen.gen_world(21, 12)
    return [scenegen.pair_record(world, p) for p in world.pairs]


class TestPairState:
    @given(st.integers(0, 10 ** 6))
    def test_invariants(self, seed):
        rng = np.random.default_rng(seed)
        xy, v = rng.normal(0, 30, (2, 5, 2)), rng.normal(0, 10, (2, 5, 2))
        s = pair_state(xy[0], v[0], xy[1], v[1])
        assert np.abs(np.hypot(s[:, 0], s[:, 1]) - s[:, 5]).max() <= 1e-9
        assert np.all((s[:, [4, 10]] > -math.pi) & (s[:, [4, 10]] <= math.pi))

    def test_dataset_round_trip(self, tmp_path, records):
        write_dataset(tmp_path / "d.jsonl", records[:3], header="stage=gen")
        back = read_dataset(tmp_path / "d.jsonl")
        for a, b in zip(records, back):
            assert np.array_equal(a.states, b.states) and a.direction == b.direction
            assert np.array_equal(a.target_xy, b.target_xy) and a.yield_label == b.yield_label


class TestReference:
    geom = IntersectionGeometry()

    def test_straight(self):
        ref = reference_trajectory(self.geom, "S", "GS")
        assert np.allclose(ref.points[:, 0], 1.75, atol=1e-12)
        assert np.allclose(ref.heading_at(ref.s), math.pi / 2, atol=1e-12)
        assert np.allclose(np.diff(ref.s)[:-1], 0.5)

    @pytest.mark.parametrize("direction,end,heading", [("TL", (-10.0, 1.75), math.pi), ("TR", (10.0, -1.75), 0.0)])
    def test_turn_endpoints(self, direction, end, heading):
        ref = reference_trajectory(self.geom, "S", direction)
        start = ref.point_at(ref.arc_start)
        assert np.abs(start - [1.75, -10.0]).max() <= 1e-6
        assert np.abs(ref.point_at(ref.arc_end) - end).max() <= 1e-6
        assert abs(ref.heading_at(ref.arc_start) - math.pi / 2) <= 1e-6
        dh = ref.heading_at(ref.arc_end) - heading
        assert abs(math.atan2(math.sin(dh), math.cos(dh))) <= 1e-6
        # circle through both endpoints, centred at the box corner, tangent to both lanes
        corner = np.array([-10.0, -10.0]) if direction == "TL" else np.array([10.0, -10.0])
        mid = ref.point_at(0.5 * (ref.arc_start + ref.arc_end))
        radii = [np.linalg.norm(p - corner) for p in (start, ref.point_at(ref.arc_end), mid)]
        assert np.ptp(radii) <= 1e-9 and radii[0] == pytest.approx(ref.radius)

    def test_right_tighter_than_left(self):
        assert reference_trajectory(self.geom, "E", "TR").radius < reference_trajectory(self.geom, "E", "TL").radius

    @pytest.mark.parametrize("arm", ["S", "E", "N", "W"])
    @pytest.mark.parametrize("direction", ["GS", "TL", "TR"])
    def test_tangent_continuity(self, arm, direction):
        ref = reference_trajectory(self.geom, arm, direction)
        step = np.diff(ref.point_at(np.arange(0, ref.length, 0.05)), axis=0)
        ang = np.arctan2(step[:, 1], step[:, 0])
        turn = np.abs(np.arctan2(np.sin(np.diff(ang)), np.cos(np.diff(ang))))
        assert np.degrees(turn).max() <= 1.0

    def test_rotational_symmetry(self):
        a = reference_trajectory(self.geom, "S", "TL").points
        b = reference_trajectory(self.geom, "E", "TL").points
        assert np.allclose(b, a @ np.array([[0, 1], [-1, 0]]), atol=1e-9)

    def test_missing_arm(self):
        geom = IntersectionGeometry(arms=("S", "N", "E"))
        with pytest.raises(InvalidGeometry):
            reference_trajectory(geom, "S", "TL")


class TestIntentionNet:
    def test_zero_heads_uniform(self, records):
        net = models.IntentionNet(hidden=8)
        for k in ("dir_W", "dir_b", "yield_W", "yield_b"):
            net.params[k][:] = 0
        p_dir, p_yld = models.intention_forward(net.params, models.pair_features(records[0].states))
        assert np.all(p_dir == 1 / 3) and np.all(p_yld == 0.5)

    def test_probabilities(self, records):
        p_dir, p_yld = models.IntentionNet(hidden=8).predict(records[0])
        assert len(p_dir) == records[0].n_steps
        assert np.abs(p_dir.sum(1) - 1).max() <= 1e-9 and np.abs(p_yld.sum(1) - 1).max() <= 1e-9
        assert np.all((p_dir > 0) & (p_dir < 1))

    def test_empty_sequence(self):
        with pytest.raises(InvalidArgument):
            models.intention_forward(models.IntentionNet(hidden=4).params, np.zeros((0, 14)))

    def test_gradient(self, records):
        net = models.IntentionNet(hidden=3, seed=4)
        batch = models.intention_batch([records[0], records[1]])
        batch = (batch[0][:, :6], batch[1][:, :6], batch[2], batch[3])
        _, grads = net.loss_and_grad(net.params, batch)
        eps = 1e-5
        worst = 0.0
        for k, arr in net.params.items():
            for idx in list(np.ndindex(arr.shape))[:12]:
                keep = arr[idx]
                arr[idx] = keep + eps
                up = net.loss_and_grad(net.params, batch)[0]
                arr[idx] = keep - eps
                down = net.loss_and_grad(net.params, batch)[0]
                arr[idx] = keep
                num = (up - down) / (2 * eps)
                worst = max(worst, abs(num - grads[k][idx]) / max(abs(num), abs(grads[k][idx]), 1e-6))
        assert worst <= 1e-4


class TestTrajectoryNet:
    def test_zero_head_reproduces_reference(self, records):
        net = models.TrajectoryNet("reference", hidden=8, window=5, horizon=10)
        net.params["out_W"][:] = 0
        net.params["out_b"][:] = 0
        smp = net.windows(records[0], stride=7)
        assert np.array_equal(net.predict(smp), smp.ref)
        pts, _, _ = models.reference_samples(records[0], int(smp.step[0]), records[0].direction_index, 10)
        assert np.array_equal(smp.ref[0], pts)

    def test_shape(self, records):
        net = models.TrajectoryNet("plain", hidden=8, window=20, horizon=30)
        smp = net.windows(records[0], steps=[25])
        assert net.predict(smp).shape == (1, 30, 2)
        assert records[0].dt * net.horizon == pytest.approx(3.0)

    def test_horizon_mismatch(self, records):
        net = models.TrajectoryNet("plain", hidden=4, window=5, horizon=10)
        with pytest.raises(InvalidArgument):
            models.trajectory_forward(net.params, net, net.windows(records[0], steps=[10]), 12)

    def test_bad_mode(self):
        with pytest.raises(InvalidArgument):
            models.TrajectoryNet("oracle")

    def test_translation_consistency(self, records):
        rec = records[2]
        offset = np.array([37.25, -12.5])
        world = rec.states.copy()
        ego, tgt = world[:, 0:2] + offset, world[:, 6:8] + offset
        shifted = pair_state(ego, world[:, 2:4], tgt, world[:, 8:10], center=offset)
        assert np.abs(shifted - rec.states).max() <= 1e-12
        moved = PairRecord(rec.pair_id, rec.dt, shifted, rec.direction, rec.yield_label,
                           rec.target_xy, rec.target_dist_to_entry)
        net = models.TrajectoryNet("reference", hidden=8, window=5, horizon=10, seed=3)
        a = net.predict(net.windows(rec, stride=9))
        b = net.predict(net.windows(moved, stride=9))
        assert np.abs((b + offset) - (a + offset)).max() <= 1e-9
        assert np.abs(a - b).max() <= 1e-9

    @pytest.mark.parametrize("mode", models.MODES)
    def test_gradient(self, records, mode):
        net = models.TrajectoryNet(mode, hidden=3, window=4, horizon=3, seed=1)
        smp = net.samples(records[:2], stride=40)
        _, grads = net.loss_and_grad(net.params, smp)
        eps, worst = 1e-5, 0.0
        for k, arr in net.params.items():
            for idx in list(np.ndindex(arr.shape))[:10]:
                keep = arr[idx]
                arr[idx] = keep + eps
                up = net.loss_and_grad(net.params, smp)[0]
                arr[idx] = keep - eps
                down = net.loss_and_grad(net.params, smp)[0]
                arr[idx] = keep
                num = (up - down) / (2 * eps)
                worst = max(worst, abs(num - grads[k][idx]) / max(abs(num), abs(grads[k][idx]), 1e-6))
        assert worst <= 1e-4

    def test_intent_overrides(self, records):
        net = models.TrajectoryNet("intention", hidden=4, window=5, horizon=5)
        rec = records[0]
        wrong = (rec.direction_index + 1) % 3
        smp = net.samples([rec], stride=50, intents_by_pair={rec.pair_id: {s: (wrong, 0) for s in range(rec.n_steps)}})
        assert np.all(smp.x[:, :, 14 + wrong] == 1)

    def test_model_file_round_trip(self, tmp_path, records):
        for net in (models.IntentionNet(hidden=5, seed=2), models.TrajectoryNet("reference", hidden=5, window=4, horizon=6)):
            models.save_model(tmp_path / "m.bin", net, provenance="stage=test")
            back = models.load_model(tmp_path / "m.bin")
            assert back.header() == net.header()
            assert all(np.array_equal(back.params[k], net.params[k]) for k in net.params)

    def test_truncated_model_file(self, tmp_path):
        models.save_model(tmp_path / "m.bin", models.IntentionNet(hidden=4))
        data = (tmp_path / "m.bin").read_bytes()
        (tmp_path / "m.bin").write_bytes(data[:-8])
        with pytest.raises(InvalidArgument):
            models.load_model(tmp_path / "m.bin")


class TestTrain:
    def test_zero_lr(self, records):
        net = models.TrajectoryNet("plain", hidden=6, window=5, horizon=5)
        before = {k: v.copy() for k, v in net.params.items()}
        train.train(net, records[:3], train.TrainConfig(lr=0.0, epochs=3, stride=20))
        assert all(np.array_equal(before[k], net.params[k]) for k in before)

    def test_one_step_descends(self, records):
        net = models.TrajectoryNet("reference", hidden=6, window=5, horizon=5)
        one = net.samples(records[:1], stride=200)
        one = one.subset(np.array([0]))
        before = net.loss_and_grad(net.params, one)[0]
        train.train(net, one, train.TrainConfig(lr=1e-4, epochs=1, batch_size=1))
        assert net.loss_and_grad(net.params, one)[0] < before

    def test_overfit_ten_samples(self, records):
        net = models.TrajectoryNet("plain", hidden=16, window=5, horizon=5, seed=0)
        smp = net.samples(records[:5], stride=60)
        smp = smp.subset(np.arange(10))
        result = train.train(net, smp, train.TrainConfig(lr=1e-2, epochs=2000, batch_size=10, lr_decay=0.998))
        assert result.loss_trace[-1] <= 1e-3

    def test_intention_loss_decreases(self, records):
        net = models.IntentionNet(hidden=8)
        result = train.train(net, records, train.TrainConfig(epochs=15, batch_size=4))
        assert result.loss_trace[-1] < result.loss_trace[0]

    def test_deterministic(self, records):
        nets = [models.TrajectoryNet("intention", hidden=6, window=5, horizon=5, seed=1) for _ in range(2)]
        for net in nets:
            train.train(net, records[:4], train.TrainConfig(epochs=3, stride=10, seed=9))
        assert all(np.array_equal(nets[0].params[k], nets[1].params[k]) for k in nets[0].params)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, records):
        net = models.TrajectoryNet("plain", hidden=4, window=5, horizon=5)
        smp = net.samples(records[:1], stride=30)
        smp.future[:] = np.inf
        with pytest.raises(DivergenceError) as info:
            train.train(net, smp, train.TrainConfig(epochs=2))
        assert info.value.loss_trace == [] and np.all(np.isfinite(info.value.params["out_W"]))

    def test_empty(self):
        with pytest.raises(InvalidArgument):
            train.train(models.IntentionNet(hidden=4), [])

    def test_out_of_fold_intents_cover_every_step(self, records):
        cfg = train.AblationConfig(hidden=4, intention=train.TrainConfig(epochs=1), folds=2)
        intents = train.out_of_fold_intents(records[:4], cfg)
        assert sorted(intents) == sorted(r.pair_id for r in records[:4])
        assert all(len(intents[r.pair_id]) == r.n_steps for r in records[:4])


class LabelOracle:
    def predict(self, rec):
        d = np.zeros((rec.n_steps, 3))
        d[:, rec.direction_index] = 1
        y = np.zeros((rec.n_steps, 2))
        y[:, rec.yield_index] = 1
        return d, y


class ConstantGS:
    def predict(self, rec):
        return np.tile([1.0, 0, 0], (rec.n_steps, 1)), np.tile([1.0, 0], (rec.n_steps, 1))


class FutureOracle(models.TrajectoryNet):
    def predict(self, smp):
        return smp.future


class TestEvaluate:
    def test_bin_index(self):
        idx = ev.bin_index([60.0, 59.9, 50.0, 0.0, -0.1, -20.0, -20.1, 61])
        assert idx.tolist() == [-1, 0, 0, 5, 6, 7, -1, -1]

    def test_oracle(self, records):
        bins = ev.evaluate(records, LabelOracle(), FutureOracle("reference", hidden=2, window=5, horizon=10))
        for b in bins:
            if b.n_steps:
                assert b.direction_accuracy == 1.0 and b.yield_accuracy == 1.0
            if b.n_windows:
                assert b.mse == 0.0
        assert ev.overall(bins) == (1.0, 1.0, 0.0)

    def test_constant_gs(self):
        world = scenegen.gen_world(5, 60)
        recs = [scenegen.pair_record(world, p) for p in world.pairs]
        bins = ev.evaluate(recs, ConstantGS())
        # step-weighted: turning targets are slower and contribute more steps
        in_bins = [(r.direction, np.sum(ev.bin_index(r.target_dist_to_entry) >= 0)) for r in recs]
        gs_share = sum(n for d, n in in_bins if d == "GS") / sum(n for _, n in in_bins)
        assert ev.overall(bins)[0] == pytest.approx(gs_share, abs=1e-12)
        assert abs(bins[0].direction_accuracy - 1 / 3) <= 0.05

    def test_empty_bins_absent(self, records, tmp_path):
        bins = ev.evaluate(records, LabelOracle(), edges=(500.0, 400.0, 0.0))
        assert bins[0].n_steps == 0 and bins[0].direction_accuracy is None and bins[0].mse is None
        ev.write_metrics(tmp_path / "m.csv", bins, header="stage=eval")
        rows = (tmp_path / "m.csv").read_text().splitlines()
        assert rows[0].startswith("#") and rows[2].split(",")[3] == ""

    def test_closed_loop_uses_predicted_intent(self, records):
        net = models.TrajectoryNet("reference", hidden=4, window=5, horizon=5)
        a = ev.mean_mse(net, records[:3], LabelOracle(), closed_loop=True, stride=5)
        b = ev.mean_mse(net, records[:3], None, stride=5)
        c = ev.mean_mse(net, records[:3], ConstantGS(), closed_loop=True, stride=5)
        assert a == b and c != a
