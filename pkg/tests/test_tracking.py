import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from urbanflow import tracking
from urbanflow.errors import InvalidArgument, InvalidInput
from urbanflow.tracking import KalmanModel, KalmanState, Measurement, TrackerConfig

from oracles import greedy_replay, riccati_oracle

DT = 1.0 / 30.0


def cv_truth(n, rng, speed=8.0, start=(0.0, 0.0)):
    v = rng.normal(0, 1, 2)
    v = speed * v / np.linalg.norm(v)
    return np.asarray(start) + np.outer(np.arange(n) * DT, v), v


class TestKalmanStep:
    def test_scalar_hand_example(self):
        model = KalmanModel(np.eye(1), np.eye(1), np.zeros((1, 1)), np.eye(1), 1.0)
        out = tracking.kf_step(KalmanState(np.zeros(1), np.eye(1)), model, np.array([2.0]))
        assert out.x[0] == pytest.approx(1.0) and out.P[0, 0] == pytest.approx(0.5)

    def test_noiseless_consistency(self, rng):
        model = KalmanModel.constant_velocity(DT)
        model = KalmanModel(model.F, model.H, np.zeros((4, 4)), 1e-12 * np.eye(2), DT)
        truth, v = cv_truth(60, rng)
        state = KalmanState(np.array([*truth[0], *v]), np.eye(4) * 1e-12)
        for z in truth[1:]:
            state = tracking.kf_step(state, model, z)
            assert np.allclose(state.x[:2], z, atol=1e-9)

    def test_steady_state_matches_riccati(self):
        model = KalmanModel.constant_velocity(DT)
        state = KalmanState(np.zeros(4), np.eye(4) * 10.0)
        for _ in range(1000):
            state = tracking.kf_predict(state, model)
            state, _, _ = tracking.kf_update(state, model, np.zeros(2))
        prior = tracking.kf_predict(state, model).P
        assert np.abs(prior - riccati_oracle(model, 1000)).max() <= 1e-9

    def test_prediction_only(self):
        model = KalmanModel.constant_velocity(DT)
        s = tracking.kf_step(KalmanState(np.array([0, 0, 3.0, 0]), np.eye(4)), model, None)
        assert np.allclose(s.x, [3.0 * DT, 0, 3.0, 0])

    @given(st.integers(0, 10 ** 6))
    def test_covariance_symmetric_psd(self, seed):
        rng = np.random.default_rng(seed)
        model = KalmanModel.constant_velocity(DT, accel_var=rng.uniform(0.1, 5), meas_std=rng.uniform(0.05, 1))
        a = rng.normal(size=(4, 4))
        state = KalmanState(rng.normal(size=4), a @ a.T + np.eye(4))
        for _ in range(20):
            z = rng.normal(size=2) if rng.random() < 0.7 else None
            state = tracking.kf_step(state, model, z)
            assert np.abs(state.P - state.P.T).max() <= 1e-10
            assert np.linalg.eigvalsh(state.P).min() >= -1e-9

    def test_innovation_whiteness(self):
        rng = np.random.default_rng(5)
        model = KalmanModel.constant_velocity(DT, accel_var=2.0, meas_std=0.2)
        x = np.array([0.0, 0.0, 5.0, 1.0])
        state = KalmanState(x.copy(), np.diag([0.04, 0.04, 1.0, 1.0]))
        chol = np.linalg.cholesky(model.Q + 1e-15 * np.eye(4))
        nis = []
        for _ in range(1000):
            x = model.F @ x + chol @ rng.normal(size=4)
            z = x[:2] + rng.normal(0, 0.2, 2)
            pred = tracking.kf_predict(state, model)
            state, nu, s = tracking.kf_update(pred, model, z)
            nis.append(float(nu @ np.linalg.solve(s, nu)))
        assert 1.6 <= np.mean(nis) <= 2.4

    @pytest.mark.parametrize("bad", ["Q", "R", "dt"])
    def test_invalid_model(self, bad):
        m = KalmanModel.constant_velocity(DT)
        kw = dict(F=m.F, H=m.H, Q=m.Q, R=m.R, dt=DT)
        kw[bad] = {"Q": -np.eye(4), "R": np.zeros((2, 2)), "dt": 0.0}[bad]
        with pytest.raises(InvalidArgument):
            KalmanModel(**kw)


class TestAssociate:
    def test_single_in_gate(self):
        matches, ut, ud = tracking.associate([[10, 0]], [[10.2, 0]], 2.0)
        assert matches == [(0, 0)] and ut == [] and ud == []

    def test_gate_exclusion(self):
        matches, ut, ud = tracking.associate([[0, 0]], [[5, 0]], 2.0)
        assert matches == [] and ut == [0] and ud == [0]

    def test_invalid_gate(self):
        with pytest.raises(InvalidArgument):
            tracking.associate([[0, 0]], [[0, 0]], 0.0)

    @given(st.integers(0, 10 ** 6))
    def test_matches_replay_oracle(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.uniform(0, 3, (5, 2))
        dets = rng.uniform(0, 3, (5, 2))
        matches, _, _ = tracking.associate(pred, dets, 3.0)
        assert sorted(matches) == greedy_replay(pred, dets, 3.0)


class TestRunTracker:
    model = KalmanModel.constant_velocity(DT)

    def test_single_object(self, rng):
        truth, _ = cv_truth(50, rng)
        dets = [Measurement(k, p) for k, p in enumerate(truth)]
        tracks = tracking.run_tracker(dets, self.model)
        assert len(tracks) == 1 and tracks[0].status == "confirmed" and len(tracks[0].history) == 50

    def test_disappearance_kills_track(self, rng):
        truth, _ = cv_truth(60, rng)
        gap = range(20, 20 + TrackerConfig().max_misses + 1)
        dets = [Measurement(k, p) for k, p in enumerate(truth) if k not in gap]
        tracks = tracking.run_tracker(dets, self.model)
        assert len(tracks) == 2
        assert tracks[0].status == "dead" and tracks[0].frames[-1] == 19
        assert tracks[1].frames[0] == gap[-1] + 1

    def test_short_gap_survives(self, rng):
        truth, _ = cv_truth(60, rng)
        dets = [Measurement(k, p) for k, p in enumerate(truth) if not 20 <= k < 23]
        tracks = tracking.run_tracker(dets, self.model)
        assert len(tracks) == 1 and len(tracks[0].history) == 60

    def test_tentative_dies_on_first_miss(self):
        dets = [Measurement(0, (0, 0)), Measurement(5, (50, 50))]
        tracks = tracking.run_tracker(dets, self.model)
        assert [t.status for t in tracks][0] == "dead" and tracks[0].confirmed_at is None

    def test_status_transitions(self, rng):
        truth, _ = cv_truth(30, rng)
        tracks = tracking.run_tracker([Measurement(k, p) for k, p in enumerate(truth)], self.model)
        assert tracks[0].confirmed_at == 2

    def test_rejects_unsorted(self):
        with pytest.raises(InvalidArgument):
            tracking.run_tracker([Measurement(3, (0, 0)), Measurement(1, (0, 0))], self.model)

    def test_deterministic(self, rng):
        truth, _ = cv_truth(40, rng)
        dets = [Measurement(k, p + rng.normal(0, 0.2, 2)) for k, p in enumerate(truth)]
        a = tracking.run_tracker(dets, self.model)
        b = tracking.run_tracker(dets, self.model)
        assert np.array_equal(a[0].positions(), b[0].positions())

    def test_crossing_objects_keep_identity(self):
        rng = np.random.default_rng(2)
        n = 120
        t = np.arange(n) * DT
        a = np.column_stack([8 * t, np.zeros(n)])
        b = np.column_stack([8 * t[::-1], np.full(n, 6.0)])
        dets = []
        for k in range(n):
            dets.append(Measurement(k, a[k] + rng.normal(0, 0.2, 2), truth_id=0))
            dets.append(Measurement(k, b[k] + rng.normal(0, 0.2, 2), truth_id=1))
        tracks = tracking.run_tracker(dets, self.model)
        rep = tracking.identity_report(tracks, dets)
        assert rep.identity_switches == 0 and rep.correct_fraction >= 0.95


class TestSmoother:
    model = KalmanModel.constant_velocity(DT, meas_std=0.3)

    def noisy_track(self, seed, n=200):
        rng = np.random.default_rng(seed)
        truth, _ = cv_truth(n, rng)
        z = truth + rng.normal(0, 0.3, truth.shape)
        tracks = tracking.run_tracker([Measurement(k, p) for k, p in enumerate(z)], self.model)
        return truth, z, tracks[0]

    def test_noiseless(self, rng):
        model = KalmanModel.constant_velocity(DT)
        model = KalmanModel(model.F, model.H, np.zeros((4, 4)), 1e-12 * np.eye(2), DT)
        truth, v = cv_truth(30, rng)
        tracks = tracking.run_tracker([Measurement(k, p) for k, p in enumerate(truth)], model,
                                      TrackerConfig(init_vel_var=1e-12))
        tracks[0].history[0] = tracks[0].history[0]._replace(
            filtered=KalmanState(np.array([*truth[0], *v]), 1e-12 * np.eye(4)))
        for k in range(1, len(tracks[0].history)):
            prev = tracks[0].history[k - 1].filtered
            pred = tracking.kf_predict(prev, model)
            post, _, _ = tracking.kf_update(pred, model, truth[k])
            tracks[0].history[k] = tracks[0].history[k]._replace(predicted=pred, filtered=post)
        sm = tracking.rts_smooth(tracks[0], model)
        assert np.abs(sm.x[:, :2] - truth).max() <= 1e-9
        assert np.abs(tracks[0].positions() - truth).max() <= 1e-9

    def test_mse_and_jerk(self):
        truth, z, trk = self.noisy_track(3)
        sm = tracking.rts_smooth(trk, self.model)
        mse_f = np.mean(np.sum((trk.positions() - truth) ** 2, axis=1))
        mse_s = np.mean(np.sum((sm.x[:, :2] - truth) ** 2, axis=1))
        assert mse_s <= mse_f
        assert tracking.rms_jerk(sm.x[:, :2], DT) <= 0.5 * tracking.rms_jerk(z, DT)

    def test_covariance_psd(self):
        _, _, trk = self.noisy_track(4, 80)
        sm = tracking.rts_smooth(trk, self.model)
        for p in sm.P:
            assert np.abs(p - p.T).max() <= 1e-10 and np.linalg.eigvalsh(p).min() >= -1e-9

    def test_missing_covariances(self):
        _, _, trk = self.noisy_track(5, 20)
        trk.history[3] = trk.history[3]._replace(predicted=None)
        with pytest.raises(InvalidInput):
            tracking.rts_smooth(trk, self.model)

    def test_too_short(self):
        _, _, trk = self.noisy_track(6, 20)
        trk.history = trk.history[:1]
        with pytest.raises(InvalidInput):
            tracking.rts_smooth(trk, self.model)


class TestFiles:
    def test_detections_round_trip(self, tmp_path):
        dets = [Measurement(0, (1.5, -2.0), 4.4, 1.9, 0.9, 7), Measurement(1, (1.6, -2.1))]
        tracking.write_detections(tmp_path / "d.jsonl", dets, header="stage=x")
        back = tracking.read_detections(tmp_path / "d.jsonl")
        assert [(m.frame, tuple(m.z), m.truth_id) for m in back] == [(0, (1.5, -2.0), 7), (1, (1.6, -2.1), None)]

    def test_histories_round_trip(self, tmp_path, rng):
        truth, _ = cv_truth(30, rng)
        model = KalmanModel.constant_velocity(DT)
        tracks = tracking.run_tracker([Measurement(k, p, truth_id=3) for k, p in enumerate(truth)], model)
        tracking.write_track_histories(tmp_path / "t.jsonl", tracks)
        back = tracking.read_track_histories(tmp_path / "t.jsonl")
        a, b = tracking.rts_smooth(tracks[0], model), tracking.rts_smooth(back[0], model)
        assert np.array_equal(a.x, b.x) and back[0].confirmed_at == tracks[0].confirmed_at

    def test_trajectory_csv(self, tmp_path, rng):
        truth, _ = cv_truth(20, rng)
        tracks = tracking.run_tracker([Measurement(k, p) for k, p in enumerate(truth)],
                                      KalmanModel.constant_velocity(DT))
        rows = tracking.trajectory_rows(tracks[0])
        tracking.write_trajectories(tmp_path / "t.csv", rows, header="stage=track")
        back = tracking.read_trajectories(tmp_path / "t.csv")[0]
        assert list(back) == list(tracking.TRAJECTORY_COLUMNS)
        assert np.allclose(back["heading_rad"], np.arctan2(back["vy"], back["vx"]))
        assert np.array_equal(back["frame"], np.arange(20))
