import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from freegaze.augment import AugmentConfig
from freegaze.contrastive import (CalibrationConfig, GazeErrorReport, InsufficientDataError, LossConfig,
                                  TrainState, ZeroVectorError, angular_error, calibrate, calibration_split,
                                  cosine_sim, distance_error, evaluate, ntxent_loss, pair_distance_gap,
                                  pretrain, write_report)
from freegaze.nnet import ArchitectureSpec
from freegaze.sampler import SamplerConfig
from freegaze.synthgaze import SynthConfig, generate_samples

from gradcheck import EPS, rel_error


def brute_force_loss(zp, zq, tau):
    """Direct double loop over anchors and candidates, no vectorisation."""
    n = len(zp)

    def sim(u, v):
        return sum(a * b for a, b in zip(u, v)) / (math.sqrt(sum(a * a for a in u)) * math.sqrt(sum(b * b for b in v)))

    total = 0.0
    for i in range(n):
        for a, b in ((zp, zq), (zq, zp)):
            num = math.exp(sim(a[i], b[i]) / tau)
            den = sum(math.exp(sim(a[i], b[k]) / tau) for k in range(n))
            total += -math.log(num / den)
    return total / (2 * n)


# ------------------------------------------------------------------ cosine

def test_cosine_basic(rng):
    u, v = rng.standard_normal(5), rng.standard_normal(5)
    assert cosine_sim(u, u) == pytest.approx(1.0)
    assert cosine_sim(u, -u) == pytest.approx(-1.0)
    assert cosine_sim(3.7 * u, v) == pytest.approx(cosine_sim(u, v))
    with pytest.raises(ZeroVectorError):
        cosine_sim(np.zeros(5), v)


# ------------------------------------------------------------------ loss

@pytest.mark.parametrize("n", [2, 3, 4])
def test_loss_matches_brute_force(n):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        zp, zq = rng.standard_normal((n, 5)), rng.standard_normal((n, 5))
        tau = rng.uniform(0.1, 1.0)
        assert ntxent_loss(zp, zq, tau)[0] == pytest.approx(brute_force_loss(zp, zq, tau), abs=1e-6)


@pytest.mark.parametrize("n", [2, 5, 16])
def test_uniform_similarity_gives_log_n(n, rng):
    z = np.tile(rng.standard_normal(8), (n, 1))
    assert abs(ntxent_loss(z, z.copy(), 0.5)[0] - math.log(n)) <= 1e-9


def test_orthonormal_pair_value():
    e = np.eye(2)
    loss = ntxent_loss(e, e, tau=1.0)[0]
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert loss == pytest.approx(0.31326, abs=1e-5)


def test_permutation_and_scale_invariance(rng):
    zp, zq = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    base = ntxent_loss(zp, zq)[0]
    perm = rng.permutation(6)
    assert ntxent_loss(zp[perm], zq[perm])[0] == pytest.approx(base, abs=1e-12)
    scales = rng.uniform(0.1, 10, (6, 1))
    assert ntxent_loss(zp * scales, zq * 2.5)[0] == pytest.approx(base, abs=1e-12)


@given(st.integers(2, 6), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_loss_nonnegative(n, seed):
    rng = np.random.default_rng(seed)
    assert ntxent_loss(rng.standard_normal((n, 3)), rng.standard_normal((n, 3)))[0] >= 0


def test_loss_rejects_bad_input(rng):
    z = rng.standard_normal((3, 4))
    with pytest.raises(ZeroVectorError):
        ntxent_loss(np.vstack([z[:2], np.zeros(4)]), z)
    with pytest.raises(ValueError):
        ntxent_loss(z[:1], z[:1])
    with pytest.raises(ValueError):
        LossConfig(temperature=0)


@pytest.mark.parametrize("n", [2, 3, 8])
def test_loss_gradients(n):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        zp, zq = rng.standard_normal((n, 6)), rng.standard_normal((n, 6))
        tau = rng.uniform(0.2, 1.0)
        _, dzp, dzq = ntxent_loss(zp, zq, tau)
        for z, d in ((zp, dzp), (zq, dzq)):
            num = np.zeros_like(z)
            for idx in np.ndindex(z.shape):
                old = z[idx]
                z[idx] = old + EPS
                fp = ntxent_loss(zp, zq, tau)[0]
                z[idx] = old - EPS
                fm = ntxent_loss(zp, zq, tau)[0]
                z[idx] = old
                num[idx] = (fp - fm) / (2 * EPS)
            assert rel_error(d, num) <= 1e-3


# ------------------------------------------------------------------ metrics

def test_angular_error_cases():
    assert angular_error((0.1, 0.2), (0.1, 0.2)) == pytest.approx(0.0, abs=1e-6)
    assert angular_error((0.0, 0.0), (0.0, math.radians(10))) == pytest.approx(10.0, abs=1e-6)
    assert angular_error((0.0, 0.0), (0.0, math.pi)) == pytest.approx(180.0, abs=1e-6)
    errs = angular_error(np.zeros((3, 2)), np.array([[0, 0], [0.1, 0], [0, -0.1]]))
    assert errs.shape == (3,) and np.all(errs >= 0)


@given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_angular_error_symmetric_and_bounded(p1, y1, p2, y2):
    a = angular_error((p1, y1), (p2, y2))
    assert 0 <= a <= 180
    assert a == pytest.approx(angular_error((p2, y2), (p1, y1)), abs=1e-9)


def test_distance_error():
    assert distance_error(0, 30, 10) == 0
    assert distance_error(2.95, 30, 0) == pytest.approx(1.546, abs=1e-3)
    vals = [distance_error(2.0, 50, a) for a in range(0, 31)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        distance_error(10, 30, 80)
    with pytest.raises(ValueError):
        distance_error(1, 30, -1)


def test_report_csv(tmp_path):
    r = GazeErrorReport("s001", np.array([1.0, 3.0]))
    assert r.mean == 2.0 and r.std == 1.0
    assert r.eps_curve(30).shape == (31,)
    write_report([r], tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "subject_id,n_test,mean_angular_deg,std_angular_deg,eps_cm_d30_a0,eps_cm_d50_a0"
    assert lines[1].startswith("s001,2,2.000000,1.000000,")


def test_pair_distance_gap():
    h = np.zeros((2, 3, 2))
    h[1] += [0.1, 0]             # subjects differ a little
    h[:, :, 1] += np.arange(3)   # gazes differ a lot
    cross_subject, cross_gaze = pair_distance_gap(h)
    assert cross_subject == pytest.approx(0.1)
    assert cross_gaze == pytest.approx(4 / 3)


# ------------------------------------------------------------------ training

@pytest.fixture(scope="module")
def tiny():
    cfg = SynthConfig(size=32, subjects=3, per_subject=12, calibration_subjects=1, seed=3)
    ds = generate_samples(cfg)
    return ds


SPEC = ArchitectureSpec(width=0.0625)
AUG = AugmentConfig()


def _pretrain(ds, epochs, seed=7, **kw):
    return pretrain(ds.subset(split="pretrain"), SPEC, LossConfig(), SamplerConfig(batch_size=4, seed=seed),
                    AUG, epochs, seed=seed, **kw)


def test_zero_epochs_is_initialization(tiny):
    st = _pretrain(tiny, 0)
    init = TrainState.initial(SPEC, 7)
    for k, v in init.tensors().items():
        np.testing.assert_array_equal(st.tensors()[k], v)
    assert st.step == 0


def test_subject_specific_batches_are_single_subject(tiny, tmp_path):
    log = []
    ds = tiny.subset(split="pretrain")
    st = _pretrain(tiny, 2, batch_log=log, log_path=tmp_path / "log.csv")
    assert len(log) == 2 * len(ds.subjects) == st.step
    for idx in log:
        assert len({ds.samples[i].subject_id for i in idx}) == 1
    lines = (tmp_path / "log.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "step,epoch,loss,lr,seconds" and len(lines) == st.step + 1


def test_pretrain_deterministic_checkpoint(tiny, tmp_path):
    digests = []
    for k in range(2):
        st = _pretrain(tiny, 1)
        st.save(tmp_path / f"{k}.fgze")
        digests.append(hashlib.sha256((tmp_path / f"{k}.fgze").read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_checkpoint_resume_roundtrip(tiny, tmp_path):
    st = _pretrain(tiny, 1)
    st.save(tmp_path / "a.fgze")
    back = TrainState.load(tmp_path / "a.fgze")
    assert back.epoch == st.epoch and back.step == st.step and back.seed == st.seed
    assert back.flags["sampling"] == "subject_specific"
    for k, v in st.tensors().items():
        np.testing.assert_array_equal(back.tensors()[k], v.astype(np.float32))


def _cal_sets(ds, seed=0):
    subj = ds.subset(split="calibration")
    samples = subj.of_subject(subj.subjects[0])
    return calibration_split(samples, 6, 3, seed)


def test_calibration_split_is_partition(tiny):
    subj = tiny.subset(split="calibration")
    samples = subj.of_subject(subj.subjects[0])
    ft, val, test = calibration_split(samples, 6, 3, seed=1)
    names = [s.name for s in ft + val + test]
    assert len(ft) == 6 and len(val) == 3 and sorted(names) == sorted(s.name for s in samples)


def test_calibrate_returns_best_validation(tiny):
    ft, val, _ = _cal_sets(tiny)
    st = _pretrain(tiny, 0)
    cal = calibrate(st, ft, val, CalibrationConfig(epochs=5, batch_size=3, lr=0.01))
    hist = cal.metadata["val_history"]
    assert len(hist) == 6
    assert cal.metadata["best_val_deg"] <= cal.metadata["final_val_deg"] + 1e-9
    assert cal.metadata["best_val_deg"] == pytest.approx(min(hist), abs=1e-5)
    from freegaze.contrastive import mean_angular_error
    assert mean_angular_error(cal, val) == pytest.approx(cal.metadata["best_val_deg"], abs=1e-4)
    assert cal.projection is None and cal.estimator is not None


def test_calibrate_freeze_only_touches_estimator(tiny):
    ft, val, _ = _cal_sets(tiny)
    st = _pretrain(tiny, 0)
    cal = calibrate(st, ft, val, CalibrationConfig(epochs=3, batch_size=3, lr=0.05, freeze_embedding=True))
    for k, v in st.embedding.state_tensors().items():
        np.testing.assert_array_equal(cal.embedding.state_tensors()[k], v)


def test_calibrate_insufficient_data(tiny):
    ft, val, _ = _cal_sets(tiny)
    st = _pretrain(tiny, 0)
    with pytest.raises(InsufficientDataError):
        calibrate(st, ft[:1], val, CalibrationConfig(epochs=1))


def test_evaluate_untrained(tiny):
    ft, val, test = _cal_sets(tiny)
    st = _pretrain(tiny, 0)
    cal = calibrate(st, ft, val, CalibrationConfig(epochs=0))
    rep = evaluate(cal, "s", test)
    assert len(rep.errors_deg) == len(test) and np.all(np.isfinite(rep.errors_deg))
