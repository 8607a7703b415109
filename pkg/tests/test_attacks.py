"""Black-box engines: estimation accuracy, query accounting, confinement."""

import numpy as np
import pytest

from localadv.attacks import (
    fd_gradient_masked,
    ge_attack,
    ge_attack_global,
    local_black_box_attack,
    make_pixel_groups,
    rs_attack,
    rs_attack_fixed_value,
)
from localadv.models import make_black_box
from localadv.oracle import Prediction, is_adversarial
from localadv.salience import salience_mask
from localadv.types import (
    BinaryMask,
    DEFAULT_DOMAIN,
    GEConfig,
    ImageTensor,
    RSConfig,
)


class ScriptedOracle:
    """Plays back a fixed prediction sequence; records every queried image."""

    def __init__(self, predictions):
        self._seq = list(predictions)
        self.query_count = 0
        self.images = []

    def query(self, img):
        if not self._seq:
            raise AssertionError("oracle script exhausted")
        self.query_count += 1
        self.images.append(img)
        return self._seq.pop(0)


class StubbornOracle:
    """Never flips; returns the true label with a fixed probability."""

    def __init__(self, y, prob=0.9):
        self.y = y
        self.prob = prob
        self.query_count = 0

    def query(self, img):
        self.query_count += 1
        return Prediction(self.y, self.prob)


class SigmoidOracle:
    """Smooth scalar surrogate: f_y(x) = sigmoid(w . x / 4096), label fixed."""

    def __init__(self, w, y=0):
        self.w = np.asarray(w, dtype=float)
        self.y = y
        self.query_count = 0

    def prob(self, data):
        return 1.0 / (1.0 + np.exp(-float((self.w * data).sum()) / 4096.0))

    def gradient(self, data):
        p = self.prob(data)
        return p * (1.0 - p) * self.w / 4096.0

    def query(self, img):
        self.query_count += 1
        return Prediction(self.y, self.prob(img.data))


def _img(shape=(4, 4, 1), value=100.0):
    return ImageTensor(np.full(shape, value), DEFAULT_DOMAIN)


def _single_pixel_mask(shape, m, n):
    mask = np.zeros(shape)
    mask[m, n] = 1.0
    return BinaryMask(mask)


def test_pixel_groups_partition_support():
    rng = np.random.default_rng(0)
    for trial in range(20):
        mask = BinaryMask((rng.random((8, 7)) < 0.5).astype(float))
        if mask.popcount() == 0:
            continue
        size = int(rng.integers(1, 9))
        groups = make_pixel_groups(mask, size, seed=trial)
        seen = set()
        for g in groups:
            assert 1 <= len(g.coordinates) <= size
            for coord in g.coordinates:
                assert coord not in seen
                seen.add(coord)
        support = {(int(m), int(n)) for m, n in np.argwhere(mask.data == 1)}
        assert seen == support
        assert len(groups) == int(np.ceil(len(support) / size))


def test_fd_singleton_estimate_matches_formula():
    # f(x + eps e) = 0.6, f(x - eps e) = 0.5, eps = 0.05 -> (0.6-0.5)/0.1 = 1.0
    oracle = ScriptedOracle([Prediction(0, 0.6), Prediction(0, 0.5)])
    grad, hit = fd_gradient_masked(
        _img(), 0, oracle, _single_pixel_mask((4, 4), 1, 2), 0.05, 1, seed=0
    )
    assert hit is None
    assert grad[1, 2] == pytest.approx(1.0, abs=1e-12)
    assert np.count_nonzero(grad) == 1


def test_fd_skips_unmasked_pixels_and_counts_queries():
    # 10 discriminative pixels, group size 5 -> 2 groups -> 4 queries
    mask = np.zeros((5, 5))
    mask.ravel()[:10] = 1.0
    oracle = StubbornOracle(0, 0.7)
    grad, hit = fd_gradient_masked(
        _img((5, 5, 1)), 0, oracle, BinaryMask(mask), 1.0, 5, seed=1
    )
    assert oracle.query_count == 4
    assert hit is None
    assert np.count_nonzero(grad[mask == 0]) == 0


def test_fd_probes_perturb_all_channels_of_group():
    oracle = ScriptedOracle([Prediction(0, 0.6), Prediction(0, 0.5)])
    x = _img((3, 3, 3))
    fd_gradient_masked(x, 0, oracle, _single_pixel_mask((3, 3), 0, 0), 2.0, 1, seed=0)
    plus = oracle.images[0].data
    assert np.array_equal(plus[0, 0], [102.0, 102.0, 102.0])
    assert np.count_nonzero(plus - x.data) == 3


def test_fd_matches_analytic_gradient_on_smooth_surrogate():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(6, 6, 1))
    oracle = SigmoidOracle(w)
    data = rng.uniform(80, 160, size=(6, 6, 1))
    x = ImageTensor(data, DEFAULT_DOMAIN)
    mask = BinaryMask(np.ones((6, 6)))
    grad, hit = fd_gradient_masked(x, 0, oracle, mask, 1e-3, 1, seed=3)
    analytic = oracle.gradient(data)[:, :, 0]
    assert hit is None
    rel = np.abs(grad - analytic) / np.maximum(np.abs(analytic), 1e-12)
    assert rel.max() <= 1e-3


def test_fd_early_success_returns_probe():
    flip = Prediction(1, 0.6)
    oracle = ScriptedOracle([Prediction(0, 0.6), Prediction(0, 0.5), flip])
    mask = np.zeros((4, 4))
    mask[0, 0] = mask[2, 2] = 1.0
    grad, hit = fd_gradient_masked(_img(), 0, oracle, BinaryMask(mask), 1.0, 1, seed=4)
    assert hit is not None
    assert hit.prediction.label == 1
    assert oracle.query_count == 3
    assert np.array_equal(hit.image.data, oracle.images[-1].data)


def test_fd_rejects_empty_mask():
    with pytest.raises(ValueError):
        fd_gradient_masked(
            _img(), 0, StubbornOracle(0), BinaryMask(np.zeros((4, 4))), 1.0, 1, seed=0
        )


def test_ge_attack_steps_against_estimated_gradient():
    # gradient estimate +1 at the masked pixel -> update moves it by -eps2
    oracle = ScriptedOracle(
        [Prediction(0, 0.6), Prediction(0, 0.5), Prediction(1, 0.4)]
    )
    cfg = GEConfig(epsilon_fd=0.05, epsilon2=16.0, T2=3, group_size=1)
    x = _img()
    result = ge_attack(x, 0, oracle, _single_pixel_mask((4, 4), 1, 1), cfg, seed=0)
    assert result.success and result.phase == "black_box"
    assert result.noq == 3 == oracle.query_count
    assert result.final_image.data[1, 1, 0] == 100.0 - 16.0
    delta = result.final_image.data - x.data
    assert np.count_nonzero(delta) == 1


def test_ge_attack_failure_returns_final_iterate():
    oracle = StubbornOracle(0, 0.9)
    cfg = GEConfig(epsilon_fd=1.0, epsilon2=4.0, T2=2, group_size=2)
    mask = BinaryMask(np.ones((3, 3)))
    result = ge_attack(_img((3, 3, 1)), 0, oracle, mask, cfg, seed=1)
    assert not result.success and result.phase == "failed"
    assert result.adversarial is None
    assert result.final_image is not None
    # per iteration: 2*ceil(9/2)=10 probes + 1 check; two iterations
    assert result.noq == oracle.query_count == 22


def test_ge_attack_confinement_and_determinism(target_net, reference, test_ds):
    x, y = test_ds.images[0], test_ds.labels[0]
    bm = salience_mask(reference, x, y)
    cfg = GEConfig()
    runs = []
    for _ in range(2):
        oracle = make_black_box(target_net)
        runs.append(ge_attack(x, y, oracle, bm, cfg, seed=11))
        assert runs[-1].noq == oracle.query_count
    a, b = runs
    assert a.success == b.success and a.noq == b.noq
    assert np.array_equal(a.final_image.data, b.final_image.data)
    delta = a.final_image.data - x.data
    assert np.count_nonzero(delta[bm.data == 0]) == 0


def test_ge_attack_early_success_is_sound(target_net, reference, test_ds, correctly_classified):
    i = correctly_classified[1]
    x, y = test_ds.images[i], test_ds.labels[i]
    bm = salience_mask(reference, x, y)
    oracle = make_black_box(target_net)
    result = ge_attack(x, y, oracle, bm, GEConfig(), seed=2)
    assert result.success
    # one verification query outside the attack
    adv, pred = is_adversarial(make_black_box(target_net), result.adversarial, y)
    assert adv and pred.label == result.final_label


def test_ge_global_equals_all_ones_mask(target_net, test_ds):
    x, y = test_ds.images[1], test_ds.labels[1]
    cfg = GEConfig(T2=2)
    a = ge_attack_global(x, y, make_black_box(target_net), cfg, seed=9)
    ones = BinaryMask(np.ones(x.shape[:2]))
    b = ge_attack(x, y, make_black_box(target_net), ones, cfg, seed=9)
    assert a.success == b.success and a.noq == b.noq
    assert np.array_equal(a.final_image.data, b.final_image.data)


def test_ge_global_round_cost_closed_form():
    h, w, gs = 6, 5, 4
    oracle = StubbornOracle(0, 0.8)
    cfg = GEConfig(epsilon_fd=1.0, epsilon2=1.0, T2=1, group_size=gs)
    result = ge_attack_global(_img((h, w, 1)), 0, oracle, cfg, seed=0)
    assert result.noq == 2 * int(np.ceil(h * w / gs)) + 1


def test_rs_round_costs_k_plus_one():
    oracle = StubbornOracle(0, 0.8)
    cfg = RSConfig(K=50, R=30, T3=1, epsilon3=64.0)
    result = rs_attack(_img((8, 8, 1)), 0, oracle, BinaryMask(np.ones((8, 8))), cfg, seed=0)
    assert not result.success
    assert result.noq == oracle.query_count == 51


def test_rs_large_epsilon_saturates_pixels_white():
    flip = Prediction(1, 0.3)
    oracle = ScriptedOracle([flip])
    cfg = RSConfig(K=2, R=1, T3=1, epsilon3=255.0)
    x = ImageTensor(np.full((5, 5, 3), 37.0), DEFAULT_DOMAIN)
    result = rs_attack(x, 0, oracle, BinaryMask(np.ones((5, 5))), cfg, seed=6)
    assert result.success
    delta = result.final_image.data != x.data
    assert delta.any()
    assert np.all(result.final_image.data[delta.any(axis=2)] == 255.0)


def test_rs_elite_merge_matches_bruteforce_sort():
    # scripted probabilities; the two lowest-prob candidates win and their
    # pixels (and only theirs) receive the fixed white value
    k, r = 5, 2
    probs = [0.9, 0.2, 0.8, 0.1, 0.7]
    script = [Prediction(0, p) for p in probs] + [Prediction(0, 0.95)]
    oracle = ScriptedOracle(script)
    x = _img((6, 6, 1), 10.0)
    mask = BinaryMask(np.ones((6, 6)))
    cfg = RSConfig(K=k, R=r, T3=1, epsilon3=1.0, pixels_per_candidate=1)
    seed = 13
    result = rs_attack_fixed_value(x, 0, oracle, mask, cfg, 255.0, seed)

    # replay the engine's pixel draws (same generator, same call order)
    ss_rng = np.random.default_rng(seed)
    coords = np.argwhere(mask.data == 1)
    picks = [coords[np.sort(ss_rng.choice(len(coords), size=1, replace=False))] for _ in range(k)]
    order = sorted(range(k), key=lambda i: (probs[i], i))
    expected = {tuple(map(int, picks[i][0])) for i in order[:r]}

    changed = {tuple(map(int, mn)) for mn in np.argwhere((result.final_image.data != x.data).any(axis=2))}
    assert changed == expected
    assert result.noq == k + 1


def test_rs_confinement_and_determinism(target_net, reference, test_ds):
    x, y = test_ds.images[2], test_ds.labels[2]
    bm = salience_mask(reference, x, y)
    cfg = RSConfig(T3=10)
    runs = []
    for _ in range(2):
        oracle = make_black_box(target_net)
        runs.append(rs_attack(x, y, oracle, bm, cfg, seed=21))
        assert runs[-1].noq == oracle.query_count
    a, b = runs
    assert a.noq == b.noq and a.success == b.success
    assert np.array_equal(a.final_image.data, b.final_image.data)
    delta = a.final_image.data - x.data
    assert np.count_nonzero(delta[bm.data == 0]) == 0


def test_rs_multi_pixel_candidates():
    # 3 pixels per candidate leaves the per-round query bill unchanged
    oracle = StubbornOracle(0, 0.8)
    cfg = RSConfig(K=4, R=2, T3=1, epsilon3=50.0, pixels_per_candidate=3)
    x = _img((6, 6, 1))
    result = rs_attack(x, 0, oracle, BinaryMask(np.ones((6, 6))), cfg, seed=2)
    assert result.noq == 5
    changed = np.argwhere((result.final_image.data != x.data).any(axis=2))
    assert 2 <= len(changed) <= 6  # union of two elite candidates, 3 pixels each


def test_ge_attack_succeeds_on_most_of_corpus(target_net, reference, test_ds, correctly_classified):
    wins = 0
    indices = correctly_classified[:50]
    for i in indices:
        x, y = test_ds.images[i], test_ds.labels[i]
        bm = salience_mask(reference, x, y)
        result = ge_attack(x, y, make_black_box(target_net), bm, GEConfig(), seed=1000 + i)
        wins += result.success
    assert wins >= 0.9 * len(indices)


def test_rs_rejects_empty_mask():
    with pytest.raises(ValueError):
        rs_attack(_img(), 0, StubbornOracle(0), BinaryMask(np.zeros((4, 4))), RSConfig(), 0)


def test_rs_rejects_mismatched_mask_shape():
    with pytest.raises(ValueError):
        rs_attack(_img(), 0, StubbornOracle(0), BinaryMask(np.ones((5, 4))), RSConfig(), 0)


def test_rs_fixed_value_channel_validation():
    with pytest.raises(ValueError):
        rs_attack_fixed_value(
            _img((4, 4, 3)), 0, StubbornOracle(0), BinaryMask(np.ones((4, 4))),
            RSConfig(T3=1), (255.0, 255.0), seed=0,
        )


def test_dispatcher_matches_direct_calls(target_net, reference, test_ds):
    x, y = test_ds.images[3], test_ds.labels[3]
    bm = salience_mask(reference, x, y)
    ge_cfg = GEConfig()
    direct = ge_attack(x, y, make_black_box(target_net), bm, ge_cfg, seed=5)
    via = local_black_box_attack(x, bm, y, make_black_box(target_net), "GE", ge_cfg, seed=5)
    if direct.success:
        assert via is not None and via.noq == direct.noq
        assert np.array_equal(via.final_image.data, direct.final_image.data)
    else:
        assert via is None

    rs_cfg = RSConfig(T3=5)
    direct_rs = rs_attack(x, y, make_black_box(target_net), bm, rs_cfg, seed=5)
    via_rs = local_black_box_attack(x, bm, y, make_black_box(target_net), "RS", rs_cfg, seed=5)
    if direct_rs.success:
        assert via_rs is not None and via_rs.noq == direct_rs.noq
    else:
        assert via_rs is None


def test_dispatcher_failure_returns_none():
    oracle = StubbornOracle(0, 0.9)
    cfg = RSConfig(K=3, R=1, T3=1)
    out = local_black_box_attack(
        _img(), BinaryMask(np.ones((4, 4))), 0, oracle, "RS", cfg, seed=0
    )
    assert out is None


def test_dispatcher_validates_config_type():
    with pytest.raises(ValueError):
        local_black_box_attack(
            _img(), BinaryMask(np.ones((4, 4))), 0, StubbornOracle(0), "GE", RSConfig(), 0
        )
    with pytest.raises(ValueError):
        local_black_box_attack(
            _img(), BinaryMask(np.ones((4, 4))), 0, StubbornOracle(0), "XX", GEConfig(), 0
        )
