import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import log_softmax

from sos_oic import fusion as fu
from sos_oic.dataset import VideoLabel
from sos_oic.errors import ConfigError, DimensionMismatch, EmptyPilot, UnknownVideo, VideoMismatch
from sos_oic.records import LogitRecord, read_logits, write_logits


def records(rng, n, V=4, N=5, tag="m"):
    return [LogitRecord(f"v{i:03d}", rng.normal(size=V), rng.normal(size=N), tag) for i in range(n)]


def labels_for(rng, n, V=4, N=5, participants=("P0", "P1")):
    return {f"v{i:03d}": VideoLabel(int(rng.integers(V)), int(rng.integers(N)), str(rng.choice(participants)))
            for i in range(n)}


def perfect(labels, V=4, N=5):
    out = []
    for vid, lab in labels.items():
        v, n = np.zeros(V), np.zeros(N)
        v[lab.verb] = n[lab.noun] = 10
        out.append(LogitRecord(vid, v, n, "perfect"))
    return out


class TestFuse:
    def test_alpha_base_zero_keeps_argmax(self, rng):
        a, b = records(rng, 1)[0], records(rng, 1)[0]
        f = fu.fuse(a, b, fu.FusionWeights.same(0.7, 0.0))
        assert np.argmax(f.verb_logits) == np.argmax(a.verb_logits)

    def test_cancellation(self, rng):
        a = records(rng, 1)[0]
        b = LogitRecord(a.video_id, -a.verb_logits, -a.noun_logits)
        f = fu.fuse(a, b, fu.FusionWeights.same(1, 1))
        assert np.all(f.verb_logits == 0) and np.all(f.noun_logits == 0)

    def test_arithmetic(self, rng):
        a, b = records(rng, 1)[0], records(rng, 1)[0]
        w = fu.FusionWeights(fu.SpaceWeights(0.3, 0.7), fu.SpaceWeights(0.6, 0.2))
        f = fu.fuse(a, b, w)
        assert np.allclose(f.verb_logits, 0.3 * a.verb_logits + 0.7 * b.verb_logits, atol=1e-15)
        assert np.allclose(f.noun_logits, 0.6 * a.noun_logits + 0.2 * b.noun_logits, atol=1e-15)

    def test_scale_invariance(self, rng):
        a, b = records(rng, 1)[0], records(rng, 1)[0]
        f1 = fu.fuse(a, b, fu.FusionWeights.same(0.3, 0.5))
        f2 = fu.fuse(a, b, fu.FusionWeights.same(3.0, 5.0))
        assert np.argmax(f1.noun_logits) == np.argmax(f2.noun_logits)

    def test_errors(self, rng):
        a = records(rng, 1)[0]
        with pytest.raises(VideoMismatch):
            fu.fuse(a, LogitRecord("other", a.verb_logits, a.noun_logits), fu.FusionWeights.same(1, 1))
        with pytest.raises(DimensionMismatch):
            fu.fuse(a, LogitRecord(a.video_id, np.zeros(3), a.noun_logits), fu.FusionWeights.same(1, 1))
        with pytest.raises(ConfigError):
            fu.FusionWeights.same(0, 0)
        with pytest.raises(ConfigError):
            fu.FusionWeights.same(-1, 1)

    def test_grid(self):
        grid = fu.default_grid()
        assert len(grid) == 120 and (0.0, 0.0) not in grid
        assert fu.parse_grid("1:0,0:1") == [(1.0, 0.0), (0.0, 1.0)]
        assert len(fu.parse_grid("step=0.5")) == 8
        with pytest.raises(ConfigError):
            fu.parse_grid("1:2:3")


class TestPilot:
    def test_exact_size(self, rng):
        ids = [f"v{i}" for i in range(100)]
        strata = [int(x) for x in rng.integers(0, 7, 100)]
        pilot, rest = fu.pilot_split(ids, strata, 0.3, 0)
        assert len(pilot) == 30 and set(pilot).isdisjoint(rest) and len(rest) == 70

    def test_stratified(self):
        ids = [f"v{i}" for i in range(100)]
        strata = [0] * 50 + [1] * 50
        pilot, _ = fu.pilot_split(ids, strata, 0.3, 1)
        assert sum(int(p[1:]) < 50 for p in pilot) == 15

    def test_deterministic(self, rng):
        ids = [f"v{i}" for i in range(40)]
        strata = list(rng.integers(0, 3, 40))
        assert fu.pilot_split(ids, strata, 0.3, 5) == fu.pilot_split(ids, strata, 0.3, 5)
        assert fu.pilot_split(ids, strata, 0.3, 5) == fu.pilot_split(ids[::-1], strata[::-1], 0.3, 5)

    def test_empty(self):
        with pytest.raises(EmptyPilot):
            fu.pilot_split(["a"], [0], 0.3)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 200), st.floats(0.01, 0.99), st.integers(0, 2**31))
    def test_size_property(self, n, frac, seed):
        r = np.random.default_rng(seed)
        ids = [f"v{i}" for i in range(n)]
        target = int(np.floor(frac * n + 0.5))
        if target == 0:
            return
        pilot, rest = fu.pilot_split(ids, list(r.integers(0, 4, n)), frac, seed)
        assert len(pilot) == target and len(pilot) + len(rest) == n


class TestSelect:
    def test_dominance(self, rng):
        labels = labels_for(rng, 60)
        oic = perfect(labels)
        base = records(rng, 60)
        sel = fu.select_weights(oic, base, labels, 0.3, [(1, 0), (0, 1)], 0)
        assert sel.weights.verb == (1, 0) and sel.weights.noun == (1, 0)

    def test_chosen_pair_is_best(self, rng):
        labels = labels_for(rng, 80)
        oic, base = records(rng, 80), records(rng, 80)
        grid = fu.default_grid(0.25)
        sel = fu.select_weights(oic, base, labels, 0.3, grid, 3)
        pilot = set(sel.pilot_ids)
        for space in ("verb", "noun"):
            A = np.stack([r.logits(space) for r in oic if r.video_id in pilot])
            B = np.stack([r.logits(space) for r in base if r.video_id in pilot])
            y = np.array([getattr(labels[r.video_id], space) for r in oic if r.video_id in pilot])
            best = max(np.mean(np.argmax(a * A + b * B, 1) == y) for a, b in grid)
            assert sel.pilot_accuracy[space] == pytest.approx(best)

    def test_tie_breaks_to_smaller_alpha_oic(self, rng):
        labels = labels_for(rng, 40)
        oic = perfect(labels)
        sel = fu.select_weights(oic, oic, labels, 0.3, [(1, 0), (0.5, 0.5), (0, 1)], 0)
        assert sel.weights.verb == (0, 1)


def brute_topk(recs, labels, k, space):
    hits = 0
    for r in recs:
        lab = labels[r.video_id]
        if space == "action":
            lv, ln = log_softmax(r.verb_logits), log_softmax(r.noun_logits)
            scores = {(v, n): lv[v] + ln[n] for v, n in itertools.product(range(len(lv)), range(len(ln)))}
            target = (lab.verb, lab.noun)
        else:
            scores = dict(enumerate(r.logits(space)))
            target = getattr(lab, space)
        ranked = sorted(scores, key=lambda c: (-scores[c], c))
        hits += target in ranked[:k]
    return hits / len(recs)


class TestMetrics:
    def test_brute_force(self, rng):
        labels = labels_for(rng, 20)
        recs = records(rng, 20)
        for space, k in itertools.product(fu.ALL_SPACES, (1, 2, 5)):
            assert fu.topk_accuracy(recs, labels, k, space) == pytest.approx(brute_topk(recs, labels, k, space))

    def test_ties_go_to_lower_index(self):
        labels = {"a": VideoLabel(0, 1, "P")}
        recs = [LogitRecord("a", np.zeros(3), np.zeros(3))]
        assert fu.topk_accuracy(recs, labels, 1, "verb") == 1.0
        assert fu.topk_accuracy(recs, labels, 1, "noun") == 0.0

    def test_perfect_and_exhaustive(self, rng):
        labels = labels_for(rng, 30)
        assert all(fu.topk_accuracy(perfect(labels), labels, k, s) == 1.0 for s in fu.ALL_SPACES for k in (1, 5))
        recs = records(rng, 30)
        assert fu.topk_accuracy(recs, labels, 4, "verb") == 1.0
        assert fu.topk_accuracy(recs, labels, 20, "action") == 1.0

    def test_monotone_in_k(self, rng):
        labels, recs = labels_for(rng, 40), records(rng, 40)
        accs = [fu.topk_accuracy(recs, labels, k, "action") for k in range(1, 21)]
        assert all(a <= b for a, b in zip(accs, accs[1:]))

    def test_majority_predictor(self):
        labels = {f"v{i}": VideoLabel(0 if i < 9 else 1, 0, "P") for i in range(10)}
        recs = [LogitRecord(v, np.array([1.0, 0.0]), np.array([1.0])) for v in labels]
        assert fu.class_balanced_accuracy(recs, labels, "verb") == 0.5

    def test_class_balanced_identity(self, rng):
        labels, recs = labels_for(rng, 50, V=5), records(rng, 50, V=5)
        preds = fu.predictions(recs, "verb")
        per = {}
        for r, p in zip(recs, preds):
            per.setdefault(labels[r.video_id].verb, []).append(p == labels[r.video_id].verb)
        assert fu.class_balanced_accuracy(recs, labels, "verb") == pytest.approx(np.mean([np.mean(v) for v in per.values()]))

    def test_tuple_labels_accepted(self, rng):
        labels = labels_for(rng, 10)
        as_tuples = {k: (v.verb, v.noun) for k, v in labels.items()}
        recs = records(rng, 10)
        assert fu.topk_accuracy(recs, labels, 1, "action") == fu.topk_accuracy(recs, as_tuples, 1, "action")


class TestEvaluate:
    def test_perfect_report(self, rng):
        labels = labels_for(rng, 30)
        rep = fu.evaluate(perfect(labels), labels, [0], [1], ["P0"])
        for sub in fu.SUBSETS:
            for s in fu.ALL_SPACES:
                assert rep.topk[sub][s]["top1"] == 1.0 and rep.class_balanced[sub][s] == 1.0

    def test_empty_tail_is_na(self, rng):
        labels = labels_for(rng, 10)
        rep = fu.evaluate(records(rng, 10), labels, [], [], ["P0"])
        assert rep.topk["tail"]["verb"] is None and rep.class_balanced["tail"]["action"] is None
        assert "n/a" in rep.table()

    def test_all_unseen_equals_overall(self, rng):
        labels, recs = labels_for(rng, 25), records(rng, 25)
        rep = fu.evaluate(recs, labels, [0], [0], ["P0", "P1"])
        assert rep.topk["unseen"] == rep.topk["overall"]

    def test_tail_subset(self, rng):
        labels, recs = labels_for(rng, 60), records(rng, 60)
        rep = fu.evaluate(recs, labels, [1, 2], [0], [])
        tail_nouns = [r for r in recs if labels[r.video_id].noun == 0]
        assert rep.topk["tail"]["noun"]["top1"] == pytest.approx(fu.topk_accuracy(tail_nouns, labels, 1, "noun"))
        tail_act = [r for r in recs if labels[r.video_id].verb in (1, 2) or labels[r.video_id].noun == 0]
        assert rep.n_videos["tail"] == len(tail_act)

    def test_unknown_video(self, rng):
        with pytest.raises(UnknownVideo):
            fu.evaluate(records(rng, 3), {}, [], [], [])

    def test_write(self, rng, tmp_path):
        labels = labels_for(rng, 10)
        path = fu.evaluate(records(rng, 10), labels, [0], [0], ["P0"]).write(tmp_path / "r.json")
        doc = json.loads(path.read_text())
        assert set(doc) >= {"topk", "class_balanced", "per_class", "n_videos"}


class TestLogitFile:
    def test_round_trip(self, rng, tmp_path):
        recs = records(rng, 20)
        back = read_logits(write_logits(tmp_path / "l.jsonl", recs), 4, 5)
        for a, b in zip(recs, back):
            assert a.video_id == b.video_id and np.array_equal(a.verb_logits, b.verb_logits)
            assert np.array_equal(a.noun_logits, b.noun_logits)

    def test_dimension_check(self, rng, tmp_path):
        path = write_logits(tmp_path / "l.jsonl", records(rng, 2))
        with pytest.raises(DimensionMismatch):
            read_logits(path, 3, 5)
