import numpy as np
import pytest

from sos_oic import region_ingest as ri
from sos_oic.dataset import open_dataset
from sos_oic.errors import DegenerateLabels, SpecInvalid
from sos_oic.synth import (SynthSpec, generate, longtail_counts, make_templates, oracle_linear_probe,
                           tail_classes)

from conftest import TINY


def test_noiseless_single_patch_equals_template():
    spec = SynthSpec(n_videos=8, frames_per_video=1, regions_per_frame=1, noise_level=0.0, motion=0.0,
                     appearance_jitter=0.0, lighting_jitter=0.0, distractors=0, hands=False,
                     false_positive_rate=0.0, frame_size=64, patch_size=32, n_participants=4,
                     n_unseen_participants=1)
    data = generate(spec)
    templates = make_templates(spec)
    for vid, lat in data.latent.items():
        (d,) = [r for r in data.detections if r.video_id == vid]
        x1, y1, x2, y2 = (int(round(v)) for v in d.box)
        patch = data.frames.frames[vid][0][y1:y2, x1:x2]
        tmpl = np.clip(np.round(templates[lat["cluster"]] * 255), 0, 255)
        mask = tmpl.sum(axis=2) > 0
        assert patch.shape[:2] == tmpl.shape[:2]
        assert np.abs(patch.astype(int) - tmpl.astype(int))[mask].max() <= 1


def test_balanced_counts():
    counts = longtail_counts(100, 8, 1.0)
    assert counts.sum() == 100 and counts.max() - counts.min() <= 1


@pytest.mark.parametrize("ratio", [5.0, 20.0, 50.0])
def test_longtail_profile(ratio):
    counts = longtail_counts(4000, 8, ratio)
    assert counts.sum() == 4000
    assert np.all(np.diff(counts) <= 0)
    assert counts[0] / counts[-1] == pytest.approx(ratio, rel=0.05)


def test_deterministic_manifests(tmp_path):
    a = generate(SynthSpec(**TINY)).write(tmp_path / "a")
    b = generate(SynthSpec(**TINY)).write(tmp_path / "b")
    for name in ("detections.tsv", "labels.jsonl", "header.json", "base_logits.jsonl"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_manifest_passes_ingest(tmp_path, tiny_synth):
    root = tiny_synth.write(tmp_path / "d")
    records = ri.load_manifest(root / "detections.tsv")
    assert all(r.kind == "object" for r in records)
    ds = open_dataset(root)
    assert len(ds.region_sets) == len(tiny_synth.labels)
    vid = ds.region_sets[0].video_id
    assert np.array_equal(ds.frames(vid, 0), tiny_synth.frames(vid, 0))


def test_noun_follows_cluster(tiny_synth):
    spec = tiny_synth.spec
    for vid, lab in tiny_synth.labels.items():
        assert tiny_synth.latent[vid]["cluster"] % spec.n_noun_classes == lab.noun


def test_header(tiny_synth):
    h = tiny_synth.header
    assert set(h.splits["train"]).isdisjoint(h.splits["val"])
    assert sorted(h.splits["train"] + h.splits["val"]) == sorted(tiny_synth.labels)
    unseen = {v for v, lab in tiny_synth.labels.items() if lab.participant in h.unseen_participants}
    assert unseen <= set(h.splits["val"])


def test_tail_classes():
    assert tail_classes([50, 30, 10, 5, 5]) == [2, 3, 4]


def test_invalid_spec():
    with pytest.raises(SpecInvalid):
        generate(SynthSpec(n_clusters=2, n_noun_classes=4))
    with pytest.raises(SpecInvalid):
        generate(SynthSpec(noise_level=-1))


class TestProbe:
    def test_separable(self, rng):
        x = np.concatenate([rng.normal(-3, 0.3, (100, 4)), rng.normal(3, 0.3, (100, 4))])
        y = np.repeat([0, 1], 100)
        assert oracle_linear_probe(x, y) >= 0.99

    def test_chance(self, rng):
        x = rng.standard_normal((600, 8))
        y = rng.integers(0, 4, 600)
        assert abs(oracle_linear_probe(x, y) - 0.25) <= 0.1

    def test_deterministic(self, rng):
        x, y = rng.standard_normal((120, 5)), rng.integers(0, 3, 120)
        assert oracle_linear_probe(x, y) == oracle_linear_probe(x, y)

    def test_grouped_holds_out_whole_groups(self, rng):
        # features identify the group, not the label: a grouped split can only reach chance
        groups = np.repeat(np.arange(60), 5)
        y = np.repeat(rng.integers(0, 2, 60), 5)
        x = np.eye(60)[groups] + 0.01 * rng.standard_normal((300, 60))
        assert oracle_linear_probe(x, y, groups=groups) < 0.75

    def test_degenerate(self, rng):
        with pytest.raises(DegenerateLabels):
            oracle_linear_probe(rng.standard_normal((10, 2)), np.zeros(10, int))
