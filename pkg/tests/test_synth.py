import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score

from read_pvla.errors import CompatibilityError, DatasetSpecError, DegenerateInputError
from read_pvla.pot import cosine_cost
from read_pvla.synth import (
    DatasetSpec,
    average_precision,
    domain_rotation,
    generate_dataset,
    load_dataset,
    mean_average_precision,
    save_dataset,
    style_offset,
)

from .conftest import TINY_DATA


def dataset_bytes(ds):
    parts = []
    for split in (ds.train, ds.val, ds.test):
        for s in split:
            parts += [s.video.tobytes(), s.lang.tobytes(), s.labels.tobytes(), s.query_mask.tobytes()]
    return b"".join(parts)


# spec ----------------------------------------------------------------------------------------


@pytest.mark.parametrize(
    "bad",
    [
        {"n_train": 0},
        {"noise_sigma": -0.1},
        {"span_length": (2, 12)},
        {"n_video": (5, 3)},
        {"shift_planes": 9},
        {"concept_dim": 1},
        {"shared_weight": 1.5},
    ],
)
def test_spec_validation(bad):
    with pytest.raises(DatasetSpecError):
        DatasetSpec(**bad)


def test_spec_roundtrip_through_dict():
    from dataclasses import asdict

    spec = DatasetSpec(seed=4, n_video=(10, 14))
    assert DatasetSpec.from_dict(asdict(spec)) == spec


# generation ---------------------------------------------------------------------------------


def test_same_spec_identical_bytes():
    assert dataset_bytes(generate_dataset(TINY_DATA)) == dataset_bytes(generate_dataset(TINY_DATA))


def test_different_seed_differs():
    from dataclasses import replace

    assert dataset_bytes(generate_dataset(TINY_DATA)) != dataset_bytes(generate_dataset(replace(TINY_DATA, seed=1)))


def test_sample_invariants():
    ds = generate_dataset(DatasetSpec(n_train=60, n_val=5, n_test=5, n_video=(6, 14), n_lang=(2, 6)))
    for s in ds.train + ds.val + ds.test:
        assert 0 < s.labels.sum() < s.labels.size
        start, stop = s.span
        assert s.labels[start:stop].all() and s.labels.sum() == stop - start
        assert s.video.shape[1] == 1024 and s.lang.shape[1] == 1024
        assert s.query_mask.any()


def test_split_sizes_and_default_low_resource_preset():
    ds = generate_dataset(DatasetSpec(n_val=3, n_test=2))
    assert (len(ds.train), len(ds.val), len(ds.test)) == (40, 3, 2)
    assert DatasetSpec().n_val == DatasetSpec().n_test == 200


def test_noise_free_in_span_frames_identical():
    ds = generate_dataset(DatasetSpec(noise_sigma=0.0, n_train=20, n_val=1, n_test=1))
    for s in ds.train:
        span = s.video[s.labels == 1]
        assert np.array_equal(span, np.broadcast_to(span[0], span.shape))


@pytest.mark.parametrize("domain,style,planes", [(0, 0.0, 0), (1, 3.0, 0), (1, 3.0, 2)])
def test_noise_free_query_tokens_are_closest(domain, style, planes):
    spec = DatasetSpec(seed=3, domain=domain, style_shift=style, shift_planes=planes, noise_sigma=0.0,
                       n_train=100, n_val=1, n_test=1)
    for s in generate_dataset(spec).train:
        C = cosine_cost(s.video, s.lang).data
        pos, q = s.labels == 1, s.query_mask
        assert C[np.ix_(pos, q)].max() < C[np.ix_(pos, ~q)].min()


def test_domain_zero_has_no_shift():
    spec = DatasetSpec(domain=0, shift_planes=2)
    assert np.array_equal(domain_rotation(spec), np.eye(spec.concept_dim))
    assert not style_offset(spec).any()


def test_domain_rotation_is_orthogonal():
    R = domain_rotation(DatasetSpec(shift_planes=3))
    assert np.allclose(R @ R.T, np.eye(16), atol=1e-12)
    assert not np.allclose(R, np.eye(16))


def test_style_offset_norm():
    spec = DatasetSpec(style_shift=2.0, lang_dim=256)
    assert np.linalg.norm(style_offset(spec)) == pytest.approx(2.0 * 16.0)


# average precision ---------------------------------------------------------------------------


def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert average_precision([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]) == pytest.approx(0.25)
    assert average_precision([0.9, 0.5, 0.1], [1, 0, 1]) == pytest.approx(5 / 6)


def test_ap_ties_broken_by_index():
    assert average_precision([1.0, 1.0, 1.0], [0, 0, 1]) == pytest.approx(1 / 3)
    assert average_precision([1.0, 1.0, 1.0], [1, 0, 0]) == 1.0


def test_ap_errors():
    with pytest.raises(DegenerateInputError):
        average_precision([0.1, 0.2], [0, 0])
    with pytest.raises(DegenerateInputError):
        average_precision([0.1, 0.2], [1])
    with pytest.raises(DegenerateInputError):
        mean_average_precision([], [])


labels_and_scores = st.integers(2, 12).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda l: any(l)),
        # integer-valued scores stay distinct under the float transforms below
        st.lists(st.integers(-40, 40).map(float), min_size=n, max_size=n, unique=True),
    )
)


@given(labels_and_scores)
@settings(max_examples=80, deadline=None)
def test_ap_matches_sklearn_without_ties(pair):
    labels, scores = pair
    assert average_precision(scores, labels) == pytest.approx(average_precision_score(labels, scores), abs=1e-12)


@given(labels_and_scores)
@settings(max_examples=60, deadline=None)
def test_ap_invariant_under_monotone_transform(pair):
    labels, scores = pair
    s = np.array(scores)
    assert average_precision(np.exp(s / 5) * 3 - 1, labels) == average_precision(s, labels)


@given(labels_and_scores, st.integers(0, 100))
@settings(max_examples=60, deadline=None)
def test_ap_does_not_increase_when_positive_drops_below_negative(pair, pick):
    labels, scores = pair
    labels, scores = np.array(labels), np.array(scores)
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    swaps = [i for i in range(len(ranked) - 1) if ranked[i] == 1 and ranked[i + 1] == 0]
    if not swaps:
        return
    i = swaps[pick % len(swaps)]
    swapped = scores.copy()
    a, b = order[i], order[i + 1]
    swapped[a], swapped[b] = scores[b], scores[a]
    assert average_precision(swapped, labels) <= average_precision(scores, labels)


# serialisation -------------------------------------------------------------------------------


def test_save_load_roundtrip(tmp_path, tiny_data):
    save_dataset(tiny_data, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert back.spec == tiny_data.spec
    assert dataset_bytes(back) == dataset_bytes(tiny_data)


def test_load_detects_truncated_blob(tmp_path, tiny_data):
    path = tmp_path / "ds"
    save_dataset(tiny_data, path)
    blob = path / "val.video.f32"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CompatibilityError):
        load_dataset(path)
