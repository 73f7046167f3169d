import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from ridg.data import (DomainDataset, SplitPlan, SyntheticShiftConfig, generate,
                       leave_one_out_splits, load_csv, standardize_splits, write_csv)
from ridg.errors import ConfigError, CsvParseError, SchemaError, ValidationError


def blob_config(**kw):
    base = dict(generator="two_blobs_spurious", strengths=(0.9, 0.9, 0.1),
                samples_per_domain=120, class_count=2, noise_scale=0.5,
                spurious_noise_scale=0.1, seed=0)
    base.update(kw)
    return SyntheticShiftConfig(**base)


def spurious_block(ds):
    return ds.features[:, ds.class_count:2 * ds.class_count]


def test_full_strength_spurious_alone_separates_train_domains():
    cfg = blob_config(strengths=(1.0, 1.0), spurious_noise_scale=0.0, noise_scale=0.0)
    ds = generate(cfg)
    pred = spurious_block(ds).argmax(axis=1)
    assert (pred == ds.labels).mean() == 1.0


def test_half_strength_spurious_is_uninformative():
    cfg = blob_config(strengths=(0.5, 0.5), samples_per_domain=4000,
                      spurious_noise_scale=0.0)
    ds = generate(cfg)
    pred = spurious_block(ds).argmax(axis=1)
    assert abs((pred == ds.labels).mean() - 0.5) < 0.03


def test_spurious_only_fit_fails_on_flipped_target():
    # independent oracle: scikit-learn logistic fit on the spurious block only
    cfg = blob_config(strengths=(0.9, 0.9, 0.1), samples_per_domain=1000, seed=3)
    ds = generate(cfg)
    train = ds.domains < 2
    target = ds.domains == 2
    clf = LogisticRegression().fit(spurious_block(ds)[train], ds.labels[train])
    score = clf.score(spurious_block(ds)[target], ds.labels[target])
    assert score < 0.20


def test_generation_is_pure_function_of_config_and_seed():
    a, b = generate(blob_config(seed=9)), generate(blob_config(seed=9))
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.domains, b.domains)
    c = generate(blob_config(seed=10))
    assert not np.array_equal(a.features, c.features)


def test_class_balance_exact_when_divisible():
    ds = generate(blob_config(samples_per_domain=100, class_count=2))
    for d in range(ds.domain_count):
        counts = np.bincount(ds.labels[ds.domains == d], minlength=2)
        assert counts[0] == counts[1] == 50


def test_generator_validation():
    with pytest.raises(ConfigError):
        blob_config(strengths=(0.9, 1.5)).validate()
    with pytest.raises(ConfigError):
        blob_config(strengths=(0.9,)).validate()
    with pytest.raises(ConfigError):
        blob_config(generator="bogus").validate()
    with pytest.raises(ConfigError):
        blob_config(generator="rotated_moons", class_count=3).validate()


def test_rotated_moons_shapes_and_balance():
    cfg = SyntheticShiftConfig(generator="rotated_moons", strengths=(0.0, 0.5, 1.0),
                               samples_per_domain=60, class_count=2, noise_scale=0.05,
                               seed=1)
    ds = generate(cfg)
    assert ds.feature_dim == 2
    assert len(ds) == 180
    assert set(np.unique(ds.labels)) == {0, 1}


def test_nuisance_generator_offsets_scale_with_strength():
    cfg = SyntheticShiftConfig(generator="nuisance_dims", strengths=(0.0, 1.0),
                               samples_per_domain=4000, class_count=2,
                               noise_scale=0.1, nuisance_dims=3, seed=2)
    ds = generate(cfg)
    nuis = ds.features[:, 2:]
    zero_norm = np.linalg.norm(nuis[ds.domains == 0].mean(axis=0))
    one_norm = np.linalg.norm(nuis[ds.domains == 1].mean(axis=0))
    assert zero_norm < 0.05
    assert one_norm == pytest.approx(2.0, abs=0.05)


def test_leave_one_out_target_is_held_out_domain():
    ds = generate(blob_config(strengths=(0.9, 0.1)))
    train, val, target = leave_one_out_splits(ds, SplitPlan(held_out_domain=1, seed=0))
    assert set(np.unique(target.domains)) == {1}
    assert 1 not in np.unique(train.domains)
    assert 1 not in np.unique(val.domains)


def test_split_sizes_follow_fraction():
    ds = generate(blob_config(strengths=(0.9, 0.1), samples_per_domain=100))
    train, val, _ = leave_one_out_splits(ds, SplitPlan(0, seed=1, train_fraction=0.8))
    assert len(train) == 80
    assert len(val) == 20


def test_splits_disjoint_and_exhaustive():
    ds = generate(blob_config())
    train, val, target = leave_one_out_splits(ds, SplitPlan(2, seed=5))
    key = ds.features[:, 0]
    taken = np.concatenate([train.features[:, 0], val.features[:, 0],
                            target.features[:, 0]])
    assert len(taken) == len(ds)
    assert set(np.round(taken, 12)) == set(np.round(key, 12))


def test_split_determinism_per_seed():
    ds = generate(blob_config())
    a = leave_one_out_splits(ds, SplitPlan(0, seed=7))
    b = leave_one_out_splits(ds, SplitPlan(0, seed=7))
    assert np.array_equal(a[0].features, b[0].features)
    c = leave_one_out_splits(ds, SplitPlan(0, seed=8))
    assert not np.array_equal(a[0].features, c[0].features)


def test_split_rejects_bad_domain():
    ds = generate(blob_config(strengths=(0.9, 0.1)))
    with pytest.raises(ValidationError):
        leave_one_out_splits(ds, SplitPlan(held_out_domain=5))


def test_standardize_uses_source_statistics_only():
    ds = generate(blob_config())
    train, val, target = leave_one_out_splits(ds, SplitPlan(2, seed=0))
    strain, sval, starget, stats = standardize_splits(train, val, target)
    src = np.concatenate([strain.features, sval.features])
    np.testing.assert_allclose(src.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(src.std(axis=0), 1.0, atol=1e-12)
    # target transformed with the same statistics, not its own
    np.testing.assert_allclose(
        starget.features, (target.features - stats["mean"]) / stats["std"], atol=1e-15)
    assert abs(starget.features.mean()) > 1e-6


def test_dataset_invariant_all_domains_present():
    with pytest.raises(ValidationError, match=r"\[1\]"):
        DomainDataset(np.zeros((2, 2)), [0, 1], [0, 0], class_count=2, domain_count=2)


def test_dataset_arrays_are_write_protected():
    ds = generate(blob_config(strengths=(0.9, 0.1), samples_per_domain=10))
    with pytest.raises(ValueError):
        ds.features[0, 0] = 99.0


def test_load_csv_remaps_names_densely(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("f0,f1,label,domain\n"
                    "0.5,1.0,a,d0\n"
                    "1.5,2.0,b,d1\n"
                    "2.5,3.0,a,d0\n")
    ds = load_csv(path)
    assert ds.class_count == 2
    assert ds.domain_count == 2
    np.testing.assert_array_equal(ds.labels, [0, 1, 0])
    np.testing.assert_array_equal(ds.domains, [0, 1, 0])
    assert ds.label_names == ["a", "b"]
    assert ds.domain_names == ["d0", "d1"]


def test_load_csv_empty_file_is_schema_error(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(SchemaError):
        load_csv(path)


def test_load_csv_missing_column_named(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("f0,f1,label\n1,2,0\n")
    with pytest.raises(SchemaError, match="domain"):
        load_csv(path)


def test_load_csv_parse_error_carries_line_number(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("f0,label,domain\n1.0,0,0\nnope,1,1\n")
    with pytest.raises(CsvParseError, match="line 3"):
        load_csv(path)


def test_csv_round_trip(tmp_path):
    ds = generate(blob_config(samples_per_domain=30))
    path = tmp_path / "round.csv"
    write_csv(ds, path)
    loaded = load_csv(path)
    assert np.array_equal(loaded.features, ds.features)
    assert np.array_equal(loaded.labels, ds.labels)
    assert np.array_equal(loaded.domains, ds.domains)
