import json
import logging

import networkx as nx
import numpy as np
import pytest

from evizilla.data import (
    DatasetBundle,
    SbmSpec,
    block_sizes,
    canonical_edges,
    format_ranges,
    generate_sbm,
    inject_ood_noise,
    load_citation_raw,
    load_dataset,
    load_generic_dir,
    parse_split_file,
    row_normalize,
    save_generic,
    standard_split,
)
from evizilla.errors import InputError, ParseError


def _bundle(n=4, edges=((0, 1),), labels=(0, 1, 0, 1), **kw):
    masks = dict(
        train_mask=[True, True, False, False],
        val_mask=[False, False, True, False],
        test_mask=[False, False, False, True],
    )
    masks.update(kw)
    return DatasetBundle(features=np.eye(n), edges=list(edges), labels=list(labels), class_count=2, **masks)


# --- citation raw ----------------------------------------------------------

def test_toy_citation_dataset(toy_bundle):
    assert (toy_bundle.n, toy_bundle.d, toy_bundle.class_count) == (3, 2, 2)
    np.testing.assert_array_equal(toy_bundle.edges, [[0, 1]])
    assert toy_bundle.class_names == ("alpha", "beta")
    np.testing.assert_array_equal(toy_bundle.labels, [0, 1, 0])
    assert toy_bundle.dangling_count == 0


def test_dangling_citation_counted(fixtures_dir, caplog):
    with caplog.at_level(logging.WARNING, logger="evizilla.data"):
        bundle = load_citation_raw(fixtures_dir / "toy.content", fixtures_dir / "toy_dangling.cites")
    assert bundle.dangling_count == 1
    assert len(bundle.edges) == 1
    assert "unknown endpoints" in caplog.text


def test_empty_content_is_parse_error(fixtures_dir):
    with pytest.raises(ParseError) as info:
        load_citation_raw(fixtures_dir / "empty.content", fixtures_dir / "empty.cites")
    assert info.value.line_number == 1


def test_ragged_content_reports_line(fixtures_dir):
    with pytest.raises(ParseError) as info:
        load_citation_raw(fixtures_dir / "ragged.content", fixtures_dir / "toy.cites")
    assert info.value.line_number == 2
    assert "ragged.content:2" in str(info.value)


def test_duplicate_id_and_bad_feature(tmp_path):
    cites = tmp_path / "x.cites"
    cites.write_text("")
    content = tmp_path / "x.content"
    content.write_text("a 1 c0\na 0 c1\n")
    with pytest.raises(ParseError, match="duplicate"):
        load_citation_raw(content, cites)
    content.write_text("a 1 c0\nb zz c1\n")
    with pytest.raises(ParseError, match="non-numeric"):
        load_citation_raw(content, cites)


def test_citation_with_split_file_and_normalisation(fixtures_dir, tmp_path):
    splits = tmp_path / "s.txt"
    splits.write_text("# toy split\ntrain 0,1\nval 2\ntest\n")
    bundle = load_citation_raw(
        fixtures_dir / "toy.content", fixtures_dir / "toy.cites", split_file=splits, row_normalize_features=True
    )
    np.testing.assert_array_equal(bundle.indices("val"), [2])
    np.testing.assert_allclose(bundle.features.data.sum(axis=1), 1.0)


def test_missing_files(tmp_path):
    with pytest.raises(InputError):
        load_citation_raw(tmp_path / "a.content", tmp_path / "a.cites")
    with pytest.raises(InputError):
        load_dataset(tmp_path / "nothing", "generic")
    with pytest.raises(InputError):
        load_dataset(tmp_path, "bogus")


# --- bundle ----------------------------------------------------------------

def test_bundle_canonicalises_edges():
    b = _bundle(edges=[(1, 0), (0, 1), (2, 2), (3, 2)])
    np.testing.assert_array_equal(b.edges, [[0, 1], [2, 3]])
    assert not b.edges.flags.writeable


def test_canonical_edges_counts():
    edges, loops, dups = canonical_edges([(2, 1), (1, 2), (3, 3), (0, 4)])
    np.testing.assert_array_equal(edges, [[0, 4], [1, 2]])
    assert (loops, dups) == (1, 1)


@pytest.mark.parametrize(
    "kw",
    [
        {"labels": (0, 0, 0, 0)},
        {"labels": (0, 1, 2, 1)},
        {"edges": ((0, 4),)},
        {"val_mask": [True, False, False, False]},
        {"test_mask": [True, False]},
    ],
)
def test_bundle_validation(kw):
    with pytest.raises(InputError):
        _bundle(**kw)


def test_bundle_mask_lookup():
    b = _bundle()
    np.testing.assert_array_equal(b.indices("test"), [3])
    with pytest.raises(InputError):
        b.mask("holdout")
    assert "n=4" in b.summary()


# --- splits ----------------------------------------------------------------

def test_split_file_ranges(tmp_path):
    path = tmp_path / "s.txt"
    path.write_text("train 0-2, 5\n\nval 3 # trailing\ntest 4,6-7\n")
    masks = parse_split_file(path, 8)
    np.testing.assert_array_equal(np.flatnonzero(masks["train"]), [0, 1, 2, 5])
    np.testing.assert_array_equal(np.flatnonzero(masks["test"]), [4, 6, 7])


@pytest.mark.parametrize(
    "text,line",
    [("train 0-1\nholdout 2\n", 2), ("train 0-x\n", 1), ("val 2\ntest 5-9\n", 2), ("train 3-1\n", 1)],
)
def test_split_file_errors(tmp_path, text, line):
    path = tmp_path / "s.txt"
    path.write_text(text)
    with pytest.raises(ParseError) as info:
        parse_split_file(path, 6)
    assert info.value.line_number == line


def test_format_ranges():
    assert format_ranges([5, 0, 1, 2, 7, 8]) == "0-2,5,7-8"
    assert format_ranges([]) == ""


def test_standard_split_sizes():
    labels = np.array([0, 1] * 50)
    masks = standard_split(labels, 2, train_per_class=5, val_size=20, test_size=30)
    assert masks["train"].sum() == 10
    assert masks["val"].sum() == 20 and masks["test"].sum() == 30
    np.testing.assert_array_equal(np.flatnonzero(masks["train"]), np.arange(10))
    assert masks["test"][-1]


def test_row_normalize_leaves_zero_rows():
    out = row_normalize(np.array([[1.0, 3.0], [0.0, 0.0]]))
    np.testing.assert_array_equal(out, [[0.25, 0.75], [0.0, 0.0]])


# --- generic format --------------------------------------------------------

def test_generic_round_trip_is_byte_identical(small_sbm, tmp_path):
    first = save_generic(small_sbm, tmp_path / "a")
    reloaded = load_generic_dir(first)
    second = save_generic(reloaded, tmp_path / "b")
    for name in ("features.csv", "edges.tsv", "labels.csv", "splits.txt"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    np.testing.assert_array_equal(reloaded.features.data, small_sbm.features.data)


def test_citation_and_generic_load_identically(toy_bundle, tmp_path):
    out = save_generic(toy_bundle, tmp_path / "toy")
    again = load_dataset(out, "generic")
    np.testing.assert_array_equal(again.features.data, toy_bundle.features.data)
    np.testing.assert_array_equal(again.edges, toy_bundle.edges)
    np.testing.assert_array_equal(again.labels, toy_bundle.labels)
    for split in ("train", "val", "test"):
        np.testing.assert_array_equal(again.mask(split), toy_bundle.mask(split))


def test_generic_label_count_mismatch(small_sbm, tmp_path):
    out = save_generic(small_sbm, tmp_path / "g")
    labels = (out / "labels.csv").read_text().splitlines()
    (out / "labels.csv").write_text("\n".join(labels[:-1]) + "\n")
    with pytest.raises(InputError, match="rows"):
        load_generic_dir(out)


def test_generic_edge_out_of_range(toy_bundle, tmp_path):
    out = save_generic(toy_bundle, tmp_path / "g")
    (out / "edges.tsv").write_text("0\t7\n")
    with pytest.raises(InputError):
        load_generic_dir(out)


def test_generic_without_edges(tmp_path):
    b = _bundle(edges=())
    out = save_generic(b, tmp_path / "g")
    assert (out / "edges.tsv").read_text() == ""
    assert len(load_generic_dir(out).edges) == 0


# --- block model -----------------------------------------------------------

def test_block_sizes():
    assert block_sizes(10, 3) == [4, 3, 3]


def test_sbm_full_blocks_are_disjoint_cliques():
    bundle = generate_sbm(SbmSpec(n=12, k=3, p_in=1.0, p_out=0.0, feature_dim=2, train_per_class=1, val_per_class=1))
    assert len(bundle.edges) == 3 * 6
    i, j = bundle.edges.T
    np.testing.assert_array_equal(bundle.labels[i], bundle.labels[j])


def test_sbm_is_deterministic_per_seed():
    a = generate_sbm(SbmSpec(n=60, k=2, seed=11))
    b = generate_sbm(SbmSpec(n=60, k=2, seed=11))
    c = generate_sbm(SbmSpec(n=60, k=2, seed=12))
    np.testing.assert_array_equal(a.edges, b.edges)
    np.testing.assert_array_equal(a.features.data, b.features.data)
    np.testing.assert_array_equal(a.train_mask, b.train_mask)
    assert not np.array_equal(a.features.data, c.features.data)


def test_benchmark_sbm_is_assortative(benchmark_sbm):
    g = nx.Graph()
    g.add_nodes_from(range(benchmark_sbm.n))
    g.add_edges_from(benchmark_sbm.edges.tolist())
    blocks = [set(np.flatnonzero(benchmark_sbm.labels == c).tolist()) for c in range(3)]
    assert nx.community.modularity(g, blocks) > 0.3
    assert benchmark_sbm.train_mask.sum() == 60 and benchmark_sbm.val_mask.sum() == 90


@pytest.mark.parametrize(
    "kw", [{"p_in": 0.1, "p_out": 0.2}, {"k": 1}, {"n": 2, "k": 3}, {"noise": -1.0}, {"train_per_class": 0}]
)
def test_sbm_spec_validation(kw):
    with pytest.raises(InputError):
        SbmSpec(**kw)


def test_sbm_spec_file(tmp_path):
    spec = tmp_path / "sbm.json"
    spec.write_text(json.dumps({"n": 40, "k": 2, "seed": 5, "train_per_class": 4, "val_per_class": 4}))
    bundle = load_dataset(spec, "sbm")
    assert bundle.n == 40
    spec.write_text(json.dumps({"n": 40, "blocks": 2}))
    with pytest.raises(InputError, match="blocks"):
        load_dataset(spec, "sbm")


# --- OOD noise -------------------------------------------------------------

def test_ood_eta_zero_is_identity(small_sbm):
    out = inject_ood_noise(small_sbm.features, 0.0, seed=1)
    np.testing.assert_array_equal(out.data, small_sbm.features.data)


def test_ood_noise_variance_matches_eta():
    X = np.zeros((1000, 50))
    out = inject_ood_noise(X, 2.0, seed=3)
    assert abs(out.data.var() / 4.0 - 1.0) < 0.05


def test_ood_noise_restricted_rows(small_sbm):
    rows = small_sbm.test_mask
    out = inject_ood_noise(small_sbm.features, 1.0, seed=2, rows=rows)
    np.testing.assert_array_equal(out.data[~rows], small_sbm.features.data[~rows])
    assert not np.allclose(out.data[rows], small_sbm.features.data[rows])
    with pytest.raises(InputError):
        inject_ood_noise(small_sbm.features, -1.0, seed=0)


def test_sbm_ray_layout_puts_class_means_on_one_axis():
    bundle = generate_sbm(SbmSpec(n=600, k=3, feature_dim=4, separation=1.0, noise=0.1, seed=4))
    X = bundle.features.data
    for c in range(3):
        centroid = X[bundle.labels == c].mean(axis=0)
        np.testing.assert_allclose(centroid, [c, 0.0, 0.0, 0.0], atol=0.03)
    with pytest.raises(InputError, match="layout"):
        SbmSpec(layout="spiral")
