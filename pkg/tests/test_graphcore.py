"""Graph construction, synthetic data, splits, perturbations, CSV IO."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import qpignn as q
from qpignn.errors import ContractError, IngestionError, ParameterError
from qpignn.graphcore import (DEFAULT_RATIOS, FEATURE_FAMILIES,
                              NEIGHBOR_MIX, PERTURB_KINDS, PerturbSpec,
                              SplitSpec, mean_adjacency, perturb, split)


# ---------------------------------------------------------------------------
# Graph/CSR invariants
# ---------------------------------------------------------------------------

def _assert_valid(g):
    g.validate()
    # symmetric, no self loops, strictly sorted rows: validate() covers
    # these; double-check the degree identity here.
    assert int(g.row_offsets[-1]) == 2 * g.num_edges
    assert np.array_equal(g.degrees, np.diff(g.row_offsets))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 60), p=st.floats(0.0, 1.0), seed=st.integers(0, 10))
def test_gen_er_always_valid(n, p, seed):
    _assert_valid(q.gen_er(n, p, seed))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(3, 60), m=st.integers(1, 4), seed=st.integers(0, 10))
def test_gen_ba_valid_and_dense_enough(n, m, seed):
    if n < m + 1:
        n = m + 1
    g = q.gen_ba(n, m, seed)
    _assert_valid(g)
    # preferential attachment adds m edges per arriving node
    assert g.num_edges >= m * (n - m - 1)


def test_gen_er_determinism():
    a = q.gen_er(50, 0.1, seed=4)
    b = q.gen_er(50, 0.1, seed=4)
    assert np.array_equal(a.col_indices, b.col_indices)
    assert not np.array_equal(a.col_indices, q.gen_er(50, 0.1, seed=5).col_indices)


def test_gen_er_edge_probabilities():
    assert q.gen_er(30, 0.0, seed=0).num_edges == 0
    assert q.gen_er(30, 1.0, seed=0).num_edges == 30 * 29 // 2


def test_structured_generators():
    grid = q.gen_grid(3, 4)
    assert grid.num_nodes == 12
    assert grid.num_edges == 3 * 3 + 2 * 4  # vertical + horizontal runs
    chain = q.gen_chain(5)
    assert chain.num_edges == 4
    assert np.array_equal(chain.degrees, [1, 2, 2, 2, 1])
    tree = q.gen_tree(2, 3)
    assert tree.num_nodes == 2 ** 4 - 1
    assert tree.num_edges == tree.num_nodes - 1
    for g in (grid, chain, tree):
        _assert_valid(g)


def test_from_edges_dedupes_and_validates():
    g = q.from_edges(4, [(0, 1), (1, 0), (2, 3), (2, 3)])
    assert g.num_edges == 2
    # self loops are silently dropped, out-of-range endpoints rejected
    assert q.from_edges(3, [(1, 1)]).num_edges == 0
    with pytest.raises(ParameterError):
        q.from_edges(3, [(0, 5)])
    with pytest.raises(ContractError):
        q.Graph(2, np.array([0, 1, 2]), np.array([0, 0]))


def test_edge_pairs_round_trip(ring6):
    pairs = ring6.edge_pairs()
    assert pairs.shape == (ring6.num_edges, 2)
    assert (pairs[:, 0] < pairs[:, 1]).all()
    rebuilt = q.from_edges(ring6.num_nodes, pairs)
    assert np.array_equal(rebuilt.col_indices, ring6.col_indices)
    assert np.array_equal(rebuilt.row_offsets, ring6.row_offsets)


def test_mean_adjacency_rows(ring6):
    a = mean_adjacency(ring6)
    sums = np.asarray(a.sum(axis=1)).ravel()
    # every node in the fixture has neighbours, so rows average to 1
    assert np.allclose(sums, 1.0)
    h = np.eye(6)
    out = a @ h
    # row v spreads 1/deg(v) over v's neighbours
    v = 1
    np.testing.assert_allclose(out[v], h[ring6.neighbors(v)].mean(axis=0))


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("family", FEATURE_FAMILIES)
def test_synth_families_shapes_and_masks(family):
    g = q.gen_er(40, 0.2, seed=1)
    ds = q.synth_dataset(g, family, 5, 0.3, seed=1)
    assert ds.features.shape == (40, 5)
    assert ds.targets.shape == (40,)
    m = ds.masks()
    total = m["train"] | m["val"] | m["test"]
    assert total.all()
    assert (m["train"] & m["val"]).sum() == 0
    assert (m["train"] & m["test"]).sum() == 0


def test_synth_dataset_deterministic_and_seed_sensitive():
    g = q.gen_er(40, 0.2, seed=1)
    a = q.synth_dataset(g, "gaussian", 5, 0.3, seed=2)
    b = q.synth_dataset(g, "gaussian", 5, 0.3, seed=2)
    c = q.synth_dataset(g, "gaussian", 5, 0.3, seed=3)
    assert np.array_equal(a.targets, b.targets)
    assert not np.array_equal(a.targets, c.targets)


def test_targets_mix_in_neighbour_signal():
    """Zero noise makes the generative recipe exactly recoverable."""
    g = q.gen_er(60, 0.15, seed=6)
    ds = q.synth_dataset(g, "gaussian", 4, 0.0, seed=6)
    base = ds.targets
    noisy = q.synth_dataset(g, "gaussian", 4, 1.0, seed=6).targets
    # same seed, larger sigma: residual is exactly the injected noise
    resid = noisy - base
    assert 0.7 < resid.std() < 1.3
    assert NEIGHBOR_MIX == 0.5


def test_synth_rejects_bad_arguments():
    g = q.gen_er(10, 0.3, seed=0)
    with pytest.raises(ParameterError):
        q.synth_dataset(g, "nope", 4, 0.1, seed=0)
    with pytest.raises(ParameterError):
        q.synth_dataset(g, "gaussian", 0, 0.1, seed=0)
    with pytest.raises(ParameterError):
        q.synth_dataset(g, "gaussian", 4, -0.1, seed=0)


def test_dataset_validates_mask_partition(ring6):
    x = np.zeros((6, 2))
    y = np.zeros(6)
    ok = np.array([1, 1, 1, 1, 0, 0], bool), np.array([0, 0, 0, 0, 1, 0], bool)
    with pytest.raises(ContractError):
        q.Dataset(ring6, x, y, ok[0], ok[1], np.zeros(6, bool))  # node 5 lost


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ("random", "degree"))
def test_split_partitions(kind):
    g = q.gen_er(100, 0.1, seed=2)
    tr, va, te = split(g, SplitSpec(kind=kind, ratios=DEFAULT_RATIOS, seed=0))
    assert (tr | va | te).all()
    assert (tr & va).sum() == (tr & te).sum() == (va & te).sum() == 0
    assert tr.sum() == 60 and va.sum() == 20 and te.sum() == 20


def test_degree_split_orders_by_degree():
    g = q.gen_ba(100, 3, seed=2)
    tr, _, te = split(g, SplitSpec(kind="degree", ratios=DEFAULT_RATIOS, seed=0))
    assert g.degrees[tr].max() <= g.degrees[te].min()


def test_community_split_needs_structure():
    # grids fragment into many label-propagation communities
    tr, va, te = split(q.gen_grid(20, 20),
                       SplitSpec(kind="community", ratios=DEFAULT_RATIOS, seed=0))
    assert tr.sum() > 0 and va.sum() > 0 and te.sum() > 0
    # a dense ER graph collapses to one community and cannot be split
    with pytest.raises(ParameterError):
        split(q.gen_er(200, 0.1, seed=0),
              SplitSpec(kind="community", ratios=DEFAULT_RATIOS, seed=0))


def test_split_spec_validation():
    with pytest.raises(ParameterError):
        SplitSpec(kind="nope", ratios=DEFAULT_RATIOS, seed=0)
    with pytest.raises(ParameterError):
        SplitSpec(kind="random", ratios=(0.5, 0.4, 0.2), seed=0)


def test_random_split_seed_sensitivity():
    g = q.gen_er(100, 0.1, seed=2)
    tr0, _, _ = split(g, SplitSpec(kind="random", ratios=DEFAULT_RATIOS, seed=0))
    tr0b, _, _ = split(g, SplitSpec(kind="random", ratios=DEFAULT_RATIOS, seed=0))
    tr1, _, _ = split(g, SplitSpec(kind="random", ratios=DEFAULT_RATIOS, seed=1))
    assert np.array_equal(tr0, tr0b)
    assert not np.array_equal(tr0, tr1)


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------

def test_perturb_level_zero_is_identity(small_ds):
    for kind in PERTURB_KINDS:
        out = perturb(small_ds, PerturbSpec(kind=kind, level=0.0, seed=5))
        assert np.array_equal(out.targets, small_ds.targets)
        assert np.array_equal(out.features, small_ds.features)
        assert np.array_equal(out.graph.col_indices, small_ds.graph.col_indices)


def test_perturb_magnitudes(small_ds):
    f = perturb(small_ds, PerturbSpec(kind="feature_noise", level=0.2, seed=5))
    resid = f.features - small_ds.features
    assert 0.1 < resid.std() < 0.3
    assert np.array_equal(f.targets, small_ds.targets)

    t = perturb(small_ds, PerturbSpec(kind="target_noise", level=0.2, seed=5))
    assert np.array_equal(t.features, small_ds.features)
    assert 0.1 < (t.targets - small_ds.targets).std() < 0.3

    e = perturb(small_ds, PerturbSpec(kind="edge_dropout", level=0.3, seed=5))
    kept = e.graph.num_edges / small_ds.graph.num_edges
    assert 0.55 < kept < 0.85
    e.graph.validate()
    # masks never change, so metric populations stay comparable
    assert np.array_equal(e.train_mask, small_ds.train_mask)


def test_perturb_deterministic(small_ds):
    spec = PerturbSpec(kind="edge_dropout", level=0.3, seed=5)
    a = perturb(small_ds, spec)
    b = perturb(small_ds, spec)
    assert np.array_equal(a.graph.col_indices, b.graph.col_indices)


def test_perturb_spec_validation():
    with pytest.raises(ParameterError):
        PerturbSpec(kind="nope", level=0.1, seed=0)
    with pytest.raises(ParameterError):
        PerturbSpec(kind="target_noise", level=-1.0, seed=0)
    with pytest.raises(ParameterError):
        PerturbSpec(kind="edge_dropout", level=1.5, seed=0)


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------

def test_csv_round_trip(tmp_path, small_ds):
    paths = [tmp_path / n for n in ("e.csv", "f.csv", "t.csv")]
    q.save_csv(small_ds, *paths)
    back = q.load_csv(*paths, split_spec=SplitSpec(kind="random",
                                                   ratios=DEFAULT_RATIOS,
                                                   seed=0))
    assert np.array_equal(back.graph.col_indices, small_ds.graph.col_indices)
    np.testing.assert_allclose(back.features, small_ds.features)
    np.testing.assert_allclose(back.targets, small_ds.targets)


def test_load_csv_rejects_garbage(tmp_path):
    e, f, t = tmp_path / "e.csv", tmp_path / "f.csv", tmp_path / "t.csv"
    f.write_text("1.0,2.0\n0.5,0.5\n")
    t.write_text("1.0\n2.0\n")
    e.write_text("0,notanint\n")
    with pytest.raises(IngestionError):
        q.load_csv(e, f, t)
    e.write_text("0,9\n")  # endpoint out of range for 2 nodes
    with pytest.raises(IngestionError):
        q.load_csv(e, f, t)
    t.write_text("1.0\n")  # row count mismatch with features
    e.write_text("0,1\n")
    with pytest.raises(IngestionError):
        q.load_csv(e, f, t)
