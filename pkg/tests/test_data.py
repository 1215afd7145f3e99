import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srvcc.checkpoint import Checkpoint, from_result, load_checkpoint, save_checkpoint
from srvcc.data import (DataMatrix, SyntheticSpec, load_matrix, parse_matrix, preprocess,
                        save_matrix, synth_checkerboard)
from srvcc.errors import (DataError, DimensionError, EmptyFileError, NonNumericError,
                          RaggedRowsError)
from srvcc.export import (export_cocluster, export_embeddings, load_permutation,
                          read_embeddings, restore_order, side_embedding)
from srvcc.metrics import accuracy_hungarian, nmi
from srvcc.side import build_side_vae, encode
from srvcc.trainer import TrainConfig, fit


def test_dense_grid():
    m = parse_matrix("1,2\n3,4")
    assert np.array_equal(m.values, [[1, 2], [3, 4]]) and m.mask.all()


def test_empty_cell_is_missing():
    m = parse_matrix("1,,3")
    assert m.mask.tolist() == [[True, False, True]]
    assert np.isnan(m.masked_values()[0, 1])


def test_labeled_csv():
    m = parse_matrix("id,a,b\nr1,1,2\nr2,3,\n", "labeled_csv")
    assert m.row_labels == ["r1", "r2"] and m.col_labels == ["a", "b"]
    assert m.mask.tolist() == [[True, True], [True, False]]


@pytest.mark.parametrize("text,err", [("", EmptyFileError), ("\n\n", EmptyFileError),
                                      ("1,2\n3", RaggedRowsError), ("1,x", NonNumericError),
                                      ("1,inf", NonNumericError)])
def test_distinct_parse_errors(text, err):
    with pytest.raises(err):
        parse_matrix(text)


def test_parse_errors_are_distinct_classes():
    assert len({EmptyFileError, RaggedRowsError, NonNumericError}) == 3
    for cls in (EmptyFileError, RaggedRowsError, NonNumericError):
        assert issubclass(cls, DataError) and cls.exit_code == 2


def test_image_scale_matrix_loads(tmp_path):
    # Coil20 dimensions: 1440 images of 32 x 32 pixels
    rng = np.random.default_rng(0)
    X = rng.integers(0, 256, size=(1440, 1024))
    path = tmp_path / "coil20.csv"
    path.write_text("\n".join(",".join(map(str, r)) for r in X) + "\n")
    m = load_matrix(path)
    assert (m.n, m.d) == (1440, 1024) and m.mask.all()


def test_matrix_validation():
    with pytest.raises(DimensionError):
        DataMatrix(np.ones((2, 2)), np.ones((2, 3), bool))
    with pytest.raises(DataError):
        DataMatrix(np.array([[np.nan]]), np.ones((1, 1), bool))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 6), d=st.integers(1, 6))
def test_save_load_round_trip(tmp_path_factory, seed, n, d):
    rng = np.random.default_rng(seed)
    mask = rng.random((n, d)) > 0.3
    m = DataMatrix(np.where(mask, rng.standard_normal((n, d)) * 10.0 ** rng.integers(-5, 5), 0.0),
                   mask)
    if not mask.any():
        return
    path = tmp_path_factory.mktemp("rt") / "m.csv"
    save_matrix(path, m)
    back = load_matrix(path)
    assert np.array_equal(back.mask, m.mask)
    assert np.allclose(back.values[mask], m.values[mask], rtol=1e-12, atol=0)


def test_minmax_example():
    assert np.array_equal(preprocess(DataMatrix([[0.0, 10.0]], [[True, True]]), "minmax01").values,
                          [[0.0, 1.0]])


def test_minmax_range(rng):
    m = preprocess(DataMatrix(rng.standard_normal((5, 4)) * 7, np.ones((5, 4), bool)), "minmax01")
    assert m.values.min() == 0.0 and m.values.max() == 1.0


def test_minmax_constant_rejected():
    with pytest.raises(DataError):
        preprocess(DataMatrix(np.ones((2, 2)), np.ones((2, 2), bool)), "minmax01")


def test_tfidf_one_hot_row():
    X = np.array([[3.0, 0, 0], [0, 1, 1], [0, 2, 1]])
    out = preprocess(DataMatrix(X, np.ones_like(X, bool)), "tfidf_l2")
    assert np.allclose(out.values[0], [1, 0, 0], atol=1e-15)


def test_tfidf_row_norms(rng):
    X = rng.poisson(1.0, size=(30, 12)).astype(float)
    out = preprocess(DataMatrix(X, np.ones_like(X, bool)), "tfidf_l2")
    norms = np.linalg.norm(out.values, axis=1)
    nz = norms > 0
    assert nz.sum() > 20 and np.all(np.abs(norms[nz] - 1) < 1e-12)


def test_tfidf_rejects_negative():
    with pytest.raises(DataError):
        preprocess(DataMatrix([[-1.0]], [[True]]), "tfidf_l2")


def test_preprocess_keeps_mask(rng):
    mask = rng.random((4, 4)) > 0.3
    out = preprocess(DataMatrix(rng.random((4, 4)), mask), "minmax01")
    assert np.array_equal(out.mask, mask)


def test_noiseless_blocks():
    m, rl, cl = synth_checkerboard(SyntheticSpec(12, 9, 3, 3, seed=1))
    means = {}
    for i in range(12):
        for j in range(9):
            means.setdefault((rl[i], cl[j]), set()).add(m.values[i, j])
    assert all(len(v) == 1 for v in means.values())
    assert len({next(iter(v)) for v in means.values()}) == 9


def test_balanced_blocks():
    _, rl, cl = synth_checkerboard(SyntheticSpec(23, 10, 4, 3))
    assert np.ptp(np.bincount(rl)) <= 1 and np.ptp(np.bincount(cl)) <= 1


def test_missing_fraction():
    m, _, _ = synth_checkerboard(SyntheticSpec(200, 100, 4, 3, missing_fraction=0.3, seed=2))
    assert abs((~m.mask).mean() - 0.3) <= 0.02


def test_same_seed_same_matrix():
    spec = SyntheticSpec(20, 10, 2, 2, noise_level=0.5, missing_fraction=0.2, seed=9)
    a, b = synth_checkerboard(spec), synth_checkerboard(spec)
    assert np.array_equal(a[0].values, b[0].values) and np.array_equal(a[0].mask, b[0].mask)


def test_noise_std_matches_requested_level():
    m, rl, cl = synth_checkerboard(SyntheticSpec(200, 100, 2, 2, separation=2.0,
                                                 noise_level=0.5, seed=3))
    resid = [m.values[i, j] - np.mean(m.values[np.ix_(rl == rl[i], cl == cl[j])])
             for i in range(0, 200, 7) for j in range(0, 100, 7)]
    assert abs(np.std(resid) - 1.0) < 0.1


def test_ground_truth_scores_perfectly():
    _, rl, cl = synth_checkerboard(SyntheticSpec(30, 20, 3, 2))
    assert accuracy_hungarian(rl, rl) == 1.0 and nmi(cl, cl) == 1.0


def test_invalid_synthetic_spec():
    with pytest.raises(ValueError):
        SyntheticSpec(3, 3, 4, 1)
    with pytest.raises(ValueError):
        SyntheticSpec(3, 3, 1, 1, missing_fraction=1.0)


def test_ordered_checkerboard_gives_identity(tmp_path):
    rl, cl = np.repeat([0, 1], 3), np.repeat([0, 1, 2], 2)
    X = rl[:, None] * 3.0 + cl[None, :]
    out = export_cocluster(DataMatrix(X, np.ones_like(X, bool)), rl, cl, tmp_path / "o.csv")
    assert np.array_equal(out.row_order, np.arange(6)) and np.array_equal(out.col_order,
                                                                          np.arange(6))
    assert out.row_bounds == [(0, 0, 3), (1, 3, 6)]


def test_shuffled_checkerboard_restored_to_blocks(tmp_path):
    m, rl, cl = synth_checkerboard(SyntheticSpec(16, 12, 4, 3, seed=5))
    out = export_cocluster(m, rl, cl, tmp_path / "o.csv")
    R = load_matrix(out.matrix_path).values
    for _, r0, r1 in out.row_bounds:
        for _, c0, c1 in out.col_bounds:
            assert np.var(R[r0:r1, c0:c1]) == 0.0


def test_permutation_round_trip_is_byte_identical(tmp_path):
    m, rl, cl = synth_checkerboard(SyntheticSpec(15, 8, 3, 2, noise_level=0.4,
                                                 missing_fraction=0.2, seed=6))
    save_matrix(tmp_path / "orig.csv", m)
    out = export_cocluster(m, rl, cl, tmp_path / "blocks.csv")
    ro, co = load_permutation(out.permutation_path)
    assert np.array_equal(ro, out.row_order) and np.array_equal(co, out.col_order)
    save_matrix(tmp_path / "back.csv", restore_order(load_matrix(out.matrix_path), ro, co))
    assert (tmp_path / "back.csv").read_bytes() == (tmp_path / "orig.csv").read_bytes()


def test_embedding_export(tmp_path, rng):
    row = build_side_vae("row", 3, 2, 2, rng)
    col = build_side_vae("column", 2, 2, 3, rng)
    X = rng.standard_normal((2, 3))
    paths = export_embeddings(side_embedding(row, X), side_embedding(col, X.T), tmp_path / "e")
    r = read_embeddings(paths[0])
    assert r.coords.shape == (2, 2)
    assert np.allclose(r.gamma.sum(1), 1, atol=1e-9)
    assert np.allclose(r.coords, encode(row, X).mu_raw, atol=1e-15)
    c = read_embeddings(paths[1])
    assert c.coords.shape == (3, 2) and c.gamma.shape == (3, 3)


def test_checkpoint_round_trip(tmp_path):
    m, _, _ = synth_checkerboard(SyntheticSpec(16, 10, 2, 2, noise_level=0.2, seed=1))
    config = TrainConfig(row_latent=2, col_latent=2, joint_latent=2, row_hidden=(4,),
                         col_hidden=(4,), joint_hidden=(4,), max_epochs=2, pretrain_epochs=1,
                         em_cells=50, cells_per_epoch=32, result_cells=20)
    res = fit(m.masked_values(), m.mask, config)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, from_result(res, note="x"))
    ck = load_checkpoint(path)
    a, b = res.models.parameters(), ck.models.parameters()
    assert set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)
    assert np.array_equal(ck.models.row.scale, res.models.row.scale)
    assert ck.config == res.config and ck.extra["note"] == "x"
    assert np.array_equal(ck.row_labels, res.row_labels)
    assert ck.optimizer.t == res.optimizer.t
    assert ck.rng_state == res.rng_state


def test_corrupt_checkpoint(tmp_path):
    path = tmp_path / "bad.npz"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(DataError):
        load_checkpoint(path)
