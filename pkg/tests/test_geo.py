import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dabul import geo


def test_load_smallest_connected_graph(tmp_path):
    path = tmp_path / "adj.txt"
    path.write_text("[areas]\n1,1\n2,1\n[edges]\n1,2\n")
    g = geo.load_geography(path)
    assert g.m1 == 1 and g.m2 == 2
    assert g.neighbors == ((1,), (0,))


def test_load_symmetrizes_one_directional_edges(tmp_path):
    path = tmp_path / "adj.txt"
    path.write_text("[areas]\n1,1\n2,1\n3,1\n[edges]\n1,2\n2,1\n2,3\n")
    g = geo.load_geography(path)
    assert g.neighbors[0] == (1,)
    assert g.neighbors[2] == (1,)
    assert g.neighbors[1] == (0, 2)


@pytest.mark.parametrize("content,match", [
    ("[areas]\n1,1\n2,3\n[edges]\n1,2\n", "admin1"),          # missing parent 2
    ("[areas]\n1,1\n2,1\n[edges]\n1,1\n", "self-loop"),
    ("[areas]\n1,1\n3,1\n[edges]\n1,3\n", "contiguous"),
    ("[areas]\n1,1\n1,1\n[edges]\n", "duplicate"),
    ("[areas]\n1,1\n2,1\n[edges]\n1,5\n", "unknown"),
])
def test_load_rejects_bad_files(tmp_path, content, match):
    path = tmp_path / "adj.txt"
    path.write_text(content)
    with pytest.raises(geo.GeographyError, match=match):
        geo.load_geography(path)


def test_save_load_roundtrip(tmp_path):
    g = geo.generate_synthetic_geography(3, 7, seed=5)
    path = tmp_path / "g.txt"
    geo.save_geography(g, path)
    g2 = geo.load_geography(path)
    assert g2.m1 == g.m1 and g2.m2 == g.m2
    assert g2.neighbors == g.neighbors
    assert np.array_equal(g2.admin1_of, g.admin1_of)


def test_lattice_2x2_corner_degrees():
    g = geo.generate_synthetic_geography(1, 4, seed=0)
    assert g.m1 == 1 and g.m2 == 4
    assert sorted(len(nb) for nb in g.neighbors) == [2, 2, 2, 2]


def test_lattice_paper_scale_connected():
    g = geo.generate_synthetic_geography(8, 20, seed=3)
    assert g.m1 == 8 and g.m2 == 160
    # independent connectivity oracle: breadth-first search
    seen = {0}
    frontier = [0]
    while frontier:
        j = frontier.pop()
        for k in g.neighbors[j]:
            if k not in seen:
                seen.add(k)
                frontier.append(k)
    assert len(seen) == g.m2


def test_lattice_two_singletons_one_cross_edge():
    g = geo.generate_synthetic_geography(2, 1, seed=0)
    assert g.m2 == 2 and g.n_edges == 1


@given(n1=st.integers(1, 4), per=st.integers(1, 9), seed=st.integers(0, 3))
@settings(max_examples=25, deadline=None)
def test_lattice_deterministic_and_valid(n1, per, seed):
    a = geo.generate_synthetic_geography(n1, per, seed=seed)
    b = geo.generate_synthetic_geography(n1, per, seed=seed)
    assert a.neighbors == b.neighbors
    assert np.array_equal(a.admin1_of, b.admin1_of)
    assert a.is_connected()


def _path_graph(n):
    return geo._build_geography(np.zeros(n, dtype=np.int64),
                                {(i, i + 1) for i in range(n - 1)})


def test_structure_path_graph_degree_minus_adjacency():
    g = _path_graph(3)
    st_ = geo.build_icar_structure(g, nesting="global")
    expected = np.array([[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]])
    assert np.array_equal(st_.Q, expected)


def test_structure_two_node_scaling():
    g = _path_graph(2)
    st_ = geo.build_icar_structure(g, nesting="global")
    # eigendecomposition oracle on the 2x2 case: pinv(Q) has diagonal (1/4, 1/4)
    assert st_.scale_factors == pytest.approx([0.25])
    assert np.allclose(np.diag(st_.Q_star_inv), [1.0, 1.0])


def test_structure_per_admin1_blocks_independently_scaled():
    g = geo.generate_synthetic_geography(2, 4, seed=0)
    st_ = geo.build_icar_structure(g, nesting="per_admin1")
    assert len(st_.blocks) == 2
    for bi, ix in enumerate(st_.blocks):
        # dense pseudo-inverse oracle for the block scale factor
        nb = len(ix)
        Pb = np.eye(nb) - 1.0 / nb
        oracle = np.linalg.pinv(Pb @ st_.Q[np.ix_(ix, ix)] @ Pb)
        gm = np.exp(np.mean(np.log(np.diag(oracle))))
        assert st_.scale_factors[bi] == pytest.approx(gm, rel=1e-10)
        scaled = np.linalg.pinv(Pb @ st_.Q_star[np.ix_(ix, ix)] @ Pb)
        gm_scaled = np.exp(np.mean(np.log(np.diag(scaled))))
        assert abs(gm_scaled - 1.0) < 1e-8


def test_structure_rejects_disconnected_block():
    g = geo._build_geography(np.array([0, 0, 0, 0]), {(0, 1), (2, 3)})
    with pytest.raises(geo.GeographyError, match="block 1"):
        geo.build_icar_structure(g, nesting="global")


def test_structure_nullspace_and_psd():
    g = geo.generate_synthetic_geography(2, 5, seed=1)
    st_ = geo.build_icar_structure(g, nesting="per_admin1")
    ones = np.ones(g.m2)
    assert np.allclose(st_.Q @ ones, 0.0, atol=1e-12)  # connected graph
    rng = np.random.default_rng(0)
    for mat in (st_.Q, st_.Q_star):
        b = rng.standard_normal((1000, g.m2))
        quad = np.einsum("ij,jk,ik->i", b, mat, b)
        assert np.all(quad >= -1e-9)


def test_projection_annihilates_block_constants(small_structure, small_geography):
    rng = np.random.default_rng(1)
    u = rng.standard_normal(small_geography.m2)
    shifted = u + 5.0 * (small_geography.admin1_of == 0) - 2.0 * (small_geography.admin1_of == 1)
    assert np.allclose(small_structure.project(u), small_structure.project(shifted))
    proj = small_structure.project(u)
    for ix in small_structure.blocks:
        assert abs(proj[ix].mean()) < 1e-12


def test_structure_sample_u_matches_covariance(small_structure):
    rng = np.random.default_rng(2)
    draws = np.stack([small_structure.sample_u(rng) for _ in range(4000)])
    cov = np.cov(draws.T)
    assert np.allclose(cov, small_structure.Q_star_inv, atol=0.15)
