import numpy as np
import pytest

from propgvae.formulas import (
    GeneratorConfig,
    enumerate_assignments,
    evaluate,
    generate_formula,
    neg,
    parse,
    var,
)
from propgvae.semantics import (
    EXACT,
    MONTE_CARLO,
    JacobiError,
    SemanticPCA,
    SemanticSignature,
    agreement,
    center_gram,
    embed,
    embed_signature,
    gram_matrix,
    jaccard,
    jacobi_eigh,
    kernel,
    kernel_pca_fit,
    load_gram,
    load_pca,
    save_gram,
    save_pca,
    signature,
)


def brute_kernel(f, g, n):
    """Independent oracle: explicit loop over the enumerated assignments."""
    total = 0
    for tau in enumerate_assignments(n):
        total += evaluate(f, tau) * evaluate(g, tau)
    return total / 2**n


class TestSignature:
    def test_x1_exact(self):
        assert signature(var(1), 2).values.tolist() == [-1, 1, -1, 1]

    def test_x2_exact(self):
        assert signature(var(2), 2).values.tolist() == [-1, -1, 1, 1]

    def test_tautology(self):
        assert signature(parse("x1 | ~x1", 2), 2).values.tolist() == [1, 1, 1, 1]

    def test_mc_reproducible_and_shared_sample(self):
        a = signature(var(1), 5, MONTE_CARLO, m=64, seed=3)
        b = signature(var(1), 5, MONTE_CARLO, m=64, seed=3)
        assert np.array_equal(a.values, b.values)
        assert a.m == 64 and a.seed == 3

    def test_mode_mismatch_rejected(self):
        a = signature(var(1), 3)
        b = signature(var(1), 3, MONTE_CARLO, m=8, seed=0)
        with pytest.raises(ValueError):
            kernel(a, b)
        c = signature(var(1), 3, MONTE_CARLO, m=8, seed=1)
        with pytest.raises(ValueError):
            kernel(b, c)


class TestKernel:
    def test_self_kernel(self):
        s = signature(var(1), 3)
        assert kernel(s, s) == 1.0

    def test_negation(self):
        a = signature(var(1), 3)
        b = signature(neg(var(1)), 3)
        assert kernel(a, b) == -1.0

    def test_independent_variables(self):
        assert kernel(signature(var(1), 2), signature(var(2), 2)) == 0.0

    def test_against_brute_force(self):
        rng = np.random.default_rng(0)
        cfg = GeneratorConfig(n=4)
        for _ in range(30):
            f = generate_formula(cfg, rng)
            g = generate_formula(cfg, rng)
            got = kernel(signature(f, 4), signature(g, 4))
            assert got == pytest.approx(brute_kernel(f, g, 4), abs=1e-12)

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(1)
        sigs = [signature(generate_formula(GeneratorConfig(n=4), rng), 4) for _ in range(20)]
        for i in range(len(sigs)):
            for j in range(i, len(sigs)):
                kij = kernel(sigs[i], sigs[j])
                assert kij == kernel(sigs[j], sigs[i])
                assert -1.0 <= kij <= 1.0

    def test_agreement_identity_exact(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a = signature(generate_formula(GeneratorConfig(n=5), rng), 5)
            b = signature(generate_formula(GeneratorConfig(n=5), rng), 5)
            assert kernel(a, b) == 2.0 * agreement(a, b) - 1.0

    def test_kernel_08_is_agreement_09(self):
        # agreement and kernel are in affine correspondence: 0.8 <-> 0.9
        assert 2 * 0.9 - 1 == pytest.approx(0.8)

    def test_jaccard_examples(self):
        a = signature(var(1), 2)
        b = signature(var(2), 2)
        assert agreement(a, b) == 0.5
        assert jaccard(a, b) == pytest.approx(1 / 3)

    def test_jaccard_counterexample_to_kernel_identity(self):
        # k = 0 and agreement = 0.5 for (x1, x2), but 2*J - 1 = -1/3: the
        # affine identity holds for the agreement fraction, not set-Jaccard.
        a = signature(var(1), 2)
        b = signature(var(2), 2)
        assert kernel(a, b) == 0.0
        assert 2 * jaccard(a, b) - 1 == pytest.approx(-1 / 3)

    def test_jaccard_of_unsatisfiable_pair(self):
        a = signature(parse("x1 & ~x1", 1), 1)
        b = signature(parse("x1 & ~x1", 1), 1)
        assert jaccard(a, b) == 1.0

    def test_monte_carlo_hoeffding(self):
        rng = np.random.default_rng(3)
        cfg = GeneratorConfig(n=5)
        pool = [generate_formula(cfg, rng) for _ in range(30)]
        m = 1000
        exact = [signature(f, 5) for f in pool]
        mc = [signature(f, 5, MONTE_CARLO, m=m, seed=17) for f in pool]
        bound = 4 / np.sqrt(m)
        hits = 0
        pairs = 0
        for i in range(len(pool)):
            for j in range(i + 1, len(pool)):
                pairs += 1
                if abs(kernel(mc[i], mc[j]) - kernel(exact[i], exact[j])) <= bound:
                    hits += 1
        assert hits / pairs >= 0.95


class TestGram:
    def test_two_anchor_identity(self):
        g = gram_matrix([var(1), var(2)], 2)
        assert np.array_equal(g.matrix, np.eye(2))

    def test_duplicate_anchor(self):
        f = parse("x1 & x2", 2)
        g = gram_matrix([f, f], 2)
        assert np.array_equal(g.matrix, np.ones((2, 2)))

    def test_symmetric_unit_diagonal_psd(self):
        rng = np.random.default_rng(4)
        pool = [generate_formula(GeneratorConfig(n=5), rng) for _ in range(60)]
        g = gram_matrix(pool, 5)
        assert np.array_equal(g.matrix, g.matrix.T)
        assert np.all(np.diag(g.matrix) == 1.0)
        assert np.linalg.eigvalsh(g.matrix).min() >= -1e-8

    def test_threaded_matches_sequential(self):
        rng = np.random.default_rng(5)
        pool = [generate_formula(GeneratorConfig(n=4), rng) for _ in range(40)]
        a = gram_matrix(pool, 4)
        b = gram_matrix(pool, 4, threads=4)
        assert np.array_equal(a.matrix, b.matrix)

    def test_empty_anchor_list(self):
        with pytest.raises(ValueError):
            gram_matrix([], 3)


class TestJacobi:
    def test_matches_library_eigh(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((40, 40))
        a = (a + a.T) / 2
        vals, vecs = jacobi_eigh(a)
        ref = np.linalg.eigvalsh(a)
        assert np.allclose(np.sort(vals), ref, atol=1e-10)
        # eigenvector property A v = lambda v
        for k in range(40):
            assert np.allclose(a @ vecs[:, k], vals[k] * vecs[:, k], atol=1e-8)

    def test_orthonormal_vectors(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((25, 25))
        a = (a + a.T) / 2
        _, vecs = jacobi_eigh(a)
        assert np.allclose(vecs.T @ vecs, np.eye(25), atol=1e-12)

    def test_degenerate_eigenvalues(self):
        a = np.eye(6)
        a[0, 1] = a[1, 0] = 0.5
        vals, _ = jacobi_eigh(a)
        assert np.allclose(np.sort(vals), np.sort(np.linalg.eigvalsh(a)), atol=1e-12)

    def test_nonconvergence_reports_residual(self):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((20, 20))
        a = (a + a.T) / 2
        with pytest.raises(JacobiError) as err:
            jacobi_eigh(a, max_sweeps=1)
        assert err.value.residual > 0


class TestKernelPca:
    def test_identity_gram_centered_spectrum(self):
        # Centering the 4x4 identity leaves three eigenvalues of 1 and one 0,
        # so each nonzero component explains a third of the variance.
        from propgvae.semantics import GramMatrix

        g = GramMatrix(np.eye(4), ("a", "b", "c", "d"), 2, EXACT)
        model = kernel_pca_fit(g, 4)
        assert np.allclose(np.sort(model.eigenvalues), [0, 1, 1, 1], atol=1e-12)
        ratios = model.explained_variance_ratio
        assert np.allclose(ratios[:3], 1 / 3, atol=1e-12)
        assert ratios.sum() == pytest.approx(1.0, abs=1e-9)

    def test_ratios_sum_to_one(self):
        rng = np.random.default_rng(9)
        pool = [generate_formula(GeneratorConfig(n=4), rng) for _ in range(50)]
        model = kernel_pca_fit(gram_matrix(pool, 4), 10)
        assert model.explained_variance_ratio.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(model.eigenvalues >= 0)
        assert np.all(np.diff(model.eigenvalues) <= 1e-12)

    def test_cumulative_variance_monotone_in_k(self):
        rng = np.random.default_rng(10)
        pool = [generate_formula(GeneratorConfig(n=4), rng) for _ in range(30)]
        gram = gram_matrix(pool, 4)
        cum = [
            kernel_pca_fit(gram, k).explained_variance_ratio[:k].sum()
            for k in (1, 3, 5, 10)
        ]
        assert all(b >= a - 1e-12 for a, b in zip(cum, cum[1:]))

    def test_k_out_of_range(self):
        g = gram_matrix([var(1), var(2)], 2)
        with pytest.raises(ValueError):
            kernel_pca_fit(g, 3)

    def test_anchor_projection_consistency(self):
        rng = np.random.default_rng(11)
        pool = [generate_formula(GeneratorConfig(n=4), rng) for _ in range(40)]
        gram = gram_matrix(pool, 4)
        model = kernel_pca_fit(gram, 12)
        training_proj = center_gram(gram.matrix) @ model.projection
        anchor_sigs = model.anchor_signatures()
        for i in (0, 7, 23):
            y = embed(pool[i], model, anchor_sigs)
            assert np.allclose(y, training_proj[i], atol=1e-12)

    def test_equivalent_formulae_share_embedding(self):
        rng = np.random.default_rng(12)
        pool = [generate_formula(GeneratorConfig(n=3), rng) for _ in range(30)]
        model = kernel_pca_fit(gram_matrix(pool, 3), 8)
        y1 = embed(parse("x1", 3), model)
        y2 = embed(parse("x1 & x1", 3), model)
        assert np.allclose(y1, y2, atol=1e-12)

    def test_full_rank_projection_is_isometric(self):
        rng = np.random.default_rng(13)
        pool = [generate_formula(GeneratorConfig(n=5), rng) for _ in range(40)]
        gram = gram_matrix(pool, 5)
        model = kernel_pca_fit(gram, gram.size)
        centered = center_gram(gram.matrix)
        proj = centered @ model.projection
        for i in range(0, 40, 7):
            for j in range(i + 1, 40, 7):
                feat = np.sqrt(max(centered[i, i] + centered[j, j] - 2 * centered[i, j], 0.0))
                got = np.linalg.norm(proj[i] - proj[j])
                if feat > 1e-9:
                    assert abs(got - feat) / feat < 1e-6

    def test_distance_anticorrelates_with_kernel(self):
        rng = np.random.default_rng(14)
        pool = [generate_formula(GeneratorConfig(n=4), rng) for _ in range(60)]
        model = kernel_pca_fit(gram_matrix(pool, 4), 20)
        anchor_sigs = model.anchor_signatures()
        others = [generate_formula(GeneratorConfig(n=4), rng) for _ in range(40)]
        sigs = [signature(f, 4) for f in others]
        ys = [embed_signature(s, model, anchor_sigs) for s in sigs]
        ks, ds = [], []
        for i in range(len(others)):
            for j in range(i + 1, len(others)):
                ks.append(kernel(sigs[i], sigs[j]))
                ds.append(np.linalg.norm(ys[i] - ys[j]))
        rho = np.corrcoef(ks, ds)[0, 1]
        assert rho < -0.5


class TestPersistence:
    def test_gram_roundtrip(self, tmp_path):
        rng = np.random.default_rng(15)
        pool = [generate_formula(GeneratorConfig(n=3), rng) for _ in range(10)]
        gram = gram_matrix(pool, 3)
        save_gram(gram, str(tmp_path / "gram"))
        loaded = load_gram(str(tmp_path / "gram"))
        assert np.array_equal(loaded.matrix, gram.matrix)
        assert loaded.anchors == gram.anchors
        assert loaded.n == 3 and loaded.mode == EXACT

    def test_pca_roundtrip_preserves_embeddings(self, tmp_path):
        rng = np.random.default_rng(16)
        pool = [generate_formula(GeneratorConfig(n=3), rng) for _ in range(15)]
        model = kernel_pca_fit(gram_matrix(pool, 3), 6)
        save_pca(model, str(tmp_path / "pca"))
        loaded = load_pca(str(tmp_path / "pca"))
        probe = parse("x1 | ~x2", 3)
        assert np.array_equal(embed(probe, model), embed(probe, loaded))
        assert np.array_equal(loaded.projection, model.projection)


class TestSemanticPcaEstimator:
    def test_fit_transform(self):
        rng = np.random.default_rng(17)
        pool = [generate_formula(GeneratorConfig(n=3), rng) for _ in range(25)]
        est = SemanticPCA(n_components=5, n_vars=3).fit(pool)
        out = est.transform(pool[:4])
        assert out.shape == (4, 5)
        assert est.explained_variance_ratio_.sum() == pytest.approx(1.0, abs=1e-9)

    def test_accepts_strings_and_signatures(self):
        est = SemanticPCA(n_components=2, n_vars=2).fit(["x1", "x2", "x1 & x2"])
        y_text = est.transform(["~x1"])[0]
        sig = signature(parse("~x1", 2), 2)
        assert np.allclose(est.transform_signature(sig), y_text)

    def test_not_fitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            SemanticPCA().transform(["x1"])

    def test_get_params_roundtrip(self):
        est = SemanticPCA(n_components=7, n_vars=4, mode=MONTE_CARLO, mc_samples=99)
        params = est.get_params()
        clone = SemanticPCA(**params)
        assert clone.n_components == 7 and clone.mc_samples == 99


class TestSignatureValidation:
    def test_exact_length_enforced(self):
        with pytest.raises(ValueError):
            SemanticSignature(np.ones(3, dtype=np.int8), 2, EXACT)


class TestKernelDistanceCsv:
    def test_rows_match_direct_computation(self, tmp_path):
        from propgvae.semantics import export_kernel_distance_csv

        rng = np.random.default_rng(21)
        pool = [generate_formula(GeneratorConfig(n=3), rng) for _ in range(12)]
        model = kernel_pca_fit(gram_matrix(pool, 3), 5)
        path = tmp_path / "pairs.csv"
        probes = pool[:5]
        export_kernel_distance_csv(str(path), probes, model)
        lines = path.read_text().splitlines()
        assert lines[0] == "i,j,kernel,distance"
        assert len(lines) == 1 + 5 * 4 // 2
        i, j, k, d = lines[1].split(",")
        want_k = kernel(signature(probes[0], 3), signature(probes[1], 3))
        want_d = float(np.linalg.norm(embed(probes[0], model) - embed(probes[1], model)))
        assert float(k) == pytest.approx(want_k, abs=1e-15)
        assert float(d) == pytest.approx(want_d, abs=1e-12)
