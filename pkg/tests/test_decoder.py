import numpy as np
import pytest

from propgvae import autodiff as ad
from propgvae import decoder as dec
from propgvae import encoder as enc
from propgvae.errors import ConfigError
from propgvae.formulas import (
    GeneratorConfig,
    generate_formula,
    node_count,
    parse,
    print_canonical,
)
from propgvae.graphs import AND_ID, END_ID, FIRST_VAR_ID, NOT_ID, START_ID

N = 3


def make(hidden=12, latent=6, n=N, context=0, seed=0):
    cfg = enc.EncoderConfig(cell="gru", hidden_size=hidden, latent_size=latent, n_vars=n)
    params = ad.ModelParams()
    dec.init_decoder_params(params, cfg, context, np.random.default_rng(seed))
    return cfg, params


class TestTeacherTypes:
    def test_preorder_sequence(self):
        f = parse("x1 & ~x2", N)
        assert dec.teacher_types(f, N) == [AND_ID, FIRST_VAR_ID, NOT_ID, FIRST_VAR_ID + 1]

    def test_matches_graph_order(self):
        from propgvae.graphs import to_ast_graph

        rng = np.random.default_rng(0)
        for _ in range(50):
            f = generate_formula(GeneratorConfig(n=N), rng)
            graph_types = list(to_ast_graph(f, N).type_ids[:-1])
            assert dec.teacher_types(f, N) == graph_types


class TestTypeMask:
    def test_constrained_excludes_structural(self):
        state = dec.DecoderState(n_vars=N, max_v=30, constrained=True,
                                 h_graph=ad.const(np.zeros(4)))
        mask = dec.type_mask(state)
        assert not mask[START_ID] and not mask[END_ID]
        assert mask.sum() == N + 3
        assert mask.any()

    def test_ablation_allows_everything(self):
        state = dec.DecoderState(n_vars=N, max_v=30, constrained=False,
                                 h_graph=ad.const(np.zeros(4)))
        mask = dec.type_mask(state)
        assert mask.all() and mask.size == N + 5


class TestTeacherForcing:
    def test_reference_example(self):
        cfg, params = make()
        f = parse("x1 & ~x2", N)
        trace = dec.decode(np.zeros(6), params, cfg, teacher=f)
        assert trace.num_steps == 4
        assert trace.formula == f
        assert not trace.truncated
        assert float(trace.nll.value) >= 0.0

    def test_identity_for_generated_formulae(self):
        cfg, params = make()
        rng = np.random.default_rng(1)
        for _ in range(100):
            f = generate_formula(GeneratorConfig(n=N), rng)
            trace = dec.decode(np.zeros(6), params, cfg, teacher=f)
            assert trace.formula == f
            assert trace.num_steps == node_count(f)

    def test_truncates_when_budget_short(self):
        cfg, params = make()
        f = parse("(x1 & x2) | x3", N)
        trace = dec.decode(np.zeros(6), params, cfg, max_v=2, teacher=f)
        assert trace.truncated and trace.formula is None
        assert trace.num_steps == 2

    def test_perfect_prediction_gives_zero_nll(self):
        # force the type head to put all projection on the teacher's classes
        cfg, params = make()
        f = parse("x1", N)
        bias = params["dec.type.b2"]
        bias.value = np.full_like(bias.value, -1e3)
        bias.value[FIRST_VAR_ID] = 1e3
        trace = dec.decode(np.zeros(6), params, cfg, teacher=f)
        assert float(trace.nll.value) == pytest.approx(0.0, abs=1e-12)


class TestSampling:
    def test_every_output_parses_or_truncates(self):
        cfg, params = make()
        count_valid = count_trunc = 0
        for i in range(300):
            rng = np.random.default_rng(100 + i)
            trace = dec.decode(rng.standard_normal(6), params, cfg, max_v=30,
                               mode=dec.SAMPLE, rng=rng)
            if trace.formula is None:
                assert trace.truncated
                count_trunc += 1
            else:
                assert parse(print_canonical(trace.formula), N) == trace.formula
                count_valid += 1
        assert count_valid > 0

    def test_root_and_with_budget_two_truncates(self):
        cfg, params = make()
        bias = params["dec.type.b2"]
        bias.value = np.full_like(bias.value, -1e3)
        bias.value[AND_ID] = 1e3  # the head always proposes a conjunction
        trace = dec.decode(np.zeros(6), params, cfg, max_v=2, mode=dec.GREEDY)
        assert trace.truncated and trace.formula is None
        assert trace.num_steps == 2

    def test_sample_requires_rng(self):
        cfg, params = make()
        with pytest.raises(ConfigError):
            dec.decode(np.zeros(6), params, cfg, mode=dec.SAMPLE)

    def test_greedy_deterministic(self):
        cfg, params = make(seed=5)
        z = np.random.default_rng(2).standard_normal(6)
        a = dec.decode(z, params, cfg, mode=dec.GREEDY)
        b = dec.decode(z, params, cfg, mode=dec.GREEDY)
        assert [s.chosen for s in a.steps] == [s.chosen for s in b.steps]
        assert a.formula == b.formula
        assert float(a.nll.value) == float(b.nll.value)

    def test_greedy_tie_break_smallest_index(self):
        cfg, params = make()
        for name in ("dec.type.W1", "dec.type.b1", "dec.type.W2", "dec.type.b2"):
            params[name].value = np.zeros_like(params[name].value)
        trace = dec.decode(np.zeros(6), params, cfg, mode=dec.GREEDY)
        # all logits equal: the first allowed class (AND) wins every step,
        # so the decode runs out of budget on an all-conjunction tree
        assert trace.steps[0].chosen == AND_ID
        assert trace.truncated

    def test_nll_matches_chosen_probabilities(self):
        cfg, params = make(seed=3)
        rng = np.random.default_rng(4)
        trace = dec.decode(rng.standard_normal(6), params, cfg, mode=dec.SAMPLE, rng=rng)
        manual = -sum(np.log(step.probs[step.chosen]) for step in trace.steps)
        assert float(trace.nll.value) == pytest.approx(manual, rel=1e-12)


class TestAblation:
    def test_unconstrained_can_fail_to_parse(self):
        cfg, params = make()
        invalid = valid = 0
        for i in range(200):
            rng = np.random.default_rng(500 + i)
            trace = dec.decode(rng.standard_normal(6), params, cfg, max_v=30,
                               mode=dec.SAMPLE, rng=rng, constrained=False)
            if trace.formula is None:
                invalid += 1
            else:
                valid += 1
        assert invalid > 0  # parse-failure rate strictly positive

    def test_unconstrained_distribution_covers_structural_types(self):
        cfg, params = make()
        state_probs = None
        rng = np.random.default_rng(9)
        trace = dec.decode(rng.standard_normal(6), params, cfg, max_v=5,
                           mode=dec.SAMPLE, rng=rng, constrained=False)
        state_probs = trace.steps[0].probs
        assert state_probs.size == N + 5
        assert state_probs[START_ID] > 0 and state_probs[END_ID] > 0

    def test_wellformed_emission_round_trips(self):
        cfg, params = make()
        # bias the head to emit x1 then END: "x1" parses
        bias = params["dec.type.b2"]
        bias.value = np.full_like(bias.value, -1e3)
        bias.value[FIRST_VAR_ID] = 1e3
        first = dec.decode(np.zeros(6), params, cfg, max_v=4, mode=dec.GREEDY,
                           constrained=False)
        assert first.formula is None  # never emits END, runs out of budget
        assert first.truncated


class TestContext:
    def test_conditioned_decode_shapes(self):
        cfg, params = make(context=4)
        y = np.random.default_rng(5).standard_normal(4)
        trace = dec.decode(np.zeros(6), params, cfg, y=y,
                           teacher=parse("x1 | x2", N))
        assert trace.formula == parse("x1 | x2", N)

    def test_context_changes_distribution(self):
        cfg, params = make(context=4, seed=7)
        t1 = dec.decode(np.zeros(6), params, cfg, y=np.zeros(4), mode=dec.GREEDY)
        t2 = dec.decode(np.zeros(6), params, cfg, y=np.ones(4), mode=dec.GREEDY)
        assert not np.array_equal(t1.steps[0].probs, t2.steps[0].probs)


class TestDecoderGradients:
    def test_teacher_nll_gradients(self):
        cfg, params = make(hidden=6, latent=4, n=2)
        f = parse("x1 & ~x2", 2)
        z = np.random.default_rng(8).standard_normal(4)

        def fn():
            return dec.decode(z, params, cfg, teacher=f).nll

        report = ad.grad_check(fn, params, max_coords=120, seed=11)
        assert report.max_rel_err < 1e-4
