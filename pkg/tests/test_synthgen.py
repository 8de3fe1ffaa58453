import numpy as np
import pytest

from repspace import feature_store as fs
from repspace import synthgen
from repspace.synthgen import NestedFamilySpec, RepGenSpec, SyntheticResponseSpec


def family(seed=0, total=4, token_count=2000, reps=None):
    if reps is None:
        reps = [RepGenSpec("a", 2, 6, 0.0), RepGenSpec("b", 4, 8, 0.0)]
    return NestedFamilySpec(seed=seed, total_latents=total,
                            token_count=token_count, reps=tuple(reps))


def lstsq_residual_per_dim(x, y):
    """Independent oracle: empirical least-squares residual, mean per target dim."""
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    coef, *_ = np.linalg.lstsq(xc, yc, rcond=None)
    resid = yc - xc @ coef
    return (resid**2).mean()


class TestGenNestedReps:
    def test_equal_visibility_reps_are_linear_images(self):
        spec = family(reps=[RepGenSpec("a", 3, 6, 0.0), RepGenSpec("b", 3, 7, 0.0)],
                      token_count=5000)
        ba, bb = synthgen.gen_nested_reps(spec)
        assert lstsq_residual_per_dim(ba.values, bb.values) < 1e-20
        assert lstsq_residual_per_dim(bb.values, ba.values) < 1e-20

    def test_nested_transfer_is_one_sided(self):
        spec = family(token_count=8000)
        ba, bb = synthgen.gen_nested_reps(spec)
        # superset -> subset is lossless
        assert lstsq_residual_per_dim(bb.values, ba.values) < 1e-20
        # subset -> superset leaves the hidden latents' mixed variance
        empirical = lstsq_residual_per_dim(ba.values, bb.values)
        oracle = synthgen.oracle_transfer_mse(spec, "a", "b")
        assert oracle > 0
        assert abs(empirical - oracle) / oracle < 0.1

    def test_determinism(self):
        one = synthgen.gen_nested_reps(family())
        two = synthgen.gen_nested_reps(family())
        for x, y in zip(one, two):
            np.testing.assert_array_equal(x.values, y.values)

    def test_noise_streams_are_independent_of_latents(self):
        clean = synthgen.gen_nested_reps(family())
        noisy = synthgen.gen_nested_reps(
            family(reps=[RepGenSpec("a", 2, 6, 0.5), RepGenSpec("b", 4, 8, 0.0)]))
        # adding noise to one rep leaves the other untouched
        np.testing.assert_array_equal(clean[1].values, noisy[1].values)
        assert not np.array_equal(clean[0].values, noisy[0].values)

    def test_invalid_visibility_rejected(self):
        with pytest.raises(ValueError):
            family(reps=[RepGenSpec("a", 9, 9, 0.0)])

    def test_output_dim_below_visibility_rejected(self):
        with pytest.raises(ValueError):
            family(reps=[RepGenSpec("a", 3, 2, 0.0)])


class TestOracle:
    def test_self_transfer_zero(self):
        spec = family()
        assert synthgen.oracle_transfer_mse(spec, "a", "a") < 1e-12
        assert synthgen.oracle_transfer_mse(spec, "b", "b") < 1e-12

    def test_containment_zero(self):
        spec = family()
        assert synthgen.oracle_transfer_mse(spec, "b", "a") < 1e-12

    def test_hidden_latent_residual_matches_projector_formula(self):
        spec = family()
        # independent derivation: residual is the trace of the target mixing
        # restricted to hidden latents (orthonormal columns, unit-variance z)
        a_tgt = synthgen._mixing_matrix(spec, spec.rep("b"))
        hidden = a_tgt[:, 2:]
        expected = float(np.trace(hidden @ hidden.T)) / 8
        got = synthgen.oracle_transfer_mse(spec, "a", "b")
        assert got == pytest.approx(expected, rel=1e-12)

    def test_monotonicity_iff_containment(self):
        reps = [RepGenSpec(f"r{k}", k, 10, 0.0) for k in (1, 2, 3, 4)]
        spec = family(reps=reps, total=4)
        for i, ri in enumerate(reps):
            for j, rj in enumerate(reps):
                value = synthgen.oracle_transfer_mse(spec, ri.id, rj.id)
                if ri.visible_latents >= rj.visible_latents:
                    assert value < 1e-12
                else:
                    assert value > 1e-3

    def test_unknown_rep(self):
        with pytest.raises(KeyError):
            synthgen.oracle_transfer_mse(family(), "a", "nope")


def chain_corpus(train_tokens, test_tokens):
    return fs.TokenCorpus([
        fs.Story("train-a", tuple(f"t{i}" for i in range(train_tokens)), "train"),
        fs.Story("test-a", tuple(f"t{i}" for i in range(test_tokens)), "test"),
    ])


class TestSyntheticResponses:
    def test_noiseless_identity_single_delay(self):
        spec = family(reps=[RepGenSpec("a", 2, 3, 0.0)], token_count=400)
        bundle = synthgen.gen_nested_reps(spec)[0]
        corpus = chain_corpus(320, 80)
        rspec = SyntheticResponseSpec(
            seed=1, source_rep="a", channels=3, delays=(1,),
            noise_sd=0.0, true_weights=np.eye(3),
        )
        result = synthgen.gen_synthetic_responses(rspec, bundle, corpus)
        from repspace import encoding
        design = encoding.build_design(bundle, corpus, tr_seconds=rspec.tr_seconds,
                                       delays=(1,), words_per_tr=rspec.words_per_tr)
        np.testing.assert_array_equal(result.response.responses, design.matrix)

    def test_noiseless_responses_equal_signal(self):
        spec = family(token_count=600)
        bundle = synthgen.gen_nested_reps(spec)[1]
        corpus = chain_corpus(480, 120)
        rspec = SyntheticResponseSpec(seed=2, source_rep="b", channels=5, noise_sd=0.0)
        result = synthgen.gen_synthetic_responses(rspec, bundle, corpus)
        np.testing.assert_array_equal(result.response.responses, result.signal)

    def test_matched_noise_attenuation_monte_carlo(self):
        # analytic attenuation at equal signal/noise power is 1/sqrt(2);
        # verify by direct Monte Carlo over many seeded channels
        rng = np.random.default_rng(0)
        rhos = []
        for _ in range(150):
            signal = rng.standard_normal(240)
            noisy = signal + signal.std() * rng.standard_normal(240)
            rhos.append(np.corrcoef(signal, noisy)[0, 1])
        assert np.mean(rhos) == pytest.approx(1 / np.sqrt(2), abs=0.02)

    def test_snr_mode_sets_per_channel_noise(self):
        spec = family(token_count=600)
        bundle = synthgen.gen_nested_reps(spec)[1]
        corpus = chain_corpus(480, 120)
        rspec = SyntheticResponseSpec(seed=3, source_rep="b", channels=4,
                                      noise_sd=None, noise_snr=1.0)
        result = synthgen.gen_synthetic_responses(rspec, bundle, corpus)
        np.testing.assert_allclose(result.noise_sd_per_channel,
                                   result.signal.std(axis=0))

    def test_determinism(self):
        spec = family(token_count=600)
        bundle = synthgen.gen_nested_reps(spec)[0]
        corpus = chain_corpus(480, 120)
        rspec = SyntheticResponseSpec(seed=4, source_rep="a", channels=2, noise_sd=0.3)
        one = synthgen.gen_synthetic_responses(rspec, bundle, corpus)
        two = synthgen.gen_synthetic_responses(rspec, bundle, corpus)
        np.testing.assert_array_equal(one.response.responses, two.response.responses)

    def test_unaligned_source_rejected(self):
        spec = family(token_count=600)
        bundle = synthgen.gen_nested_reps(spec)[0]
        with pytest.raises(ValueError):
            synthgen.gen_synthetic_responses(
                SyntheticResponseSpec(seed=0, source_rep="a", channels=1, noise_sd=0.0),
                bundle, chain_corpus(100, 20),
            )

    def test_delay_beyond_story_rejected(self):
        spec = family(token_count=24)
        bundle = synthgen.gen_nested_reps(spec)[0]
        corpus = chain_corpus(16, 8)  # test story spans only 2 TRs at 4 words/TR
        with pytest.raises(ValueError, match="delay"):
            synthgen.gen_synthetic_responses(
                SyntheticResponseSpec(seed=0, source_rep="a", channels=1,
                                      noise_sd=0.0, delays=(1, 2, 3, 4)),
                bundle, corpus,
            )

    def test_noise_mode_exclusivity(self):
        with pytest.raises(ValueError):
            SyntheticResponseSpec(seed=0, source_rep="a", channels=1,
                                  noise_sd=0.1, noise_snr=1.0)


def test_trained_decoders_converge_to_oracle_under_noise():
    # consistency invariant at T >= 5000, noise 0.1: every trained decoder's
    # held-out error lands within 10% of the analytic transfer residual.
    # The universal bundle stays clean: the oracle models source and target
    # noise as independent draws, while a noisy universal's own latent would
    # see (and partially reproduce) its private noise.
    from repspace import transfer

    reps = [RepGenSpec("a", 2, 20, 0.08), RepGenSpec("b", 4, 40, 0.08),
            RepGenSpec("u", 6, 60, 0.0)]
    spec = NestedFamilySpec(seed=31, total_latents=6, token_count=5000,
                            reps=tuple(reps))
    bundles = synthgen.gen_nested_reps(spec)
    corpus = fs.TokenCorpus([
        fs.Story("tr0", tuple(f"t{i}" for i in range(3000)), "train"),
        fs.Story("tr1", tuple(f"t{i}" for i in range(500)), "train"),
        fs.Story("te", tuple(f"t{i}" for i in range(1500)), "test"),
    ])
    ds = fs.align(corpus, bundles, "u")
    cfg = transfer.TrainConfig(latent_dim=20, batch_size=1024, lr_encoder=0.1,
                               lr_decoder=0.5, max_batches=2500, patience=200,
                               seed=13)
    latents = {}
    for rep in ds.rep_ids:
        encoder, _ = transfer.train_encoder(ds, rep, cfg)
        latents[rep] = transfer.encode(encoder, ds)
    _, test_rows = fs.split(ds)
    for src in ds.rep_ids:
        for tgt in ds.rep_ids:
            decoder = transfer.train_decoder(latents[src], ds.bundle(tgt),
                                             corpus, cfg)
            mse = transfer.decoder_sample_mse(
                decoder, latents[src].values[test_rows],
                ds.bundle(tgt).values[test_rows]).mean()
            oracle = synthgen.oracle_transfer_mse(spec, src, tgt)
            assert abs(mse - oracle) <= max(0.1 * oracle, 1e-3), (
                f"{src}->{tgt}: trained {mse:.5f} vs oracle {oracle:.5f}")
