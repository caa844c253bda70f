import json
import math

import numpy as np
import pytest

import neuronlens as nl


@pytest.fixture(scope="module")
def pipeline():
    spec = nl.CorpusSpec()
    spec.num_concepts = 3
    spec.vocab_size = 12
    spec.seq_len = 6
    spec.samples_per_concept = 30
    spec.separation = 0.9
    spec.seed = 4
    corpus = nl.generate(spec)

    config = nl.ModelConfig()
    config.num_layers = 2
    config.hidden_dim = 8
    config.num_heads = 2
    config.mlp_ratio = 2
    config.vocab_size = 12
    config.max_seq_len = 6
    config.num_classes = 3
    config.epochs = 2
    config.seed = 4
    result = nl.train(corpus, config)
    acts = nl.record_corpus(result.model, corpus.train, [1, 2], nl.Split.train)
    return corpus, result.model, acts


def test_generate_is_deterministic():
    spec = nl.CorpusSpec()
    spec.samples_per_concept = 10
    spec.seed = 9
    a = nl.generate(spec)
    b = nl.generate(spec)
    assert [s.tokens for s in a.train] == [s.tokens for s in b.train]
    assert len(a.train) + len(a.eval) == 40


def test_validation_error_names_field():
    spec = nl.CorpusSpec()
    spec.separation = 1.5
    with pytest.raises(nl.ValidationError, match="separation"):
        spec.validate()


def test_range_and_phi():
    lo, hi = nl.correlated_range(2.0, math.sqrt(2.0 / 3.0), 2.5)
    assert lo == pytest.approx(-0.0412, abs=1e-3)
    assert hi == pytest.approx(4.0412, abs=1e-3)
    assert nl.gaussian_coverage(2.5) == pytest.approx(0.9876, abs=1e-4)
    assert nl.phi_damp(8.0, 0.125) == 1.0
    assert nl.phi_adaptive(1.7, 1.7, 0.4, 0.5) == 0.0
    assert nl.probeless_scores({0: [0.0, 1.0], 1: [1.0, 1.0]}) == [1.0, 0.0]


def test_stats():
    rng = np.random.default_rng(0)
    x = rng.normal(size=5000).tolist()
    assert abs(nl.skewness(x)) < 0.1
    assert nl.kurtosis(x) == pytest.approx(3.0, abs=0.2)
    assert nl.ks_statistic([-1.0, 1.0]) == pytest.approx(0.3413, abs=1e-3)


def test_pipeline_round_trip(pipeline, tmp_path):
    corpus, model, acts = pipeline
    assert acts.layers == [1, 2]
    assert acts.model_checksum == model.checksum()
    m = acts.matrix(2, 0)
    assert m.shape[1] == 8
    path = str(tmp_path / "acts.bin")
    nl.save_activations(acts, path)
    assert nl.load_activations(path) == acts
    mpath = str(tmp_path / "model.bin")
    nl.save_model(model, mpath)
    assert nl.load_model(mpath) == model

    raw = bytearray(open(mpath, "rb").read())
    raw[len(raw) // 2] ^= 0xFF
    open(mpath, "wb").write(bytes(raw))
    with pytest.raises(nl.DataError):
        nl.load_model(mpath)


def test_hook_captures_and_edits(pipeline):
    corpus, model, _ = pipeline
    tokens = corpus.eval[0].tokens
    label, proba, captured = nl.forward_with_hook(model, tokens, 1)
    assert (label, proba) == nl.predict_proba(model, tokens)
    assert len(captured) == 8
    _, edited, again = nl.forward_with_hook(model, tokens, 1, lambda h: [0.0] * len(h))
    assert again == captured
    assert edited != proba


def test_erasure(pipeline):
    corpus, model, acts = pipeline
    ranking = nl.compute_ranking(acts, 1, 0, nl.SaliencyMethod.probeless)
    options = nl.PolicyOptions()
    options.fraction = 0.5
    policy = nl.build_policy(acts, 1, ranking, options)
    assert len(policy.neurons) == 4
    assert nl.InterventionPolicy.from_dict(policy.to_dict()) == policy

    report = nl.erase_and_evaluate(model, corpus.eval, policy)
    for part in ("baseline", "post", "delta"):
        assert set(report[part]) == {"acc", "conf", "cacc", "cconf"}
    base = nl.baseline_metrics(model, corpus.eval)
    assert json.dumps(base)

    sweep = nl.sweep_tau(model, corpus.eval, policy, [0.0, 2.5])
    assert sweep["points"][0]["report"]["delta"]["acc"] == 0.0


def test_eval_split_statistics_are_refused(pipeline):
    corpus, model, _ = pipeline
    eval_acts = nl.record_corpus(model, corpus.eval, [1], nl.Split.eval)
    policy = nl.build_policy(eval_acts, 1, nl.compute_ranking(eval_acts, 1, 0))
    with pytest.raises(nl.ValidationError):
        nl.erase_and_evaluate(model, corpus.eval, policy)
