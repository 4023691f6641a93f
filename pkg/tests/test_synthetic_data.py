import numpy as np
import pandas as pd
import pytest

import manifests
import storage_io
from errors import ContractError
from synthetic_data import (
    channel_basis, eval_set, generate_corpus, make_speakers, make_trials, mixing_map, oracle_eer, split_enrollment,
    synthesize,
)


def test_corpus_shapes_and_ids(small_synth):
    corpus = synthesize(small_synth)
    assert len(corpus.train) == 6 * 8 and len(corpus.heldout) == 4 * 8
    assert corpus.train[0].utterance_id == "spk0000_u000"
    assert corpus.heldout[0].speaker_id == "spk0006"
    assert corpus.train[0].features.values.shape == (12, 4)
    assert not {u.speaker_id for u in corpus.train} & {u.speaker_id for u in corpus.heldout}


def test_corpus_is_a_pure_function_of_the_config(small_synth):
    a, b = synthesize(small_synth), synthesize(small_synth)
    for u, v in zip(a.train + a.heldout, b.train + b.heldout):
        assert u.utterance_id == v.utterance_id
        np.testing.assert_array_equal(u.features.values, v.features.values)
    c = synthesize(small_synth.model_copy(update={"seed": 4}))
    assert not np.array_equal(a.train[0].features.values, c.train[0].features.values)


def test_adding_speakers_keeps_existing_utterances(small_synth):
    a = synthesize(small_synth)
    b = synthesize(small_synth.model_copy(update={"heldout_speakers": 6}))
    np.testing.assert_array_equal(a.heldout[-1].features.values, b.heldout[len(a.heldout) - 1].features.values)


def test_latents_are_unit_vectors(small_synth):
    for spk in make_speakers(small_synth).values():
        assert np.linalg.norm(spk.latent) == pytest.approx(1.0, abs=1e-12)


def test_noise_free_utterances_of_a_speaker_are_identical(small_synth):
    corpus = synthesize(small_synth.model_copy(update={"noise_level": 0.0}))
    first, second = corpus.train[0], corpus.train[1]
    assert first.speaker_id == second.speaker_id
    np.testing.assert_array_equal(first.features.values, second.features.values)


def test_enrollment_split_and_trials(small_synth):
    corpus = synthesize(small_synth)
    enrollment = split_enrollment(small_synth, corpus.heldout)
    assert all(len(ids) == 3 for ids in enrollment.values())
    trials = make_trials(small_synth, corpus.heldout)
    assert list(trials.columns) == manifests.TRIAL_COLUMNS
    # 5 test utterances per speaker, each with one target and two impostor claims
    assert len(trials) == 4 * 5 * 3
    assert (trials["label"] == "target").sum() == 4 * 5
    enrolled = {u for ids in enrollment.values() for u in ids}
    assert not enrolled & set(trials["test_id"])
    for t in trials.itertuples():
        assert (t.test_id.startswith(t.claimed_speaker)) == (t.label == "target")


def test_enrollment_must_leave_test_utterances(small_synth):
    cfg = small_synth.model_copy(update={"enroll_per_speaker": 8})
    with pytest.raises(ContractError):
        split_enrollment(cfg, synthesize(cfg).heldout)


def test_oracle_is_perfect_without_noise(small_synth):
    cfg = small_synth.model_copy(update={"noise_level": 0.0})
    trials = make_trials(cfg, synthesize(cfg).heldout)
    assert oracle_eer(cfg, trials) == 0.0


def test_oracle_rejects_unknown_speaker(small_synth):
    trials = pd.DataFrame([("t0", "spk9999_u000", "spk0006", "target"), ("t1", "spk0006_u004", "spk0007", "nontarget")],
                          columns=manifests.TRIAL_COLUMNS)
    with pytest.raises(ContractError):
        oracle_eer(small_synth, trials)


def test_eval_set_matches_written_corpus(small_synth, tmp_path):
    paths = generate_corpus(small_synth, tmp_path)
    assert set(paths) == {"train", "heldout", "enroll", "test", "trials", "cohort"}
    es = eval_set(synthesize(small_synth))
    pd.testing.assert_frame_equal(manifests.read_trials(paths["trials"]), es.trials.astype(str))
    test_df = manifests.read_manifest(paths["test"])
    row = test_df.iloc[0]
    np.testing.assert_allclose(storage_io.read_features(row.path).values, es.features[row.utterance_id].values,
                               rtol=1e-6, atol=1e-6)
    # feature paths are stored relative to the corpus directory
    assert not (tmp_path / "train.tsv").read_text().split("\n")[0].split("\t")[2].startswith("/")
    cohort = manifests.read_manifest(paths["cohort"])
    assert sorted(set(cohort["speaker_id"])) == sorted(es.cohort)


def test_channel_offset_is_constant_and_invisible_to_the_mixing_map(small_synth):
    with_channel = synthesize(small_synth.model_copy(update={"channel_gain": 5.0}))
    white_only = synthesize(small_synth.model_copy(update={"channel_gain": 0.0}))
    A = mixing_map(small_synth)
    for u, v in zip(with_channel.train[:5], white_only.train[:5]):
        offset = u.features.values - v.features.values
        np.testing.assert_allclose(offset, np.broadcast_to(offset[0], offset.shape), atol=1e-12)
        np.testing.assert_allclose(A.T @ offset[0], 0.0, atol=1e-12)
        assert np.linalg.norm(offset[0]) > 0


def test_channel_offset_changes_between_utterances(small_synth):
    corpus = synthesize(small_synth)
    basis = channel_basis(small_synth)
    assert basis.shape == (4, 1)
    np.testing.assert_allclose(basis.T @ basis, np.eye(1), atol=1e-12)
    first, second = corpus.train[0].features.values, corpus.train[1].features.values
    assert not np.allclose(basis.T @ first.mean(axis=0), basis.T @ second.mean(axis=0))


def test_cohort_speakers_are_outside_train_and_evaluation(small_synth):
    corpus = synthesize(small_synth)
    cohort_speakers = {u.speaker_id for u in corpus.cohort}
    assert cohort_speakers == {f"spk{i:04d}" for i in range(10, 15)}
    assert len(corpus.cohort) == 5 * 3
    others = {u.speaker_id for u in corpus.train + corpus.heldout}
    assert not cohort_speakers & others
    es = eval_set(corpus)
    assert set(es.cohort) == cohort_speakers
    assert not cohort_speakers & set(es.trials["claimed_speaker"])
    assert all(u in es.features for ids in es.cohort.values() for u in ids)


def test_cohort_can_be_switched_off(small_synth, tmp_path):
    cfg = small_synth.model_copy(update={"cohort_speakers": 0})
    assert synthesize(cfg).cohort == []
    assert "cohort" not in generate_corpus(cfg, tmp_path)
