import numpy as np
import pytest

from settings import NetworkConfig, SynthConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dnn():
    # 4x3 input grid, 2x3 patches -> 2 patches of 2 units, then 5 -> 5 hidden
    return NetworkConfig(network="dnn", feature_dim=3, window_frames=4, patch_frames=2, patch_dims=3,
                         lc_units=2, hidden_layers=3, hidden_width=5)


@pytest.fixture
def tiny_frame_dnn():
    return NetworkConfig(network="frame_dnn", feature_dim=3, window_frames=4, patch_dims=3, context_frames=1,
                         lc_units=2, hidden_layers=2, hidden_width=4)


@pytest.fixture
def tiny_lstm():
    return NetworkConfig(network="lstm", feature_dim=3, window_frames=4, lstm_hidden=3)


@pytest.fixture
def small_synth():
    return SynthConfig(train_speakers=6, heldout_speakers=4, utterances_per_speaker=8, frames=12, dims=4,
                       latent_dim=3, noise_level=0.1, seed=3, enroll_per_speaker=3, nontargets_per_test=2,
                       cohort_speakers=5)
