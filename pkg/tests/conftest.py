import pytest

from fundusvl.data import SyntheticConfig, make_synthetic_corpus
from fundusvl.training import TrainConfig, build_model, fit, load_checkpoint


def tiny_train_config(**overrides) -> TrainConfig:
    """Desk-scale training config used throughout the tests."""
    base = dict(
        batch_size=8,
        epochs=1,
        lr=1e-3,
        weight_decay=1e-5,
        alpha=100.0,
        seed=0,
        encoder="tiny",
        embed_dim=16,
        heads=2,
        image_size=32,
        text_len=16,
        vocab_size=512,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def toy_corpora():
    config = SyntheticConfig(num_categories=2, samples_per_category=16, seed=11, noise_level=0.05)
    return make_synthetic_corpus(config)


@pytest.fixture(scope="session")
def toy_checkpoint(tmp_path_factory, toy_corpora):
    """A short but real pretraining run, shared by evaluation tests."""
    expert, public = toy_corpora
    config = tiny_train_config(epochs=25)
    out = tmp_path_factory.mktemp("toy-run")
    return fit(expert, public, config, out)


@pytest.fixture(scope="session")
def toy_model(toy_checkpoint):
    model, _ = load_checkpoint(toy_checkpoint)
    model.eval()
    return model


@pytest.fixture
def fresh_tiny_model():
    return build_model(tiny_train_config())
