import pytest

from rcctrainer.fixtures import FixtureSpec, TextureParams


def two_class_spec(seed=0, patch_size=32, count=100):
    """Two texture families separable in color and frequency."""
    return FixtureSpec(
        seed=seed,
        patch_size=patch_size,
        textures={
            "stroma": TextureParams(color=(200, 120, 160), noise=15),
            "tumor": TextureParams(color=(120, 60, 140), noise=15, stripe_period=8),
        },
        counts={"stroma": count, "tumor": count},
    )


@pytest.fixture(scope="session")
def trained_export(tmp_path_factory):
    """One shared trained model: (dataset_dir, summary dict)."""
    from rcctrainer.fixtures import generate_fixtures
    from rcctrainer.train import train_and_export

    root = tmp_path_factory.mktemp("trained")
    dataset = generate_fixtures(two_class_spec(), root / "data")
    summary = train_and_export(dataset, "tumor2", root / "model.npz", seed=1)
    return dataset, summary
