import pytest

from multiseg.experiments import run_gen_data


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    """16 small (16^3) cases + manifest, shared by trainer/service/CLI tests."""
    out = tmp_path_factory.mktemp("mini_data")
    return run_gen_data(16, (16, 16, 16), seed=11, out_dir=out)


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """The 64-case 32^3 dataset used by the end-to-end acceptance checks."""
    out = tmp_path_factory.mktemp("desk_data")
    return run_gen_data(64, (32, 32, 32), seed=2026, out_dir=out)


def tiny_model_config(**overrides):
    """Small CPC-capable config for fast 16^3 tests."""
    from multiseg.model import ModelConfig

    base = dict(
        base_filters=4,
        levels=3,
        blocks_per_level=(1, 1, 1),
        groupnorm_groups=2,
        input_shape=(16, 16, 16),
        cpc_patch=(8, 8, 8),
        cpc_overlap=(4, 4, 4),
        cpc_negatives=5,
        cpc_context_blocks=2,
    )
    base.update(overrides)
    return ModelConfig(**base)
