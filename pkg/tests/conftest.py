import pytest

from fbchain.checkpoint import save_checkpoint
from fbchain.datasets import synth_dataset
from fbchain.network import build_model
from fbchain.training import AugmentConfig, TrainConfig, train
from helpers import micro_config

# filled by tests/test_acceptance.py, printed after the run
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def overfit(tmp_path_factory):
    """Micro model trained to memorise 8 fixed synthetic samples."""
    out = tmp_path_factory.mktemp("overfit")
    samples = synth_dataset(8, 16, seed=123)
    model = build_model(micro_config())
    cfg = TrainConfig(learning_rate=1e-2, epochs=200, batch_size=8,
                      augment=AugmentConfig.disabled(), track_train_metrics=True)
    _, history = train(model, samples, [], cfg)
    path = out / "overfit.ckpt"
    from fbchain.checkpoint import Checkpoint

    save_checkpoint(Checkpoint.from_model(model, epoch=cfg.epochs), path)
    return model, samples, path, history


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
