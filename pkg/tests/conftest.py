import pytest

from gfslt.config import TrainConfig
from gfslt.corpus import generate_corpus

# a model and corpus small enough for a training step to take milliseconds
TINY = TrainConfig(
    vocab_size_gestures=6, sentence_len_min=1, sentence_len_max=3, frame_height=12,
    frame_width=12, path_length=3.0, n_train=12, n_dev=4, n_test=4,
    d_model=16, d_proj=8, heads=2, d_ff=32, enc_layers=1, text_enc_layers=1, dec_layers=1,
    cnn_channels="4,4,8", pretrain_epochs=2, pretrain_batch=4, finetune_epochs=2,
    finetune_batch=4, beam_size=2, aug_stage1="strong", aug_stage2="strong",
)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(TINY.corpus_config())


# acceptance verdict lines, echoed again after the run so they survive output capture
VERDICTS: list[str] = []
ABLATION_TABLE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ABLATION_TABLE:
        terminalreporter.section("ablation (dev, x100, seed mean)")
        for line in ABLATION_TABLE:
            terminalreporter.write_line(line)
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
