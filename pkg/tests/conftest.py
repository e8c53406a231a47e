import pytest
import torch

_CRITERIA = {}


@pytest.fixture
def record_criterion():
    """Store a one-line verdict for an acceptance criterion; printed at session end.

    A verdict of None marks an informational line.
    """

    def record(number, passed, detail):
        _CRITERIA[number] = (None if passed is None else bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        verdict = "INFO" if passed is None else "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {detail}")


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


TINY_MODEL = dict(d=16, encoder_layers=1, decoder_layers=1, attention_heads=2,
                  max_source_len=32, max_target_len=40, dropout=0.0)


@pytest.fixture(scope="session")
def small_tree():
    """A 60-frame three-language tree corpus split into train/validation/test, with vocabs."""
    from minotaur.data import GeneratorConfig, build_vocab, generate_synthetic, split_corpus

    cfg = GeneratorConfig(task="tree", num_frames=60, seed=0)
    corpus, _ = generate_synthetic(cfg)
    splits = split_corpus(corpus, cfg.split, 0)
    return splits, build_vocab(splits["train"])
