import socket

import pytest
import torch

from kbcmlm.tokenizer import VocabEntry, Vocabulary, add_entity_atoms, build_base_vocab

torch.set_num_threads(1)

NETWORK_ATTEMPTS = []


def _refuse(*args, **kwargs):
    NETWORK_ATTEMPTS.append(args)
    raise OSError("network disabled in tests")


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    monkeypatch.setattr(socket.socket, "connect", _refuse)
    monkeypatch.setattr(socket.socket, "connect_ex", _refuse)
    monkeypatch.setattr(socket, "create_connection", _refuse)
    monkeypatch.setattr(socket, "getaddrinfo", _refuse)
    yield


FIXTURE_CORPUS = [
    "Canada borders Greenland.",
    "Canada shares borders with the United States of America.",
    "The United States of America borders Canada and Mexico.",
    "Greenland is a large island in the north.",
    "Mexico borders the United States.",
    "People in Canada speak English and French.",
    "The official language of Mexico is Spanish.",
]


@pytest.fixture(scope="session")
def base_vocab():
    return build_base_vocab(FIXTURE_CORPUS, 45)


@pytest.fixture(scope="session")
def fixture_vocab(base_vocab):
    result = add_entity_atoms(
        base_vocab,
        [
            ("United States of America", "Country", "Q30"),
            ("United States", "Country", None),
            ("Greenland", "Country", "Q223"),
            ("Canada", "Country", "Q16"),
            ("Mexico", "Country", "Q96"),
            ("Spanish", "Language", "Q1321"),
        ],
    )
    assert not result.rejected
    return result.vocab


def tiny_vocab(n_base: int = 7) -> Vocabulary:
    """Specials plus single-letter base tokens a, b, c, ..."""
    letters = "abcdefghijklmnopqrstuvwxyz"[:n_base]
    return Vocabulary([VocabEntry(s) for s in ("[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]")] + [VocabEntry(c) for c in letters])


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    if 9 in ACCEPTANCE:
        # hermeticity covers every test in the session, not just the kg check
        ok = "PASS" in ACCEPTANCE[9] and not NETWORK_ATTEMPTS
        record_criterion(9, ok, f"kg fixture mode made 0 requests; {len(NETWORK_ATTEMPTS)} socket attempts in the whole session")
    terminalreporter.section("acceptance")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])


def pytest_sessionfinish(session, exitstatus):
    if NETWORK_ATTEMPTS and exitstatus == 0:
        session.exitstatus = 1
