from collections import Counter

import numpy as np
import pytest

from ethphish import ingest, synthetic
from ethphish.ingest import TxCategory
from ethphish.synthetic import SyntheticConfig


@pytest.fixture(scope="module")
def data():
    return synthetic.generate(SyntheticConfig(n_benign=60, n_collectors=5, victims_per_collector=6, seed=4))


def test_labels_cover_accounts(data):
    assert len(data.node_labels) == 65 and sum(data.node_labels.values()) == 5
    assert {a for a, y in data.node_labels.items() if y} == set(data.collectors)
    assert set(data.tx_labels) == {tx.tx_hash for tx in data.transactions}
    ts = [tx.timestamp for tx in data.transactions]
    assert ts == sorted(ts)


def test_planted_burst_and_launder_chain(data):
    mixer = next(a for a, cat, _ in data.entities if cat == "Mixer")
    cfg = SyntheticConfig()
    for c in data.collectors:
        inflow = [tx for tx in data.transactions if tx.to_addr == c]
        assert len({tx.from_addr for tx in inflow}) == 6
        assert all(data.tx_labels[tx.tx_hash] == 1 for tx in inflow)
        times = [tx.timestamp for tx in inflow]
        assert max(times) - min(times) <= cfg.burst_window
        # follow the chain hop by hop to the mixer
        addr, hops = c, 0
        while addr != mixer:
            out = [tx for tx in data.transactions if tx.from_addr == addr]
            assert out and len({tx.to_addr for tx in out}) == 1
            assert all(data.tx_labels[tx.tx_hash] == 1 for tx in out)
            addr, hops = out[0].to_addr, hops + 1
        assert hops == cfg.launder_depth


def test_token_mix_and_validity(data):
    cats = Counter(tx.tx_category for tx in data.transactions)
    assert cats[TxCategory.EtherTransfer] > cats[TxCategory.FtTransfer] > cats[TxCategory.NftTransfer] > 0
    assert cats[TxCategory.ContractInteraction] > 0
    kept = ingest.filter_and_categorize(data.transactions)
    assert len(kept) > 0.9 * len(data.transactions)


def test_deterministic_and_roundtrip(data, tmp_path):
    again = synthetic.generate(SyntheticConfig(n_benign=60, n_collectors=5, victims_per_collector=6, seed=4))
    assert again.transactions == data.transactions and again.tx_labels == data.tx_labels
    other = synthetic.generate(SyntheticConfig(n_benign=60, n_collectors=5, victims_per_collector=6, seed=5))
    assert other.transactions != data.transactions
    data.write(tmp_path)
    assert ingest.parse_log(tmp_path / "transactions.jsonl") == data.transactions
    assert synthetic.read_labels(tmp_path / "node_labels.csv") == data.node_labels


def test_config_validation():
    for bad in (dict(n_collectors=0), dict(burst_window=0), dict(late_fraction=2.0), dict(token_mix=(1, 0))):
        with pytest.raises(ValueError):
            SyntheticConfig(**bad)
