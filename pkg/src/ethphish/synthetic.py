"""Synthetic Ethereum-like ledgers with planted phishing collectors.

Benign accounts trade among themselves, with contracts and with an exchange
over the whole horizon. Each collector receives a burst of transfers from
victim accounts inside a short window and quickly funnels the proceeds down
a chain of launderer addresses into a mixer.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .ingest import (RawTransaction, TxCategory, TokenStandard, AccountKind, write_log)

T0 = 1_600_000_000
DAY = 86_400


@dataclass
class SyntheticConfig:
    n_benign: int = 200
    n_collectors: int = 20
    victims_per_collector: int = 8
    burst_window: float = 3600.0
    launder_depth: int = 3
    days: float = 60.0
    benign_tx_mean: float = 8.0
    ca_fraction: float = 0.1
    late_fraction: float = 0.5            # benign accounts that first appear after day 0
    token_mix: tuple = (0.6, 0.3, 0.1)    # ether, fungible, non-fungible
    seed: int = 0

    def __post_init__(self):
        if min(self.n_benign, self.n_collectors) < 1 or self.launder_depth < 1:
            raise ValueError("need at least one benign account, collector and launder hop")
        if self.victims_per_collector < 1 or self.burst_window <= 0 or self.days <= 0:
            raise ValueError("victims_per_collector, burst_window and days must be positive")
        if not 0.0 <= self.late_fraction <= 1.0:
            raise ValueError("late_fraction must lie in [0, 1]")
        if len(self.token_mix) != 3 or min(self.token_mix) < 0 or sum(self.token_mix) <= 0:
            raise ValueError("token_mix needs three non-negative weights")


@dataclass
class SyntheticData:
    transactions: list
    node_labels: dict                  # address -> 0/1 (benign accounts and collectors)
    tx_labels: dict                    # tx_hash -> 0/1
    entities: list = field(default_factory=list)    # (address, category, name)
    collectors: list = field(default_factory=list)

    def write(self, out_dir):
        from pathlib import Path
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_log(out / "transactions.jsonl", self.transactions)
        write_labels(out / "node_labels.csv", "address", self.node_labels)
        write_labels(out / "tx_labels.csv", "tx_hash", self.tx_labels)
        with open(out / "entities.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["address", "category", "name"])
            w.writerows(self.entities)
        return out


def write_labels(path, key, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([key, "label"])
        for k, v in labels.items():
            w.writerow([k, int(v)])


def read_labels(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return {}
    return {r[0].lower(): int(r[1]) for r in rows[1:] if r}


def generate(cfg=None):
    cfg = cfg or SyntheticConfig()
    rng = np.random.default_rng(cfg.seed)
    used = set()

    def address():
        while True:
            a = "0x" + rng.bytes(20).hex()
            if a not in used:
                used.add(a)
                return a

    benign = [address() for _ in range(cfg.n_benign)]
    # account birth times; late joiners only transact after they appear
    join = {a: (rng.uniform(0, 0.9 * cfg.days * DAY) if rng.random() < cfg.late_fraction else 0.0)
            for a in benign}
    benign_kind = {a: (AccountKind.CA if rng.random() < cfg.ca_fraction else AccountKind.EOA)
                   for a in benign}
    collectors = [address() for _ in range(cfg.n_collectors)]
    mixer, exchange, dex = address(), address(), address()
    kinds = dict(benign_kind)
    kinds.update({c: AccountKind.EOA for c in collectors})
    kinds.update({mixer: AccountKind.CA, exchange: AccountKind.EOA, dex: AccountKind.CA})
    tokens = ["USDT", "DAI", "LINK"]
    nfts = ["PUNK", "APE"]
    mix = np.asarray(cfg.token_mix, dtype=float) / np.sum(cfg.token_mix)
    horizon = cfg.days * DAY
    rows = []  # (timestamp, from, to, value, gas, category, standard, symbol, token_id, label)

    def transfer(ts, a, b, label, asset=None, value=None, gas=None):
        asset = asset if asset is not None else int(rng.choice(3, p=mix))
        if asset == 0:
            value = value if value is not None else float(np.round(rng.lognormal(-1.0, 1.2), 6))
            rec = (TxCategory.EtherTransfer, TokenStandard.NONE, None, None)
        elif asset == 1:
            value = value if value is not None else float(np.round(rng.lognormal(4.0, 1.5), 4))
            rec = (TxCategory.FtTransfer, TokenStandard.ERC20, tokens[rng.integers(len(tokens))], None)
        else:
            value = 1.0
            std = TokenStandard.ERC721 if rng.random() < 0.7 else TokenStandard.ERC1155
            rec = (TxCategory.NftTransfer, std, nfts[rng.integers(len(nfts))], int(rng.integers(1, 10_000)))
        gas = gas if gas is not None else float(rng.integers(21_000, 120_000))
        rows.append((int(ts), a, b, max(value, 1e-6), gas) + rec + (label,))
        return rec, value

    # benign background activity
    for a in benign:
        for _ in range(max(1, rng.poisson(cfg.benign_tx_mean))):
            ts = T0 + rng.uniform(join[a], horizon)
            u = rng.random()
            if u < 0.15:
                transfer(ts, a, exchange, 0)
            elif u < 0.25:
                transfer(ts, exchange, a, 0)
            elif u < 0.35:
                rows.append((int(ts), a, dex, float(np.round(rng.lognormal(-1, 1), 6)),
                             float(rng.integers(80_000, 250_000)), TxCategory.ContractInteraction,
                             TokenStandard.NONE, None, None, 0))
            else:
                b = benign[rng.integers(len(benign))]
                if b != a and T0 + join[b] <= ts:
                    transfer(ts, a, b, 0)

    # planted phishing collectors: victim burst, then a fast launder chain
    for c in collectors:
        start = T0 + rng.uniform(0.1 * horizon, 0.9 * horizon)
        victim_pool = np.array([a for a in benign if T0 + join[a] <= start])
        victims = rng.choice(victim_pool, size=min(cfg.victims_per_collector, len(victim_pool)),
                             replace=False)
        received = {}
        last = start
        for v in victims:
            ts = start + rng.uniform(0, cfg.burst_window)
            last = max(last, ts)
            asset = int(rng.choice(3, p=mix))
            rec, value = transfer(ts, str(v), c, 1, asset=asset)
            received.setdefault((asset,) + rec, 0.0)
            received[(asset,) + rec] += value
        chain = [c] + [address() for _ in range(cfg.launder_depth - 1)] + [mixer]
        for hop in chain[1:-1]:
            kinds[hop] = AccountKind.EOA
        ts = last
        for a, b in zip(chain[:-1], chain[1:]):
            ts += rng.uniform(60, 600)
            for (asset, cat, std, sym, tid), value in sorted(received.items(), key=lambda kv: repr(kv[0])):
                rows.append((int(ts), a, b, value, float(rng.integers(21_000, 60_000)),
                             cat, std, sym, tid, 1))

    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    txs, tx_labels = [], {}
    for i, (ts, a, b, value, gas, cat, std, sym, tid, label) in enumerate(rows):
        h = "0x" + format(i, "064x")
        txs.append(RawTransaction(h, a, b, float(value), float(gas), int(ts), cat, std, sym, tid,
                                  kinds.get(a, AccountKind.Unknown), kinds.get(b, AccountKind.Unknown)))
        tx_labels[h] = label
    node_labels = {a: 0 for a in benign}
    node_labels.update({c: 1 for c in collectors})
    entities = [(mixer, "Mixer", "SynthMixer"), (exchange, "CEX", "SynthExchange"),
                (dex, "DEX", "SynthSwap")]
    return SyntheticData(txs, node_labels, tx_labels, entities, collectors)
