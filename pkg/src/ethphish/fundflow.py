"""Fund-flow tracing from phishing addresses.

Taint spreads pro rata: a transfer out of an address carries tainted value in
proportion to the tainted share of the sender's balance at that moment. Each
asset (ETH, each fungible token, each NFT id) is traced separately.
"""

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional


from .errors import ConservationViolation, UnknownRoot

DAY = 86_400
ENTITY_CATEGORIES = ("DEX", "CEX", "Mixer", "Bridge")
BUCKETS = ("CEX", "Mixer", "Bridge", "DEX", "InBalance", "Other")
REASONS = ("EntityReached", "DepthLimit", "SuperNode", "Inactive", "Exhausted", "InBalance")


@dataclass
class TraceConfig:
    max_depth: int = 10
    super_node_tx_threshold: int = 10_000
    inactivity_days: float = 720.0
    min_value_threshold: float = 1e-9
    attribution: str = "proportional"

    def __post_init__(self):
        if min(self.max_depth, self.super_node_tx_threshold, self.inactivity_days,
               self.min_value_threshold) <= 0:
            raise ValueError("trace thresholds must be positive")
        if self.attribution != "proportional":
            raise ValueError("only proportional attribution is supported")


class EntityLabels(dict):
    """address -> (category, name); category None marks a plain address."""

    def category(self, addr):
        entry = self.get(addr)
        return entry[0] if entry else None

    def name(self, addr):
        entry = self.get(addr)
        return entry[1] if entry else None

    @classmethod
    def from_rows(cls, rows):
        out = cls()
        for addr, cat, name in rows:
            cat = None if cat in (None, "", "None") else cat
            if cat is not None and cat not in ENTITY_CATEGORIES:
                raise ValueError(f"unknown entity category {cat!r}")
            out[addr.lower()] = (cat, name or None)
        return out

    @classmethod
    def load(cls, path):
        with open(path, newline="") as fh:
            return cls.from_rows((r["address"], r["category"], r.get("name")) for r in csv.DictReader(fh))


@dataclass
class TraceNode:
    address: str
    amount: float
    depth: int
    tx_hash: Optional[str] = None
    reason: Optional[str] = None       # set on leaves only
    retained: float = 0.0              # taint left behind at an interior node
    children: list = field(default_factory=list)

    @property
    def is_leaf(self):
        return not self.children

    def walk(self):
        stack = [self]
        while stack:
            n = stack.pop()
            yield n
            stack.extend(reversed(n.children))

    def leaves(self):
        return [n for n in self.walk() if n.is_leaf]

    def to_dict(self):
        d = {"address": self.address, "amount": self.amount, "depth": self.depth}
        if self.tx_hash:
            d["tx_hash"] = self.tx_hash
        if self.is_leaf:
            d["reason"] = self.reason
        else:
            d["retained"] = self.retained
            d["children"] = [c.to_dict() for c in self.children]
        return d


@dataclass
class FundFlowTrace:
    root: str
    trees: dict          # token key -> TraceNode

    def to_dict(self):
        return {"root": self.root, "tokens": {k: v.to_dict() for k, v in sorted(self.trees.items())}}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class Ledger:
    """Read-only per-(address, asset) event index over raw transactions."""

    def __init__(self, txs):
        order = sorted(range(len(txs)), key=lambda i: (txs[i].timestamp, i))
        self.txs = [txs[i] for i in order]
        self.events = defaultdict(list)       # (addr, token) -> [(idx, +/-1, value, tx)]
        self.tx_count = defaultdict(int)
        for idx, tx in enumerate(self.txs):
            a, b = tx.from_addr.lower(), tx.to_addr.lower()
            self.tx_count[a] += 1
            if b != a:
                self.tx_count[b] += 1
            if tx.value <= 0 or a == b:
                continue
            self.events[(a, tx.token_key)].append((idx, -1, float(tx.value), tx))
            self.events[(b, tx.token_key)].append((idx, +1, float(tx.value), tx))
        self.end_time = self.txs[-1].timestamp if self.txs else 0

    def __contains__(self, addr):
        return addr.lower() in self.tx_count

    def tokens_of(self, addr):
        return sorted({k for (a, k) in self.events if a == addr})


def _first_outflow_time(events, after):
    for idx, sign, _, tx in events:
        if idx > after and sign < 0:
            return tx.timestamp
    return None


def trace(ledger, root, labels=None, cfg=None, phishing_txs=None):
    """Depth-first taint expansion from ``root`` (one tree per asset).

    The root's tainted inflows are the transfers in ``phishing_txs`` when
    given, otherwise everything it receives. A root with no inflow at all
    is treated as holding exactly what it sends."""
    if not isinstance(ledger, Ledger):
        ledger = Ledger(ledger)
    labels = labels if labels is not None else EntityLabels()
    cfg = cfg or TraceConfig()
    root = root.lower()
    if root not in ledger:
        raise UnknownRoot(f"{root} does not occur in the ledger")
    window = cfg.inactivity_days * DAY
    trees = {}

    def expand(addr, token, amount, depth, after, t_in, path, tx_hash, credit=None):
        # ``credit``: inflow positions that add to the taint while replaying
        # (root only); otherwise the whole ``amount`` is tainted on arrival
        node = TraceNode(addr, amount, depth, tx_hash)
        events = ledger.events.get((addr, token), [])
        nxt = _first_outflow_time(events, after)
        if labels.category(addr) in ENTITY_CATEGORIES:
            node.reason = "EntityReached"
        elif ledger.tx_count[addr] > cfg.super_node_tx_threshold:
            node.reason = "SuperNode"
        elif (nxt is None and ledger.end_time - t_in > window) or (nxt is not None and nxt - t_in > window):
            node.reason = "Inactive"
        elif depth >= cfg.max_depth:
            node.reason = "DepthLimit"
        elif amount < cfg.min_value_threshold:
            node.reason = "Exhausted"
        if node.reason:
            return node
        bal = sum(sign * v for idx, sign, v, _ in events if idx <= after)
        taint = 0.0 if credit is not None else amount
        bal = max(bal, taint)
        outs = []
        for idx, sign, v, tx in events:
            if idx <= after:
                continue
            if sign > 0:
                bal += v
                if credit is not None and idx in credit:
                    taint += v
                bal = max(bal, taint)
                continue
            carried = min(v * min(1.0, taint / max(bal, v)), taint) if taint > 0 else 0.0
            taint -= carried
            bal = max(bal - v, taint)
            if carried > 0:
                outs.append((idx, tx, carried))
        # taint sent back to an address already on this path stays with the sender
        fwd = [o for o in outs if o[1].to_addr.lower() not in path]
        if not fwd:
            node.reason = "InBalance"
            return node
        node.retained = taint + sum(c for _, _, c in outs) - sum(c for _, _, c in fwd)
        for idx, tx, carried in fwd:
            dst = tx.to_addr.lower()
            node.children.append(expand(dst, token, carried, depth + 1, idx, tx.timestamp,
                                        path | {dst}, tx.tx_hash))
        return node

    for token in ledger.tokens_of(root):
        events = ledger.events[(root, token)]
        inflows = [(i, v, tx) for i, s, v, tx in events if s > 0
                   and (phishing_txs is None or tx.tx_hash in phishing_txs)]
        if inflows:
            total = sum(v for _, v, _ in inflows)
            trees[token] = expand(root, token, total, 0, inflows[0][0] - 1, inflows[0][2].timestamp,
                                  {root}, None, credit={i for i, _, _ in inflows})
        elif phishing_txs is None and not any(s > 0 for _, s, _, _ in events):
            outflow = sum(v for _, s, v, _ in events if s < 0)
            if outflow > 0:
                trees[token] = expand(root, token, outflow, 0, -1, events[0][3].timestamp, {root}, None)
    return FundFlowTrace(root, trees)


def conservation_check(tr, rel=1e-9):
    """Each interior node must pass on no more than it received, and the leaf
    amounts plus interior retention must add back up to the root amount."""
    report = {}
    for token, root in tr.trees.items():
        for n in root.walk():
            if n.is_leaf:
                continue
            out = sum(c.amount for c in n.children)
            if out > n.amount * (1 + rel) + rel or n.retained < -rel * max(1.0, n.amount):
                raise ConservationViolation(
                    f"{token}: {n.address} forwards {out!r} of {n.amount!r}", n.address)
        leaves = sum(n.amount for n in root.leaves())
        retained = sum(n.retained for n in root.walk() if not n.is_leaf)
        if leaves > root.amount * (1 + rel) + rel:
            raise ConservationViolation(f"{token}: leaf total {leaves!r} exceeds root {root.amount!r}",
                                        root.address)
        report[token] = {"root": root.amount, "leaves": leaves, "retained": retained,
                         "residual": root.amount - leaves - retained}
    return report


@dataclass
class DestinationReport:
    token: Optional[str]
    total: float
    categories: dict       # bucket -> {"amount", "ratio"}
    entities: dict         # bucket -> [[name, amount, proportion], ...]

    def to_dict(self):
        return {"token": self.token, "total": self.total, "categories": self.categories,
                "entities": self.entities}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self):
        head = ("Destination", "Total", "Ratio", "Popular", "Amount", "Proportion")
        rows = []
        for b in BUCKETS:
            c = self.categories.get(b)
            if not c:
                continue
            ents = self.entities.get(b) or [["-", 0.0, 0.0]]
            name, amt, prop = ents[0]
            rows.append((b, f"{c['amount']:.6g}", f"{c['ratio']:.2%}", str(name), f"{amt:.6g}", f"{prop:.2%}"))
        widths = [max(len(str(r[i])) for r in rows + [head]) for i in range(len(head))]
        fmt = "  ".join("{:<%d}" % w for w in widths)
        return "\n".join(fmt.format(*r).rstrip() for r in [head] + rows)


def _bucket(leaf, labels):
    if leaf.reason == "EntityReached":
        return labels.category(leaf.address) or "Other"
    if leaf.reason in ("InBalance", "Inactive"):
        return "InBalance"
    return "Other"


def aggregate(traces, labels=None, token="ETH"):
    """Bucket leaf amounts of one asset by destination; interior retention
    counts as InBalance."""
    labels = labels if labels is not None else EntityLabels()
    amounts = defaultdict(float)
    per_entity = defaultdict(lambda: defaultdict(float))
    for tr in traces:
        root = tr.trees.get(token)
        if root is None:
            continue
        for n in root.walk():
            if n.is_leaf:
                b = _bucket(n, labels)
                amounts[b] += n.amount
                if n.reason == "EntityReached":
                    per_entity[b][labels.name(n.address) or n.address] += n.amount
            elif n.retained > 0:
                amounts["InBalance"] += n.retained
    total = float(sum(amounts.values()))
    cats = {b: {"amount": amounts[b], "ratio": amounts[b] / total if total > 0 else 0.0}
            for b in BUCKETS if b in amounts}
    ents = {}
    for b, d in per_entity.items():
        ranked = sorted(d.items(), key=lambda kv: (-kv[1], kv[0]))
        ents[b] = [[name, amt, amt / amounts[b] if amounts[b] > 0 else 0.0] for name, amt in ranked]
    return DestinationReport(token, total, cats, ents)
