"""Transaction log parsing, filtering, id remapping and z-score normalization."""

import csv
import json
import enum
import math
from dataclasses import dataclass, asdict, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import SchemaError, EmptyInput


class TxCategory(enum.IntEnum):
    EtherTransfer = 0
    FtTransfer = 1
    NftTransfer = 2
    InternalTx = 3
    ContractInteraction = 4


class TokenStandard(enum.IntEnum):
    NONE = 0
    ERC20 = 1
    ERC721 = 2
    ERC1155 = 3


class AccountKind(enum.IntEnum):
    EOA = 0
    CA = 1
    Unknown = 2


TOKEN_CATEGORIES = (TxCategory.FtTransfer, TxCategory.NftTransfer)
NFT_STANDARDS = (TokenStandard.ERC721, TokenStandard.ERC1155)

# Transfer/approval names of the token interfaces; only used to map free-form
# log "type" strings onto categories.
FT_EVENT_NAMES = ("Transfer", "transferFrom", "Approval", "approve")
NFT_EVENT_NAMES = ("safeTransferFrom", "TransferSingle", "ApprovalForAll", "setApprovalForAll")

FIELDS = ("tx_hash", "from", "to", "value", "gas", "timestamp", "type",
          "token_standard", "token_symbol", "token_id", "from_kind", "to_kind")
MANDATORY = ("tx_hash", "from", "to", "value", "gas", "timestamp", "type")

_CATEGORY_ALIASES = {c.name.lower(): c for c in TxCategory}
_CATEGORY_ALIASES.update({
    "ether": TxCategory.EtherTransfer, "eth": TxCategory.EtherTransfer,
    "ft": TxCategory.FtTransfer, "erc20": TxCategory.FtTransfer,
    "nft": TxCategory.NftTransfer,
    "internal": TxCategory.InternalTx,
    "contract": TxCategory.ContractInteraction, "call": TxCategory.ContractInteraction,
})
_CATEGORY_ALIASES.update({n.lower(): TxCategory.FtTransfer for n in FT_EVENT_NAMES})
_CATEGORY_ALIASES.update({n.lower(): TxCategory.NftTransfer for n in NFT_EVENT_NAMES})

_STANDARD_ALIASES = {
    "": TokenStandard.NONE, "none": TokenStandard.NONE, "null": TokenStandard.NONE,
    "erc20": TokenStandard.ERC20, "erc-20": TokenStandard.ERC20,
    "erc721": TokenStandard.ERC721, "erc-721": TokenStandard.ERC721,
    "erc1155": TokenStandard.ERC1155, "erc-1155": TokenStandard.ERC1155,
}
_KIND_ALIASES = {"": AccountKind.Unknown, "eoa": AccountKind.EOA, "ca": AccountKind.CA,
                 "contract": AccountKind.CA, "unknown": AccountKind.Unknown}


@dataclass(frozen=True)
class RawTransaction:
    tx_hash: str
    from_addr: str
    to_addr: str
    value: float
    gas_used: float
    timestamp: int
    tx_category: TxCategory
    token_standard: TokenStandard = TokenStandard.NONE
    token_symbol: Optional[str] = None
    token_id: Optional[int] = None
    account_kind_from: AccountKind = AccountKind.Unknown
    account_kind_to: AccountKind = AccountKind.Unknown

    def validate(self):
        """Return a list of violated invariants (empty when the record is well formed)."""
        problems = []
        if self.value < 0 or self.gas_used < 0 or self.timestamp < 0:
            problems.append("negative value/gas/timestamp")
        is_token = self.tx_category in TOKEN_CATEGORIES
        if is_token != (self.token_standard != TokenStandard.NONE):
            problems.append("token_standard inconsistent with category")
        if (self.token_id is not None) != (self.token_standard in NFT_STANDARDS):
            problems.append("token_id inconsistent with token_standard")
        return problems

    @property
    def token_key(self):
        """Asset identity used for per-token accounting."""
        if self.token_standard == TokenStandard.NONE:
            return "ETH"
        sym = self.token_symbol or self.token_standard.name
        if self.token_id is not None:
            return f"{sym}#{self.token_id}"
        return sym

    def to_record(self):
        return {
            "tx_hash": self.tx_hash,
            "from": self.from_addr,
            "to": self.to_addr,
            "value": _fmt_num(self.value),
            "gas": _fmt_num(self.gas_used),
            "timestamp": int(self.timestamp),
            "type": self.tx_category.name,
            "token_standard": None if self.token_standard == TokenStandard.NONE else self.token_standard.name,
            "token_symbol": self.token_symbol,
            "token_id": self.token_id,
            "from_kind": self.account_kind_from.name,
            "to_kind": self.account_kind_to.name,
        }


@dataclass(frozen=True)
class Transaction:
    src: int
    dst: int
    t: float
    value_z: float
    gas_z: float
    tx_type_id: int
    token_type_id: int
    # raw amounts are kept for the value-flow features and fund tracing
    value: float = 0.0
    gas: float = 0.0
    tx_hash: str = ""


@dataclass
class NormalizationStats:
    mu_value: float
    sigma_value: float
    mu_gas: float
    sigma_gas: float
    t_offset: float = 0.0

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


class AddressRegistry:
    """Bijection between lowercased hex addresses and dense node ids."""

    def __init__(self):
        self._ids = {}
        self.addresses = []
        self.kinds = []

    def __len__(self):
        return len(self.addresses)

    def __contains__(self, addr):
        return addr.lower() in self._ids

    def add(self, addr, kind=AccountKind.Unknown):
        key = addr.lower()
        idx = self._ids.get(key)
        if idx is None:
            idx = len(self.addresses)
            self._ids[key] = idx
            self.addresses.append(key)
            self.kinds.append(AccountKind(kind))
        elif self.kinds[idx] == AccountKind.Unknown and kind != AccountKind.Unknown:
            self.kinds[idx] = AccountKind(kind)
        return idx

    def id_of(self, addr):
        return self._ids[addr.lower()]

    def get(self, addr, default=None):
        return self._ids.get(addr.lower(), default)

    def address_of(self, idx):
        return self.addresses[idx]

    def kind_array(self):
        return np.asarray([int(k) for k in self.kinds], dtype=np.int64)

    def copy(self):
        out = AddressRegistry()
        out._ids = dict(self._ids)
        out.addresses = list(self.addresses)
        out.kinds = list(self.kinds)
        return out

    def to_json(self):
        return {"addresses": self.addresses, "kinds": [k.name for k in self.kinds]}

    @classmethod
    def from_json(cls, doc):
        reg = cls()
        for addr, kind in zip(doc["addresses"], doc["kinds"]):
            reg.add(addr, AccountKind[kind])
        return reg

    def __eq__(self, other):
        return isinstance(other, AddressRegistry) and self.addresses == other.addresses \
            and self.kinds == other.kinds


def _fmt_num(x):
    return int(x) if float(x).is_integer() and abs(x) < 2 ** 63 else float(x)


def _blank(v):
    return v is None or (isinstance(v, str) and v.strip() == "")


def _number(rec, key, line, integer=False):
    raw = rec.get(key)
    if _blank(raw):
        raise SchemaError(line, key, "missing")
    try:
        val = int(raw) if integer and not isinstance(raw, float) else float(raw)
        if integer:
            val = int(val)
    except (TypeError, ValueError):
        raise SchemaError(line, key, f"not a number: {raw!r}") from None
    if isinstance(val, float) and not math.isfinite(val):
        raise SchemaError(line, key, "not finite")
    if val < 0:
        raise SchemaError(line, key, "negative")
    return val


def _lookup(table, rec, key, line, default=None):
    raw = rec.get(key)
    if _blank(raw):
        if default is None:
            raise SchemaError(line, key, "missing")
        return default
    try:
        return table[str(raw).strip().lower()]
    except KeyError:
        raise SchemaError(line, key, f"unknown value {raw!r}") from None


def record_to_raw(rec, line):
    for key in MANDATORY:
        if key not in rec or _blank(rec[key]):
            raise SchemaError(line, key, "missing")
    token_id = rec.get("token_id")
    if not _blank(token_id):
        token_id = _number(rec, "token_id", line, integer=True)
    else:
        token_id = None
    symbol = rec.get("token_symbol")
    return RawTransaction(
        tx_hash=str(rec["tx_hash"]),
        from_addr=str(rec["from"]).lower(),
        to_addr=str(rec["to"]).lower(),
        value=_number(rec, "value", line),
        gas_used=_number(rec, "gas", line),
        timestamp=_number(rec, "timestamp", line, integer=True),
        tx_category=_lookup(_CATEGORY_ALIASES, rec, "type", line),
        token_standard=_lookup(_STANDARD_ALIASES, rec, "token_standard", line, TokenStandard.NONE),
        token_symbol=None if _blank(symbol) else str(symbol),
        token_id=token_id,
        account_kind_from=_lookup(_KIND_ALIASES, rec, "from_kind", line, AccountKind.Unknown),
        account_kind_to=_lookup(_KIND_ALIASES, rec, "to_kind", line, AccountKind.Unknown),
    )


def _detect_format(path):
    return "csv" if str(path).lower().endswith(".csv") else "jsonl"


def parse_log(path, format=None):
    """Read a JSONL or CSV transaction log into RawTransactions, in file order.

    Line numbers in errors are 1-based physical lines (the CSV header is line 1).
    """
    path = Path(path)
    fmt = format or _detect_format(path)
    out = []
    with open(path, newline="") as fh:
        if fmt == "jsonl":
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise SchemaError(lineno, "<record>", str(exc)) from None
                if not isinstance(rec, dict):
                    raise SchemaError(lineno, "<record>", "not an object")
                out.append(record_to_raw(rec, lineno))
        elif fmt == "csv":
            reader = csv.DictReader(fh)
            missing = [k for k in MANDATORY if k not in (reader.fieldnames or [])]
            if missing:
                raise SchemaError(1, missing[0], "missing column")
            for rec in reader:
                out.append(record_to_raw(rec, reader.line_num))
        else:
            raise ValueError(f"unknown log format {fmt!r}")
    return out


def write_log(path, txs, format=None):
    path = Path(path)
    fmt = format or _detect_format(path)
    with open(path, "w", newline="") as fh:
        if fmt == "jsonl":
            for tx in txs:
                fh.write(json.dumps(tx.to_record()) + "\n")
        else:
            writer = csv.DictWriter(fh, fieldnames=FIELDS)
            writer.writeheader()
            for tx in txs:
                rec = {k: ("" if v is None else v) for k, v in tx.to_record().items()}
                writer.writerow(rec)


def filter_and_categorize(txs):
    """Drop zero-value Ether transfers and token transfers outside ERC20/721/1155.

    Token transfers are re-categorized from their standard (ERC20 -> FT,
    ERC721/1155 -> NFT); everything else passes through untouched.
    """
    out = []
    for tx in txs:
        if tx.tx_category == TxCategory.EtherTransfer and tx.value == 0:
            continue
        is_token = tx.tx_category in TOKEN_CATEGORIES
        if is_token and tx.token_standard == TokenStandard.NONE:
            continue
        if tx.token_standard != TokenStandard.NONE:
            want = TxCategory.FtTransfer if tx.token_standard == TokenStandard.ERC20 \
                else TxCategory.NftTransfer
            if tx.tx_category != want:
                tx = replace(tx, tx_category=want)
        out.append(tx)
    return out


def _zstats(x):
    mu = float(np.mean(x))
    sigma = float(np.std(x))
    return mu, max(sigma, 1e-12)


def compute_stats(txs):
    if not txs:
        raise EmptyInput("cannot compute normalization statistics of an empty batch")
    values = np.array([tx.value for tx in txs], dtype=float)
    gas = np.array([tx.gas_used for tx in txs], dtype=float)
    mu_v, s_v = _zstats(values)
    mu_g, s_g = _zstats(gas)
    t0 = float(min(tx.timestamp for tx in txs))
    return NormalizationStats(mu_v, s_v, mu_g, s_g, t0)


def normalize(txs, registry=None, stats=None):
    """Remap addresses, shift time, z-score value and gas.

    Pass ``stats`` (e.g. from the training split) to reuse frozen statistics;
    otherwise they are computed on this batch. Returns
    ``(transactions, stats, registry)``; the registry is extended in place.
    """
    if not txs:
        raise EmptyInput("normalize() needs at least one transaction")
    registry = AddressRegistry() if registry is None else registry
    if stats is None:
        stats = compute_stats(txs)
    order = sorted(range(len(txs)), key=lambda i: txs[i].timestamp)  # stable
    out = []
    for i in order:
        tx = txs[i]
        src = registry.add(tx.from_addr, tx.account_kind_from)
        dst = registry.add(tx.to_addr, tx.account_kind_to)
        out.append(Transaction(
            src=src, dst=dst,
            t=float(tx.timestamp) - stats.t_offset,
            value_z=(tx.value - stats.mu_value) / stats.sigma_value,
            gas_z=(tx.gas_used - stats.mu_gas) / stats.sigma_gas,
            tx_type_id=int(tx.tx_category),
            token_type_id=int(tx.token_standard),
            value=float(tx.value), gas=float(tx.gas_used), tx_hash=tx.tx_hash,
        ))
    return out, stats, registry


def save_transactions(path, txs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst", "t", "value_z", "gas_z", "tx_type_id", "token_type_id",
                    "value", "gas", "tx_hash"])
        for tx in txs:
            w.writerow([tx.src, tx.dst, repr(tx.t), repr(tx.value_z), repr(tx.gas_z),
                        tx.tx_type_id, tx.token_type_id, repr(tx.value), repr(tx.gas), tx.tx_hash])


def load_transactions(path):
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append(Transaction(
                src=int(rec["src"]), dst=int(rec["dst"]), t=float(rec["t"]),
                value_z=float(rec["value_z"]), gas_z=float(rec["gas_z"]),
                tx_type_id=int(rec["tx_type_id"]), token_type_id=int(rec["token_type_id"]),
                value=float(rec["value"]), gas=float(rec["gas"]), tx_hash=rec["tx_hash"]))
    return out
