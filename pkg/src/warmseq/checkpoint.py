"""Tensor archives, warm-starting and checkpoint surgery.

Archive layout (all integers little-endian)::

    b"WSCK"                         magic
    u32  version                    currently 1
    u32  n; n bytes                 metadata, compact JSON object (family, seed, ...)
    u32  count                      number of tensors
    count x manifest entry:
        u16 n; n bytes              UTF-8 name
        u8  dtype                   1 = float32, 2 = float64
        u8  ndim; ndim x u32        shape
    u32  crc32 of every byte above
    count x payload:
        row-major data; u32 crc32 of that data
"""

from __future__ import annotations

import json
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, IncompatibleCheckpointError, RuleError, SelectionError
from .model import embedding_prefix

MAGIC = b"WSCK"
VERSION = 1
FAMILIES = ("bert-like", "gpt-like", "native")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_LAYER = re.compile(r"^(encoder|decoder)/layer_(\d+)/(.+)$")


@dataclass
class TensorArchive:
    tensors: dict = field(default_factory=dict)
    family: str = "native"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise FormatError(f"unknown archive family {self.family!r}")
        for name, value in self.tensors.items():
            if np.dtype(value.dtype) not in _DTYPE_CODES:
                raise FormatError(f"{name}: unsupported dtype {value.dtype}")

    def __len__(self):
        return len(self.tensors)

    def __contains__(self, name):
        return name in self.tensors

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def num_params(self):
        return sum(v.size for v in self.tensors.values())

    def with_tensors(self, tensors):
        return TensorArchive(dict(tensors), self.family, dict(self.metadata))

    def identical(self, other):
        """Same names in the same order with bit-identical payloads."""
        if self.family != other.family or self.metadata != other.metadata:
            return False
        if list(self.tensors) != list(other.tensors):
            return False
        return all(a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.tensors.values(), other.tensors.values()))

    def layer_indices(self, stack=None):
        found = {}
        for name in self.tensors:
            m = _LAYER.match(name)
            if m and (stack is None or m.group(1) == stack):
                found.setdefault(m.group(1), set()).add(int(m.group(2)))
        if stack is not None:
            return sorted(found.get(stack, ()))
        return {k: sorted(v) for k, v in found.items()}


# serialization --------------------------------------------------------------

def archive_bytes(archive):
    meta = dict(archive.metadata)
    meta["family"] = archive.family
    meta_bytes = json.dumps(meta, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    head = bytearray(MAGIC)
    head += struct.pack("<II", VERSION, len(meta_bytes)) + meta_bytes
    head += struct.pack("<I", len(archive.tensors))
    payloads = []
    for name, value in archive.tensors.items():
        encoded = name.encode("utf-8")
        code = _DTYPE_CODES[np.dtype(value.dtype)]
        head += struct.pack("<H", len(encoded)) + encoded
        head += struct.pack("<BB", code, value.ndim)
        head += struct.pack(f"<{value.ndim}I", *value.shape)
        data = np.ascontiguousarray(value, dtype=_DTYPES[code]).tobytes()
        payloads.append(data + struct.pack("<I", zlib.crc32(data)))
    head += struct.pack("<I", zlib.crc32(bytes(head)))
    return bytes(head) + b"".join(payloads)


def save_archive(archive, path):
    Path(path).write_bytes(archive_bytes(archive))


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise FormatError("archive truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_archive(blob):
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise FormatError("not a tensor archive (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported archive version {version}")
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt archive metadata: {exc}") from None
    (count,) = r.unpack("<I")
    manifest = []
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8", errors="strict")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        manifest.append((name, _DTYPES[code], shape))
    header_end = r.pos
    (crc,) = r.unpack("<I")
    if zlib.crc32(blob[:header_end]) != crc:
        raise FormatError("archive manifest checksum mismatch")
    tensors = {}
    for name, dtype, shape in manifest:
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = r.take(nbytes)
        (crc,) = r.unpack("<I")
        if zlib.crc32(data) != crc:
            raise FormatError(f"checksum mismatch in tensor {name}")
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name}")
        tensors[name] = np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(blob):
        raise FormatError("trailing bytes after archive payloads")
    family = meta.pop("family", "native")
    return TensorArchive(tensors, family, meta)


def load_archive(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read archive {path}: {exc}") from None
    return parse_archive(blob)


def model_archive(model, family="native", metadata=None):
    """A model's own parameters (one entry per storage) as an archive."""
    return TensorArchive(model.state_dict(), family, dict(metadata or {}))


# warm-starting ------------------------------------------------------------

@dataclass
class InitReport:
    copied: list = field(default_factory=list)
    random: list = field(default_factory=list)
    unused: list = field(default_factory=list)
    shapes: dict = field(default_factory=dict)
    sizes: dict = field(default_factory=dict)
    aliases: dict = field(default_factory=dict)

    @property
    def warm_started_count(self):
        return sum(self.sizes[n] for n in self.copied)

    @property
    def random_count(self):
        return sum(self.sizes[n] for n in self.random)

    @property
    def total(self):
        return self.warm_started_count + self.random_count

    def finalize(self, model):
        copied = set(self.copied)
        self.shapes = {n: tuple(t.shape) for n, t in model.unique_params().items()}
        self.sizes = {n: t.size for n, t in model.unique_params().items()}
        self.random = [n for n in self.shapes if n not in copied]
        self.aliases = dict(model.aliases)
        return self

    def warm_names(self):
        """Copied names including every alias of a copied tensor."""
        copied = set(self.copied)
        return copied | {a for a, target in self.aliases.items() if target in copied}

    def summary(self):
        return (f"warm_started={self.warm_started_count} random={self.random_count} "
                f"copied_tensors={len(self.copied)} random_tensors={len(self.random)}")


def _source_embedding_prefix(archive, side):
    if any(n.startswith(f"{side}/embeddings/") for n in archive.tensors):
        return f"{side}/embeddings"
    return "embeddings"


def _source_stack(archive, side):
    stacks = archive.layer_indices()
    if archive.family == "native" and side in stacks:
        return side
    if len(stacks) == 1:
        return next(iter(stacks))
    if side in stacks:
        return side
    return None


def warm_start(model, archive, side="both", report=None):
    """Copy archive tensors into ``model`` for one or both sides.

    Model tensors without a counterpart keep their random values.
    Cross-attention is only ever copied from native archives.
    """
    if side not in ("encoder", "decoder", "both"):
        raise ValueError(f"side must be encoder, decoder or both, got {side!r}")
    report = report or InitReport()
    config = model.config
    sides = ["encoder", "decoder"] if side == "both" else [side]
    if config.decoder_only:
        sides = [s for s in sides if s == "decoder"]
    already = set(report.copied)
    consumed = set()

    def copy(src_name, dst_name):
        dst = model.params[dst_name]
        canonical = model.canonical(dst_name)
        value = archive.tensors[src_name]
        if dst_name.endswith("/position") and value.ndim == 2 and value.shape[0] > dst.shape[0]:
            value = value[:dst.shape[0]]
        if tuple(value.shape) != tuple(dst.shape):
            raise IncompatibleCheckpointError(
                f"tensor {src_name} has shape {tuple(value.shape)} but {dst_name} needs {tuple(dst.shape)}")
        consumed.add(src_name)
        if canonical in already:
            return
        dst.data = np.array(value, dtype=model.dtype)
        already.add(canonical)
        report.copied.append(canonical)

    for s in sides:
        src_prefix = _source_embedding_prefix(archive, s)
        dst_prefix = embedding_prefix(config, s)
        for part in ("word", "position", "token_type", "ln_gain", "ln_bias"):
            if f"{src_prefix}/{part}" in archive.tensors:
                copy(f"{src_prefix}/{part}", f"{dst_prefix}/{part}")
        stack = _source_stack(archive, s)
        if stack is None:
            continue
        blocks = ["self", "ffn"]
        if archive.family == "native" and s == "decoder" and not config.decoder_only:
            blocks.append("cross")
        for i in range(config.num_layers):
            for block in blocks:
                prefix = f"{stack}/layer_{i}/{block}/"
                for name in archive.tensors:
                    if name.startswith(prefix):
                        dst = f"{s}/layer_{i}/{block}/{name[len(prefix):]}"
                        if dst not in model.params:
                            raise IncompatibleCheckpointError(f"archive tensor {name} has no model counterpart {dst}")
                        copy(name, dst)
    if archive.family == "native" and side == "both":
        for name in ("output/w", "output/b"):
            if name in archive.tensors and name in model.params:
                copy(name, name)
    report.unused = sorted(set(archive.tensors) - consumed)
    return report.finalize(model)


# ablation selectors -------------------------------------------------------

def _is_embedding(name):
    return name.startswith("embeddings/") or "/embeddings/" in name


def embeddings_only(archive):
    kept = {n: v for n, v in archive.tensors.items() if _is_embedding(n)}
    if not kept:
        raise SelectionError("archive holds no embedding tensors")
    return archive.with_tensors(kept)


def without_word_embeddings(archive):
    """Everything except the token embedding matrices."""
    return archive.with_tensors({n: v for n, v in archive.tensors.items()
                                 if not (_is_embedding(n) and n.endswith("/word"))})


def select_layer_subset(archive, source_layers, stack=None):
    """Renumber layers so that target layer ``i`` is source layer ``source_layers[i]``.

    Indices are 0-based. Tensors outside the layer stack pass through.
    """
    stacks = archive.layer_indices()
    if stack is None:
        if len(stacks) != 1:
            raise SelectionError(f"archive has layer stacks {sorted(stacks)}; name one")
        stack = next(iter(stacks))
    available = set(stacks.get(stack, ()))
    missing = [i for i in source_layers if i not in available]
    if missing:
        raise SelectionError(f"layers {missing} not in archive (has {sorted(available)})")
    out = {}
    for name, value in archive.tensors.items():
        m = _LAYER.match(name)
        if not m or m.group(1) != stack:
            out[name] = value
    for target, source in enumerate(source_layers):
        prefix = f"{stack}/layer_{source}/"
        for name, value in archive.tensors.items():
            if name.startswith(prefix):
                out[f"{stack}/layer_{target}/{name[len(prefix):]}"] = value
    return archive.with_tensors(out)


def parse_layer_list(text):
    """``"8,9,12-17"`` -> ``[8, 9, 12, 13, 14, 15, 16, 17]``."""
    layers = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            layers.extend(range(int(lo), int(hi) + 1))
        else:
            layers.append(int(part))
    return layers


# foreign layouts --------------------------------------------------------------

def _glob_regex(pattern):
    parts = []
    for chunk in re.split(r"(\*)", pattern):
        parts.append(r"([^/.]*)" if chunk == "*" else re.escape(chunk))
    return re.compile("^" + "".join(parts) + "$")


def _fill(pattern, captures):
    pieces = pattern.split("*")
    if len(pieces) - 1 != len(captures):
        raise RuleError(f"pattern {pattern!r} needs {len(pieces) - 1} captures, got {len(captures)}")
    out = pieces[0]
    for cap, piece in zip(captures, pieces[1:]):
        out += cap + piece
    return out


@dataclass(frozen=True)
class Rule:
    op: str
    args: tuple
    axis: int = 0

    def text(self):
        if self.op == "split3":
            return f"split3 {self.args[0]} axis={self.axis} {' '.join(self.args[1:])}"
        if self.op == "concat3":
            return f"concat3 {' '.join(self.args[:3])} axis={self.axis} {self.args[3]}"
        return f"{self.op} {' '.join(self.args)}"


def _default_split_names(name):
    head, _, last = name.rpartition("/")
    prefix = head + "/" if head else ""
    if "qkv" in last:
        return tuple(prefix + last.replace("qkv", part) for part in ("query", "key", "value"))
    return tuple(f"{name}_{i}" for i in range(3))


class MappingRules:
    """Ordered rename/split/transpose/skip rules over archive tensor names.

    Patterns use ``*`` for one name component (no ``/`` or ``.``); rename
    and split targets reuse the captured components in order. ``skip``
    exempts matching tensors from every ``transpose`` rule.
    """

    def __init__(self, rules):
        self.rules = list(rules)

    def __iter__(self):
        return iter(self.rules)

    def __len__(self):
        return len(self.rules)

    def text(self):
        return "".join(r.text() + "\n" for r in self.rules)

    @classmethod
    def parse(cls, text):
        rules = []
        for number, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            words = line.split()
            op, rest = words[0], words[1:]
            try:
                if op in ("rename",) and len(rest) == 2:
                    rules.append(Rule(op, tuple(rest)))
                elif op in ("transpose", "skip") and len(rest) == 1:
                    rules.append(Rule(op, tuple(rest)))
                elif op == "split3" and len(rest) in (2, 5):
                    axis = _parse_axis(rest[1])
                    outs = tuple(rest[2:]) or _default_split_names(rest[0])
                    rules.append(Rule(op, (rest[0], *outs), axis))
                elif op == "concat3" and len(rest) == 5:
                    axis = _parse_axis(rest[3])
                    rules.append(Rule(op, (*rest[:3], rest[4]), axis))
                else:
                    raise RuleError(f"cannot parse rule {line!r}")
            except RuleError as exc:
                raise RuleError(f"line {number}: {exc}") from None
        return cls(rules)

    @classmethod
    def load(cls, path):
        try:
            return cls.parse(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise FormatError(f"cannot read rules {path}: {exc}") from None

    def inverse(self):
        inverted = []
        for r in reversed(self.rules):
            if r.op == "rename":
                inverted.append(Rule("rename", (r.args[1], r.args[0])))
            elif r.op == "split3":
                inverted.append(Rule("concat3", (*r.args[1:], r.args[0]), r.axis))
            elif r.op == "concat3":
                inverted.append(Rule("split3", (r.args[3], *r.args[:3]), r.axis))
            else:
                inverted.append(r)
        return MappingRules(inverted)

    def apply(self, archive):
        """Return ``(converted archive, names no rule touched)``."""
        entries = list(archive.tensors.items())
        origin = {name: {name} for name, _ in entries}
        touched = set()
        skips = [_glob_regex(r.args[0]) for r in self.rules if r.op == "skip"]
        for name, _ in entries:
            if any(s.match(name) for s in skips):
                touched.add(name)

        for rule in self.rules:
            if rule.op == "skip":
                continue
            if rule.op == "rename":
                src = _glob_regex(rule.args[0])
                new_entries = []
                for name, value in entries:
                    m = src.match(name)
                    if m:
                        new = _fill(rule.args[1], m.groups())
                        origin[new] = origin.pop(name)
                        touched |= origin[new]
                        name = new
                    new_entries.append((name, value))
                entries = new_entries
            elif rule.op == "transpose":
                pattern = _glob_regex(rule.args[0])
                new_entries = []
                for name, value in entries:
                    if pattern.match(name):
                        touched |= origin[name]
                        if not any(s.match(name) for s in skips):
                            value = value.T.copy()
                    new_entries.append((name, value))
                entries = new_entries
            elif rule.op == "split3":
                pattern = _glob_regex(rule.args[0])
                new_entries = []
                for name, value in entries:
                    m = pattern.match(name)
                    if not m:
                        new_entries.append((name, value))
                        continue
                    axis = rule.axis % value.ndim if value.ndim else 0
                    if value.ndim == 0 or value.shape[axis] % 3:
                        raise RuleError(f"cannot split {name} with shape {value.shape} into 3 along axis {rule.axis}")
                    src_origin = origin.pop(name)
                    touched |= src_origin
                    for out, part in zip(rule.args[1:], np.split(value, 3, axis=axis)):
                        out_name = _fill(out, m.groups())
                        origin[out_name] = set(src_origin)
                        new_entries.append((out_name, np.ascontiguousarray(part)))
                entries = new_entries
            elif rule.op == "concat3":
                first = _glob_regex(rule.args[0])
                lookup = dict(entries)
                groups = {}
                for name, _ in entries:
                    m = first.match(name)
                    if m:
                        names = [_fill(p, m.groups()) for p in rule.args[:3]]
                        missing = [n for n in names if n not in lookup]
                        if missing:
                            raise RuleError(f"concat3 is missing {missing}")
                        groups[name] = (names, _fill(rule.args[3], m.groups()))
                consumed = {n for names, _ in groups.values() for n in names}
                new_entries = []
                for name, value in entries:
                    if name in groups:
                        names, out_name = groups[name]
                        parts = [lookup[n] for n in names]
                        merged = set().union(*(origin.pop(n) for n in names))
                        touched |= merged
                        origin[out_name] = merged
                        value = np.concatenate(parts, axis=rule.axis % parts[0].ndim)
                        new_entries.append((out_name, np.ascontiguousarray(value)))
                    elif name not in consumed:
                        new_entries.append((name, value))
                entries = new_entries
        names = [n for n, _ in entries]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise RuleError(f"rules map several tensors onto {dupes}")
        unmatched = [n for n in archive.tensors if n not in touched]
        return archive.with_tensors(dict(entries)), unmatched


def _parse_axis(word):
    if not word.startswith("axis="):
        raise RuleError(f"expected axis=<k>, got {word!r}")
    try:
        return int(word[5:])
    except ValueError:
        raise RuleError(f"bad axis {word!r}") from None


def convert_foreign(archive, rules, family=None, strict=False):
    """Rename, split and transpose ``archive`` per ``rules``.

    Tensors that no rule touches are kept unchanged; with ``strict`` they are
    an error instead.
    """
    converted, unmatched = rules.apply(archive)
    if strict and unmatched:
        raise RuleError(f"rules leave {len(unmatched)} tensors unmatched: {unmatched[:5]}")
    if family is not None:
        converted.family = family
    return converted


def unmatched_names(archive, rules):
    return rules.apply(archive)[1]


ROBERTA_STYLE_RULES = """\
# fairseq-style encoder names -> canonical bert-like names
split3 layers.*.self_attn.in_proj_weight axis=0 layers.*.self_attn.q_proj.weight layers.*.self_attn.k_proj.weight layers.*.self_attn.v_proj.weight
split3 layers.*.self_attn.in_proj_bias axis=0 layers.*.self_attn.q_proj.bias layers.*.self_attn.k_proj.bias layers.*.self_attn.v_proj.bias
rename layers.*.self_attn.q_proj.weight encoder/layer_*/self/query_w
rename layers.*.self_attn.q_proj.bias encoder/layer_*/self/query_b
rename layers.*.self_attn.k_proj.weight encoder/layer_*/self/key_w
rename layers.*.self_attn.k_proj.bias encoder/layer_*/self/key_b
rename layers.*.self_attn.v_proj.weight encoder/layer_*/self/value_w
rename layers.*.self_attn.v_proj.bias encoder/layer_*/self/value_b
rename layers.*.self_attn.out_proj.weight encoder/layer_*/self/output_w
rename layers.*.self_attn.out_proj.bias encoder/layer_*/self/output_b
rename layers.*.self_attn_layer_norm.weight encoder/layer_*/self/ln_gain
rename layers.*.self_attn_layer_norm.bias encoder/layer_*/self/ln_bias
rename layers.*.fc1.weight encoder/layer_*/ffn/inner_w
rename layers.*.fc1.bias encoder/layer_*/ffn/inner_b
rename layers.*.fc2.weight encoder/layer_*/ffn/outer_w
rename layers.*.fc2.bias encoder/layer_*/ffn/outer_b
rename layers.*.final_layer_norm.weight encoder/layer_*/ffn/ln_gain
rename layers.*.final_layer_norm.bias encoder/layer_*/ffn/ln_bias
rename embed_tokens.weight embeddings/word
rename embed_positions.weight embeddings/position
rename token_type.weight embeddings/token_type
rename emb_layer_norm.weight embeddings/ln_gain
rename emb_layer_norm.bias embeddings/ln_bias
skip embeddings/word
skip embeddings/position
skip embeddings/token_type
transpose encoder/layer_*/*/*_w
"""


GPT_STYLE_RULES = """\
# gpt-style decoder names with fused attention -> canonical gpt-like names
split3 h*/attn/c_attn/w axis=0 h*/attn/q/w h*/attn/k/w h*/attn/v/w
split3 h*/attn/c_attn/b axis=0 h*/attn/q/b h*/attn/k/b h*/attn/v/b
rename h*/attn/q/w decoder/layer_*/self/query_w
rename h*/attn/q/b decoder/layer_*/self/query_b
rename h*/attn/k/w decoder/layer_*/self/key_w
rename h*/attn/k/b decoder/layer_*/self/key_b
rename h*/attn/v/w decoder/layer_*/self/value_w
rename h*/attn/v/b decoder/layer_*/self/value_b
rename h*/attn/c_proj/w decoder/layer_*/self/output_w
rename h*/attn/c_proj/b decoder/layer_*/self/output_b
rename h*/ln_1/g decoder/layer_*/self/ln_gain
rename h*/ln_1/b decoder/layer_*/self/ln_bias
rename h*/mlp/c_fc/w decoder/layer_*/ffn/inner_w
rename h*/mlp/c_fc/b decoder/layer_*/ffn/inner_b
rename h*/mlp/c_proj/w decoder/layer_*/ffn/outer_w
rename h*/mlp/c_proj/b decoder/layer_*/ffn/outer_b
rename h*/ln_2/g decoder/layer_*/ffn/ln_gain
rename h*/ln_2/b decoder/layer_*/ffn/ln_bias
rename wte embeddings/word
rename wpe embeddings/position
rename wtt embeddings/token_type
rename ln_e/g embeddings/ln_gain
rename ln_e/b embeddings/ln_bias
skip embeddings/word
skip embeddings/position
skip embeddings/token_type
transpose decoder/layer_*/*/*_w
"""
