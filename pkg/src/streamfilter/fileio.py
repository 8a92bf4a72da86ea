"""Text file formats: tractograms, labels and model checkpoints.

Tractogram ("FIB 1")::

    FIB 1
    <S streamlines>
    <n points>
    x y z            (n lines, 9 significant digits)
    ...

Labels: one token per line, ``p``, ``np`` or a non-negative class id.

Checkpoint ("VFCKPT 1")::

    VFCKPT 1
    <key> <value>    (metadata lines)
    params <P>
    <name>
    <d0> <d1> ...    (shape)
    v v v ...        (values, 17 significant digits)

Writers go through a temporary file and an atomic rename. Every parse error
names the file and line.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .geometry import NON_PLAUSIBLE, PLAUSIBLE, Tractogram, as_streamline
from .models import Model, ModelSpec, build


class FormatError(ValueError):
    """Malformed input file; message carries path and line number."""

    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = path
        self.line = line


def atomic_write(path, text: str):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Lines:
    def __init__(self, path):
        self.path = os.fspath(path)
        with open(self.path, "r", newline="") as f:
            self.lines = f.read().split("\n")
        if self.lines and self.lines[-1] == "":
            self.lines.pop()
        self.i = 0

    def next(self, what: str) -> str:
        if self.i >= len(self.lines):
            raise FormatError(self.path, self.i + 1, f"unexpected end of file, expected {what}")
        line = self.lines[self.i].rstrip("\r")
        self.i += 1
        return line

    def error(self, msg):
        return FormatError(self.path, self.i, msg)

    def int(self, what: str, minimum: int = 0) -> int:
        tok = self.next(what).strip()
        try:
            v = int(tok)
        except ValueError:
            raise self.error(f"expected integer {what}, got {tok!r}") from None
        if v < minimum:
            raise self.error(f"{what} must be >= {minimum}, got {v}")
        return v

    def floats(self, what: str, count: int | None = None) -> np.ndarray:
        toks = self.next(what).split()
        try:
            vals = np.array([float(t) for t in toks], dtype=np.float64)
        except ValueError:
            raise self.error(f"non-numeric token in {what}") from None
        if count is not None and len(vals) != count:
            raise self.error(f"expected {count} values for {what}, got {len(vals)}")
        return vals

    def done(self):
        while self.i < len(self.lines):
            if self.lines[self.i].strip():
                raise FormatError(self.path, self.i + 1, "trailing content after last record")
            self.i += 1


# ----------------------------------------------------------------------


def _fmt9(v) -> str:
    return f"{float(v):.9g}"


def fib_text(t: Tractogram) -> str:
    if len(t) == 0:
        raise ValueError("refusing to write an empty tractogram")
    out = ["FIB 1", str(len(t))]
    for s in t.streamlines:
        out.append(str(len(s)))
        out.extend(" ".join(_fmt9(v) for v in p) for p in s)
    return "\n".join(out) + "\n"


def save_fib(path, t: Tractogram):
    atomic_write(path, fib_text(t))


def load_fib(path) -> Tractogram:
    r = _Lines(path)
    if r.next("header").strip() != "FIB 1":
        raise r.error("bad header, expected 'FIB 1'")
    count = r.int("streamline count", 1)
    streamlines = []
    for k in range(count):
        n = r.int(f"point count of streamline {k}", 2)
        pts = np.stack([r.floats(f"point of streamline {k}", 3) for _ in range(n)])
        try:
            streamlines.append(as_streamline(pts))
        except ValueError as e:
            raise r.error(f"streamline {k}: {e}") from None
    r.done()
    return Tractogram(streamlines)


def save_labels(path, labels):
    """Binary labels as p/np tokens, anything else as integer class ids."""
    atomic_write(path, labels_text(labels))


def labels_text(labels, as_class_ids: bool = False) -> str:
    labels = np.asarray(labels, dtype=np.int64)
    if as_class_ids:
        toks = [str(int(v)) for v in labels]
    else:
        if np.any((labels != PLAUSIBLE) & (labels != NON_PLAUSIBLE)):
            raise ValueError("binary labels must be 0 or 1")
        toks = ["p" if v == PLAUSIBLE else "np" for v in labels]
    return "".join(t + "\n" for t in toks)


def save_class_ids(path, class_ids):
    atomic_write(path, labels_text(class_ids, as_class_ids=True))


def load_labels(path, expected: int | None = None) -> np.ndarray:
    """Load a label file; returns 1/0 for p/np tokens, class ids otherwise.

    A file may not mix p/np tokens with integer ids.
    """
    r = _Lines(path)
    vals, kinds = [], set()
    while r.i < len(r.lines):
        tok = r.next("label").strip()
        if tok == "p":
            vals.append(PLAUSIBLE)
            kinds.add("binary")
        elif tok == "np":
            vals.append(NON_PLAUSIBLE)
            kinds.add("binary")
        else:
            try:
                v = int(tok)
            except ValueError:
                raise r.error(f"invalid label token {tok!r}") from None
            if v < 0:
                raise r.error(f"class id must be non-negative, got {v}")
            vals.append(v)
            kinds.add("class")
        if len(kinds) > 1:
            raise r.error("file mixes p/np labels with class ids")
    if expected is not None and len(vals) != expected:
        raise FormatError(r.path, len(r.lines), f"{len(vals)} labels for {expected} streamlines")
    return np.array(vals, dtype=np.int64)


# ----------------------------------------------------------------------


def _fmt17(v) -> str:
    return f"{float(v):.17g}"


def ckpt_text(model: Model) -> str:
    spec = model.spec
    meta = {
        "architecture": spec.arch,
        "blocks": json.dumps([list(b) for b in spec.blocks]),
        "encoder_width": spec.encoder_width,
        "head": json.dumps(list(spec.head)),
        "classes": spec.n_classes,
        "k": spec.k,
        "seed": spec.seed,
        "activation": f"leaky_relu {spec.slope!r}",
        "pooling": spec.pooling,
        "coord_scale": repr(spec.coord_scale),
    }
    out = ["VFCKPT 1"]
    out.extend(f"{k} {v}" for k, v in meta.items())
    params = model.parameters()
    out.append(f"params {len(params)}")
    for p in params:
        out.append(p.name)
        out.append(" ".join(str(d) for d in p.shape))
        out.append(" ".join(_fmt17(v) for v in p.value.ravel()))
    return "\n".join(out) + "\n"


def save_ckpt(path, model: Model):
    atomic_write(path, ckpt_text(model))


_META_KEYS = ("architecture", "blocks", "encoder_width", "head", "classes", "k", "seed",
              "activation", "pooling", "coord_scale")


def load_ckpt(path) -> Model:
    r = _Lines(path)
    if r.next("header").strip() != "VFCKPT 1":
        raise r.error("bad header, expected 'VFCKPT 1'")
    meta = {}
    for key in _META_KEYS:
        line = r.next(f"metadata '{key}'")
        k, _, v = line.partition(" ")
        if k != key:
            raise r.error(f"expected metadata '{key}', got {k!r}")
        meta[k] = v.strip()
    try:
        act, slope = meta["activation"].split()
        if act != "leaky_relu":
            raise ValueError(f"unsupported activation {act!r}")
        spec = ModelSpec(
            arch=meta["architecture"],
            blocks=tuple(tuple(b) for b in json.loads(meta["blocks"])),
            encoder_width=int(meta["encoder_width"]),
            head=tuple(json.loads(meta["head"])),
            n_classes=int(meta["classes"]),
            k=int(meta["k"]),
            seed=int(meta["seed"]),
            slope=float(slope),
            pooling=meta["pooling"],
            coord_scale=float(meta["coord_scale"]),
        )
    except (ValueError, TypeError, json.JSONDecodeError) as e:
        raise r.error(f"invalid metadata: {e}") from None
    model = build(spec)
    params = model.named_parameters()
    line = r.next("params count")
    k, _, v = line.partition(" ")
    if k != "params" or not v.strip().isdigit():
        raise r.error("expected 'params <count>'")
    if int(v) != len(params):
        raise r.error(f"checkpoint has {v} parameter blocks, architecture needs {len(params)}")
    seen = set()
    for _ in range(len(params)):
        name = r.next("parameter name").strip()
        if name not in params or name in seen:
            raise r.error(f"unexpected parameter {name!r}")
        seen.add(name)
        p = params[name]
        shape_line = r.next(f"shape of {name}")
        try:
            shape = tuple(int(d) for d in shape_line.split())
        except ValueError:
            raise r.error(f"non-integer shape for {name}") from None
        if shape != p.shape:
            raise r.error(f"shape {shape} for {name}, expected {p.shape}")
        p.value[...] = r.floats(f"values of {name}", p.size).reshape(shape)
    r.done()
    return model
