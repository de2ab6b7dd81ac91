"""On-disk cache for covers, solver results and certificates.

Every entry is a single file whose body carries a SHA-256 digest of its
payload, so edits made outside the tool are caught by ``verify``.  Writes go
through a temporary file and an atomic rename; one process writes, any number
read.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .fractals import IfsSystem, net_cover, verify_approximation
from .geometry import Ball

FORMAT = "confmod-cache/1"
COVER_FORMAT = "confmod-cover 1"
ENV_VAR = "CONFMOD_CACHE_DIR"


class CacheCorrupted(RuntimeError):
    def __init__(self, path, invariant, detail=""):
        super().__init__(f"{path}: {invariant} failed{': ' + detail if detail else ''}")
        self.path = str(path)
        self.invariant = invariant
        self.detail = detail


def default_cache_dir() -> Path:
    env = os.environ.get(ENV_VAR)
    if env:
        return Path(env)
    return Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "confmod"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _atomic_write(path: Path, data: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="ascii", newline="\n") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- cover text format --------------------------------------------------------------

def cover_to_text(cover, ifs: IfsSystem, k: int, inflation) -> str:
    """Structured text: header lines, then one ``x y [z] r`` line of fractions per ball."""
    lines = [COVER_FORMAT, f"ifs_hash {ifs.content_hash}", f"ifs_name {ifs.name}", f"level {k}",
             f"inflation {Fraction(inflation)}", f"kappa {cover.kappa}", f"level_r {cover.level_r}",
             f"count {len(cover.balls)}"]
    body = [" ".join(str(c) for c in b.center) + " " + str(b.radius) for b in cover.balls]
    digest = _digest("\n".join(body))
    return "\n".join(lines + [f"digest {digest}"] + body) + "\n"


def cover_from_text(text: str, ifs: IfsSystem):
    """Rebuild the cover; raises CacheCorrupted naming the first broken invariant."""
    rows = text.rstrip("\n").split("\n")
    if not rows or rows[0] != COVER_FORMAT:
        raise CacheCorrupted("<cover>", "format-header")
    if len(rows) < 9:
        raise CacheCorrupted("<cover>", "format-header", "truncated header")
    head = dict(r.partition(" ")[::2] for r in rows[1:9])
    i = 9
    body = rows[i:]
    if _digest("\n".join(body)) != head.get("digest"):
        raise CacheCorrupted("<cover>", "checksum", "ball list does not match its digest")
    if head.get("ifs_hash") != ifs.content_hash:
        raise CacheCorrupted("<cover>", "ifs-hash", "cover was generated for another system")
    if int(head.get("count", -1)) != len(body):
        raise CacheCorrupted("<cover>", "ball-count")
    balls = []
    for line in body:
        parts = [Fraction(t) for t in line.split()]
        balls.append(Ball(tuple(parts[:-1]), parts[-1]))
    k = int(head["level"])
    lam = Fraction(head["inflation"])
    ref = net_cover(ifs, k, lam)
    if tuple(balls) != ref.balls:
        raise CacheCorrupted("<cover>", "matches-regeneration", "cached balls differ from a fresh net cover")
    return ref


# -- the store -------------------------------------------------------------------------

@dataclass
class Finding:
    path: str
    kind: str
    invariant: str
    ok: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return {"path": self.path, "kind": self.kind, "invariant": self.invariant, "ok": self.ok,
                "detail": self.detail}


@dataclass
class ArtifactStore:
    root: Path = field(default_factory=default_cache_dir)

    def __post_init__(self):
        self.root = Path(self.root)

    @staticmethod
    def kind_of(key: str) -> str:
        head = key.split("|", 1)[0]
        return head if head.isidentifier() else "result"

    def path_for(self, key: str, kind: str | None = None) -> Path:
        kind = kind or self.kind_of(key)
        return self.root / kind / (hashlib.sha256(key.encode()).hexdigest()[:32] + ".json")

    def put(self, key: str, payload, kind: str | None = None) -> Path:
        kind = kind or self.kind_of(key)
        body = canonical_json(payload)
        env = {"format": FORMAT, "kind": kind, "key": key, "digest": _digest(body), "payload": payload}
        path = self.path_for(key, kind)
        _atomic_write(path, canonical_json(env) + "\n")
        return path

    def get(self, key: str, kind: str | None = None):
        path = self.path_for(key, kind)
        if not path.exists():
            return None
        env = self._read(path)
        if env["key"] != key:
            raise CacheCorrupted(path, "key-match")
        return env["payload"]

    def _read(self, path: Path) -> dict:
        try:
            env = json.loads(path.read_text(encoding="ascii"))
        except (ValueError, UnicodeDecodeError) as e:
            raise CacheCorrupted(path, "parse", str(e)) from None
        if not isinstance(env, dict) or env.get("format") != FORMAT:
            raise CacheCorrupted(path, "format-header")
        if _digest(canonical_json(env.get("payload"))) != env.get("digest"):
            raise CacheCorrupted(path, "checksum", "payload does not match its digest")
        if self.path_for(env["key"], env["kind"]) != path:
            raise CacheCorrupted(path, "key-match", "file name does not match the stored key")
        return env

    # covers are kept in their own text format
    def cover_path(self, ifs: IfsSystem, k: int, inflation=1) -> Path:
        lam = Fraction(inflation)
        return self.root / "cover" / f"{ifs.content_hash}-{k}-{lam.numerator}_{lam.denominator}.cover"

    def put_cover(self, ifs: IfsSystem, k: int, inflation=1, cover=None) -> Path:
        cover = cover if cover is not None else net_cover(ifs, k, inflation)
        path = self.cover_path(ifs, k, inflation)
        _atomic_write(path, cover_to_text(cover, ifs, k, inflation))
        return path

    def get_cover(self, ifs: IfsSystem, k: int, inflation=1):
        path = self.cover_path(ifs, k, inflation)
        if not path.exists():
            return None
        try:
            return cover_from_text(path.read_text(encoding="ascii"), ifs)
        except CacheCorrupted as e:
            raise CacheCorrupted(path, e.invariant, e.detail) from None

    def entries(self):
        if not self.root.exists():
            return []
        return sorted(p for p in self.root.rglob("*") if p.is_file() and not p.name.startswith(".tmp-"))

    def verify(self, systems=(), deep: bool = True) -> list:
        """Re-run the invariant audits on every cached artifact.

        ``systems`` supplies the IFS definitions needed to re-check covers;
        covers of unknown systems are reported as unverifiable.
        """
        by_hash = {s.content_hash: s for s in systems}
        out = []
        for path in self.entries():
            if path.suffix == ".cover":
                out.extend(self._verify_cover(path, by_hash, deep))
            elif path.suffix == ".json":
                out.extend(self._verify_json(path))
            else:
                out.append(Finding(str(path), "unknown", "file-type", False, "unexpected file in cache"))
        return out

    def _verify_cover(self, path, by_hash, deep):
        text = path.read_text(encoding="ascii", errors="replace")
        h = next((ln.split(" ", 1)[1] for ln in text.split("\n")[:4] if ln.startswith("ifs_hash ")), None)
        ifs = by_hash.get(h)
        if ifs is None:
            return [Finding(str(path), "cover", "ifs-known", False, f"no system with hash {h}")]
        try:
            cover = cover_from_text(text, ifs)
        except (CacheCorrupted, ValueError, KeyError, ZeroDivisionError) as e:
            inv = e.invariant if isinstance(e, CacheCorrupted) else "parse"
            return [Finding(str(path), "cover", inv, False, getattr(e, "detail", str(e)))]
        res = [Finding(str(path), "cover", "checksum", True), Finding(str(path), "cover", "matches-regeneration", True)]
        if deep:
            rep = verify_approximation(cover)
            res.append(Finding(str(path), "cover", "approximation", rep.passed, ", ".join(rep.failing())))
        return res

    def _verify_json(self, path):
        try:
            env = self._read(path)
        except CacheCorrupted as e:
            return [Finding(str(path), "json", e.invariant, False, e.detail)]
        kind, p = env["kind"], env["payload"]
        res = [Finding(str(path), kind, "checksum", True)]
        if kind == "certificate":
            ok = isinstance(p, dict) and p.get("verified") is True and p.get("energy", math.inf) <= p.get("eps", -1) \
                and Fraction(p.get("delta_minus", "0")) < Fraction(p.get("delta_plus", "0"))
            res.append(Finding(str(path), kind, "certificate-energy", bool(ok)))
        elif kind == "decay":
            v = p.get("value") if isinstance(p, dict) else None
            ok = isinstance(v, (int, float)) and math.isfinite(v) and v >= 0
            res.append(Finding(str(path), kind, "modulus-nonnegative", bool(ok)))
        return res
