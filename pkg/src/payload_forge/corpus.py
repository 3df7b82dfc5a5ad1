"""Deterministic synthetic corpus of benign and malicious byte files.

Benign files are draws from a fixed order-1 Markov chain over bytes that
mimics mixed text/code (null runs, ASCII ranges), keeping their entropy
around 4-6 bits per byte instead of 8. Malicious files are the same
background with a handful of planted family signature strings. Every
file is a pure function of (spec, seed, index), so regeneration is
byte-identical and per-file work could run in parallel without changing
any output.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import pe

# Transition rows are quantized to counts out of this total, which makes
# the chain exactly reproducible and cheap to sample from a lookup table.
_CHAIN_RESOLUTION = 4096

_BENIGN, _MALICIOUS = 0, 1


class CorpusError(ValueError):
    pass


def derived_seed(*parts) -> int:
    """Stable 64-bit sub-seed from a tuple of labels and integers."""
    text = "/".join(str(p) for p in parts)
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


@dataclass
class ByteFile:
    data: bytes
    name: str | None = None
    label: int | None = None
    family: int | None = None

    @classmethod
    def read(cls, path: Path | str, label: int | None = None,
             family: int | None = None) -> "ByteFile":
        p = Path(path)
        return cls(p.read_bytes(), p.name, label, family)


@dataclass
class CorpusSpec:
    n_benign: int = 1000
    n_malicious: int = 1000
    families: int = 5
    length_range: tuple[int, int] = (2048, 65536)
    motifs_per_family: int = 3
    motif_len_range: tuple[int, int] = (96, 160)
    plant_count_range: tuple[int, int] = (3, 10)
    wrap_pe: bool = False
    seed: int = 0

    def validate(self, conv_window: int | None = None) -> None:
        for name in ("n_benign", "n_malicious", "families", "motifs_per_family"):
            if getattr(self, name) <= 0 and not (name == "n_malicious" and self.n_malicious == 0) \
                    and not (name == "n_benign" and self.n_benign == 0):
                raise CorpusError(f"{name} must be positive")
        for name in ("length_range", "motif_len_range", "plant_count_range"):
            lo, hi = getattr(self, name)
            if lo <= 0 or lo > hi:
                raise CorpusError(f"invalid {name}: ({lo}, {hi})")
        if self.motif_len_range[1] * 2 > self.length_range[0] // 4:
            raise CorpusError("motifs too long for the shortest files")
        if conv_window is not None and self.length_range[0] < 4 * conv_window:
            raise CorpusError(
                f"minimum file length {self.length_range[0]} is below four "
                f"convolution windows ({4 * conv_window})")


@dataclass
class ManifestEntry:
    path: str
    label: int
    family: int | None
    length: int
    sha256: str

    def to_dict(self) -> dict:
        return {"path": self.path, "label": self.label, "family": self.family,
                "length": self.length, "sha256": self.sha256}


@dataclass
class Manifest:
    seed: int
    split: str
    entries: list[ManifestEntry] = field(default_factory=list)

    def save(self, path: Path | str) -> None:
        with open(path, "w") as f:
            f.write(json.dumps({"seed": self.seed, "split": self.split}) + "\n")
            for e in self.entries:
                f.write(json.dumps(e.to_dict()) + "\n")

    @classmethod
    def load(cls, path: Path | str) -> "Manifest":
        seed, split, entries = 0, "full", []
        with open(path) as f:
            for line in f:
                obj = json.loads(line)
                if "path" in obj:
                    entries.append(ManifestEntry(obj["path"], obj["label"],
                                                 obj["family"], obj["length"], obj["sha256"]))
                else:
                    seed, split = obj["seed"], obj["split"]
        return cls(seed, split, entries)

    def verify_digests(self, root: Path | str) -> bool:
        root = Path(root)
        return all(
            hashlib.sha256((root / e.path).read_bytes()).hexdigest() == e.sha256
            for e in self.entries
        )


@lru_cache(maxsize=1)
def _transition_rows() -> list[bytes]:
    """Per-state lookup rows for the background byte chain.

    Row s holds _CHAIN_RESOLUTION next-state bytes; sampling a uniform
    index into it realizes the transition distribution exactly.
    """
    states = np.arange(256)
    w = np.full((256, 256), 0.025)
    w[:, 0] += 11.0                    # null bytes are common everywhere
    w[:, 0x20:0x7F] += 0.38            # printable ASCII band
    w[states, states] += 6.0           # runs of the same byte
    for d in (1, 2, 3):
        w[states[:-d], states[d:]] += 2.0
        w[states[d:], states[:-d]] += 2.0
    w[0, 0] += 180.0                   # long null runs once inside one

    rows = []
    for s in range(256):
        scaled = w[s] * (_CHAIN_RESOLUTION / w[s].sum())
        counts = np.floor(scaled).astype(np.int64)
        short = _CHAIN_RESOLUTION - counts.sum()
        order = np.argsort(-(scaled - counts), kind="stable")
        counts[order[:short]] += 1
        rows.append(np.repeat(np.arange(256, dtype=np.uint8), counts).tobytes())
    return rows


def _background(n: int, rng: np.random.Generator) -> bytes:
    rows = _transition_rows()
    picks = rng.integers(0, _CHAIN_RESOLUTION, size=n).tolist()
    out = bytearray(n)
    state = int(rng.integers(0, 256))
    for i, u in enumerate(picks):
        state = rows[state][u]
        out[i] = state
    return bytes(out)


def _draw_motif_set(rng: np.random.Generator, count: int,
                    len_range: tuple[int, int], byte_lo: int, byte_hi: int,
                    seen: set[bytes]) -> list[bytes]:
    out = []
    for _ in range(count):
        while True:
            length = int(rng.integers(len_range[0], len_range[1] + 1))
            m = rng.integers(byte_lo, byte_hi, size=length, dtype=np.uint8).tobytes()
            if m not in seen:
                seen.add(m)
                out.append(m)
                break
    return out


def family_motifs(spec: CorpusSpec) -> list[list[bytes]]:
    """Fixed signature strings per family, drawn once from the seed.

    Motif bytes live in the 0x80-0xFF range the background chain rarely
    emits, which keeps labels clean and the detection task learnable.
    """
    rng = np.random.Generator(np.random.PCG64(derived_seed(spec.seed, "motifs")))
    seen: set[bytes] = set()
    return [_draw_motif_set(rng, spec.motifs_per_family, spec.motif_len_range,
                            0x80, 0x100, seen)
            for _ in range(spec.families)]


def benign_markers(spec: CorpusSpec) -> list[bytes]:
    """Shared signature strings planted in every benign file.

    Real benign software carries its own regularities (vendor strings,
    runtime tables); without an analogue the detector learns nothing but
    malicious evidence and no byte sequence can pull a score down. The
    markers use the sparse 0x01-0x1F control-byte range, disjoint from
    both the motif range and most of the background mass.
    """
    rng = np.random.Generator(np.random.PCG64(derived_seed(spec.seed, "benign-markers")))
    return _draw_motif_set(rng, spec.motifs_per_family, spec.motif_len_range,
                           0x01, 0x08, set())


def _contains_any(data: bytes, motifs: list[list[bytes]]) -> bool:
    return any(data.find(m) >= 0 for fam in motifs for m in fam)


def _wrap_in_pe(body: bytes, rng: np.random.Generator) -> bytes:
    text = _background(1024, rng)
    spec = pe.FixtureSpec(sections=[
        pe.FixtureSection(b".text", text, slack=0,
                          characteristics=pe.TEXT_CHARACTERISTICS),
        pe.FixtureSection(b".data", body, slack=0x200,
                          characteristics=pe.DATA_CHARACTERISTICS),
    ])
    return pe.make_fixture(spec)


def _plant(body: bytearray, items: list[bytes], head: int,
           rng: np.random.Generator) -> None:
    taken: list[tuple[int, int]] = []
    for m in items:
        for _ in range(100):
            pos = int(rng.integers(head, len(body) - len(m) + 1))
            if all(pos + len(m) <= a or pos >= b for a, b in taken):
                body[pos:pos + len(m)] = m
                taken.append((pos, pos + len(m)))
                break


def _gen_file(spec: CorpusSpec, index: int, label: int, family: int | None,
              motifs: list[list[bytes]], markers: list[bytes]) -> bytes:
    min_len, max_len = spec.length_range
    lo_m, hi_m = spec.motif_len_range
    head = min_len // 4  # keep plants off the file head
    for retry in range(100):
        rng = np.random.Generator(np.random.PCG64(
            derived_seed(spec.seed, "file", index, retry)))
        n = int(rng.integers(min_len, max_len + 1))
        body = bytearray(_background(n, rng))
        plants = int(rng.integers(spec.plant_count_range[0],
                                  spec.plant_count_range[1] + 1))
        if label == _MALICIOUS:
            pool = motifs[family]
            items = [pool[int(rng.integers(0, len(pool)))] for _ in range(plants)]
        else:
            items = [markers[int(rng.integers(0, len(markers)))] for _ in range(plants)]
            # high-byte decoy bursts: benign files also carry motif-like
            # regions, so raw high-byte density alone cannot separate the
            # classes and marker presence carries the benign evidence
            for _ in range(int(rng.integers(2, 7))):
                length = int(rng.integers(lo_m, hi_m + 1))
                items.append(rng.integers(0x80, 0x100, size=length,
                                          dtype=np.uint8).tobytes())
            # full-range random blobs, the stand-in for the compressed
            # resources real benign binaries carry; unlike the fixed
            # markers these are fresh per file, so the detector has to
            # learn the texture rather than memorize strings
            for _ in range(1 + min(4, n // 8192)):
                length = int(rng.integers(128, 385))
                items.append(rng.integers(0, 256, size=length,
                                          dtype=np.uint8).tobytes())
        _plant(body, items, head, rng)

        out = _wrap_in_pe(bytes(body), rng) if spec.wrap_pe else bytes(body)
        # resample cross-class collisions so labels stay sound
        if label == _BENIGN and _contains_any(out, motifs):
            continue
        if label == _MALICIOUS and _contains_any(out, [markers]):
            continue
        return out
    raise CorpusError(f"could not generate a collision-free file (index {index})")


def gen_corpus(spec: CorpusSpec, out_dir: Path | str) -> Manifest:
    """Write the corpus and its manifest; byte-identical per (spec, seed)."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    motifs = family_motifs(spec)
    markers = benign_markers(spec)

    entries = []
    ext = ".exe" if spec.wrap_pe else ".bin"
    total = spec.n_benign + spec.n_malicious
    for index in range(total):
        label = _BENIGN if index < spec.n_benign else _MALICIOUS
        family = (index - spec.n_benign) % spec.families if label == _MALICIOUS else None
        data = _gen_file(spec, index, label, family, motifs, markers)
        tag = "benign" if label == _BENIGN else "malicious"
        name = f"{tag}_{index:06d}{ext}"
        (out / name).write_bytes(data)
        entries.append(ManifestEntry(name, label, family, len(data),
                                     hashlib.sha256(data).hexdigest()))

    manifest = Manifest(seed=spec.seed, split="full", entries=entries)
    manifest.save(out / "manifest.jsonl")
    return manifest


def split(manifest: Manifest, ratios: tuple[float, float, float],
          seed: int) -> tuple[Manifest, Manifest, Manifest]:
    """Seed-deterministic stratified split into train/val/test.

    Stratifying per label keeps each split's class balance within a few
    points of the global one even for small manifests.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"ratios must sum to 1, got {ratios}")
    if any(r < 0 for r in ratios):
        raise CorpusError("ratios must be non-negative")

    rng = np.random.Generator(np.random.PCG64(derived_seed(seed, "split")))
    assignment = {}
    for label in (0, 1):
        idx = [i for i, e in enumerate(manifest.entries) if e.label == label]
        order = rng.permutation(len(idx))
        b1 = int(ratios[0] * len(idx) + 0.5)
        b2 = int((ratios[0] + ratios[1]) * len(idx) + 0.5)
        for rank, j in enumerate(order):
            assignment[idx[j]] = 0 if rank < b1 else (1 if rank < b2 else 2)

    names = ("train", "val", "test")
    parts = [Manifest(seed=seed, split=name) for name in names]
    for i, entry in enumerate(manifest.entries):
        parts[assignment[i]].entries.append(entry)
    return tuple(parts)


def load_files(manifest: Manifest, root: Path | str) -> list[ByteFile]:
    root = Path(root)
    return [ByteFile((root / e.path).read_bytes(), e.path, e.label, e.family)
            for e in manifest.entries]
