"""Minimal PE32/PE32+ reader, writer, and payload injector.

Parses just enough structure to round-trip files byte-exactly and to
support three injection modes: overwriting section slack, appending a
new section, and appending overlay bytes. Every header byte that is not
explicitly modeled is carried verbatim, so ``serialize(parse(f)) == f``
for any file the parser accepts.

No import tables, relocations, or checksums are modeled; injection only
needs the section geometry.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace

MZ_MAGIC = b"MZ"
PE_MAGIC = b"PE\x00\x00"
PE32_MAGIC = 0x10B
PE32PLUS_MAGIC = 0x20B

IMAGE_SCN_CNT_CODE = 0x00000020
IMAGE_SCN_CNT_INITIALIZED_DATA = 0x00000040
IMAGE_SCN_MEM_EXECUTE = 0x20000000
IMAGE_SCN_MEM_READ = 0x40000000
IMAGE_SCN_MEM_WRITE = 0x80000000

TEXT_CHARACTERISTICS = IMAGE_SCN_CNT_CODE | IMAGE_SCN_MEM_EXECUTE | IMAGE_SCN_MEM_READ
DATA_CHARACTERISTICS = IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ | IMAGE_SCN_MEM_WRITE

# Appended sections are readable initialized data, never executable.
NEW_SECTION_CHARACTERISTICS = IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ
DEFAULT_SECTION_NAME = b".pay"

_COFF_FMT = "<2H3I2H"      # 20 bytes
_SECTION_FMT = "<8s6I2HI"  # 40 bytes
_SECTION_SIZE = 40


class PeError(ValueError):
    """Base error for PE parsing and injection."""


class NotPe(PeError):
    """Input lacks the MZ / PE signatures."""


class Truncated(PeError):
    """Declared header or section ranges run past the end of the file."""


class Malformed(PeError):
    """Structurally inconsistent file (overlapping sections and the like)."""


class PayloadTooLarge(PeError):
    """Payload does not fit the chosen slack region."""


class NoHeaderSlack(PeError):
    """No room in the header area for one more section header."""


def _align_up(value: int, alignment: int) -> int:
    return -(-value // alignment) * alignment


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass
class CoffHeader:
    machine: int
    number_of_sections: int
    time_date_stamp: int
    pointer_to_symbol_table: int
    number_of_symbols: int
    size_of_optional_header: int
    characteristics: int

    @classmethod
    def unpack(cls, raw: bytes) -> "CoffHeader":
        return cls(*struct.unpack(_COFF_FMT, raw))

    def pack(self) -> bytes:
        return struct.pack(
            _COFF_FMT,
            self.machine,
            self.number_of_sections,
            self.time_date_stamp,
            self.pointer_to_symbol_table,
            self.number_of_symbols,
            self.size_of_optional_header,
            self.characteristics,
        )


@dataclass
class OptionalHeader:
    """Parsed optional header. ``raw`` keeps every byte for round-trips.

    Only ``size_of_image`` is ever rewritten; the remaining fields are
    read-only views into ``raw``.
    """

    raw: bytes
    magic: int
    section_alignment: int
    file_alignment: int
    size_of_image: int
    size_of_headers: int

    @classmethod
    def unpack(cls, raw: bytes) -> "OptionalHeader":
        if len(raw) < 64:
            raise Malformed("optional header too small to carry alignment fields")
        magic = struct.unpack_from("<H", raw, 0)[0]
        if magic not in (PE32_MAGIC, PE32PLUS_MAGIC):
            raise Malformed(f"unsupported optional header magic 0x{magic:x}")
        section_alignment = struct.unpack_from("<I", raw, 32)[0]
        file_alignment = struct.unpack_from("<I", raw, 36)[0]
        size_of_image = struct.unpack_from("<I", raw, 56)[0]
        size_of_headers = struct.unpack_from("<I", raw, 60)[0]
        return cls(raw, magic, section_alignment, file_alignment, size_of_image, size_of_headers)

    def pack(self) -> bytes:
        out = bytearray(self.raw)
        struct.pack_into("<I", out, 56, self.size_of_image)
        return bytes(out)


@dataclass
class SectionHeader:
    name: bytes
    virtual_size: int
    virtual_address: int
    size_of_raw_data: int
    pointer_to_raw_data: int
    pointer_to_relocations: int
    pointer_to_linenumbers: int
    number_of_relocations: int
    number_of_linenumbers: int
    characteristics: int

    @classmethod
    def unpack(cls, raw: bytes) -> "SectionHeader":
        return cls(*struct.unpack(_SECTION_FMT, raw))

    def pack(self) -> bytes:
        return struct.pack(
            _SECTION_FMT,
            self.name,
            self.virtual_size,
            self.virtual_address,
            self.size_of_raw_data,
            self.pointer_to_raw_data,
            self.pointer_to_relocations,
            self.pointer_to_linenumbers,
            self.number_of_relocations,
            self.number_of_linenumbers,
            self.characteristics,
        )

    @property
    def slack(self) -> int:
        return max(0, self.size_of_raw_data - self.virtual_size)

    @property
    def has_raw_data(self) -> bool:
        return self.pointer_to_raw_data > 0 and self.size_of_raw_data > 0

    @property
    def is_executable(self) -> bool:
        return bool(self.characteristics & IMAGE_SCN_MEM_EXECUTE)


@dataclass
class PeSection:
    header: SectionHeader
    gap_before: bytes  # file bytes between the previous raw range and this one
    data: bytes


@dataclass
class SlackRegion:
    section_index: int
    file_offset: int
    length: int


@dataclass
class InjectionRecord:
    mode: str  # "slack", "new_section", or "overlay"
    file_offset: int
    length: int
    original_digest: str
    modified_digest: str

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "file_offset": self.file_offset,
            "length": self.length,
            "original_digest": self.original_digest,
            "modified_digest": self.modified_digest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InjectionRecord":
        return cls(d["mode"], d["file_offset"], d["length"],
                   d["original_digest"], d["modified_digest"])


@dataclass
class PeLayout:
    dos_stub: bytes  # everything before the PE signature, DOS header included
    pe_offset: int
    coff: CoffHeader
    optional: OptionalHeader
    sections: list[PeSection]
    overlay: bytes

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += self.dos_stub
        out += PE_MAGIC
        out += self.coff.pack()
        out += self.optional.pack()
        for sec in self.sections:
            out += sec.header.pack()
        for sec in self.sections:
            if sec.header.has_raw_data:
                out += sec.gap_before
                out += sec.data
        out += self.overlay
        return bytes(out)

    def table_end(self) -> int:
        opt_end = self.pe_offset + 4 + 20 + self.coff.size_of_optional_header
        return opt_end + _SECTION_SIZE * self.coff.number_of_sections

    def executable_bytes(self) -> bytes:
        """Concatenated raw data of all MEM_EXECUTE sections."""
        return b"".join(s.data for s in self.sections
                        if s.header.is_executable and s.header.has_raw_data)


def parse(data: bytes) -> PeLayout:
    """Parse a PE file into a byte-exact structural view.

    Raises NotPe when the MZ/PE signatures are missing, Truncated when a
    declared range runs past the file, and Malformed for inconsistent
    section geometry.
    """
    if len(data) < 64:
        raise NotPe("file shorter than a DOS header")
    if data[:2] != MZ_MAGIC:
        raise NotPe("missing MZ signature")
    pe_offset = struct.unpack_from("<I", data, 0x3C)[0]
    if pe_offset + 4 > len(data):
        raise NotPe("e_lfanew points outside the file")
    if data[pe_offset:pe_offset + 4] != PE_MAGIC:
        raise NotPe("missing PE signature")

    coff_start = pe_offset + 4
    if coff_start + 20 > len(data):
        raise Truncated("COFF header runs past end of file")
    coff = CoffHeader.unpack(data[coff_start:coff_start + 20])

    opt_start = coff_start + 20
    opt_end = opt_start + coff.size_of_optional_header
    if opt_end > len(data):
        raise Truncated("optional header runs past end of file")
    optional = OptionalHeader.unpack(data[opt_start:opt_end])

    table_end = opt_end + _SECTION_SIZE * coff.number_of_sections
    if table_end > len(data):
        raise Truncated("section table runs past end of file")

    headers = [
        SectionHeader.unpack(data[opt_end + i * _SECTION_SIZE:opt_end + (i + 1) * _SECTION_SIZE])
        for i in range(coff.number_of_sections)
    ]

    sections: list[PeSection] = []
    cursor = table_end
    for hdr in headers:
        if not hdr.has_raw_data:
            sections.append(PeSection(hdr, b"", b""))
            continue
        ptr, size = hdr.pointer_to_raw_data, hdr.size_of_raw_data
        if ptr < table_end:
            raise Malformed("section raw data overlaps the headers")
        if ptr < cursor:
            raise Malformed("section raw ranges overlap or are out of order")
        if ptr + size > len(data):
            raise Truncated("section raw data runs past end of file")
        sections.append(PeSection(hdr, data[cursor:ptr], data[ptr:ptr + size]))
        cursor = ptr + size

    return PeLayout(
        dos_stub=data[:pe_offset],
        pe_offset=pe_offset,
        coff=coff,
        optional=optional,
        sections=sections,
        overlay=data[cursor:],
    )


def serialize(layout: PeLayout) -> bytes:
    return layout.to_bytes()


def find_slack(layout: PeLayout) -> list[SlackRegion]:
    """Regions where a section's raw size exceeds its virtual size.

    Returned largest first so callers can grab the best fit.
    """
    regions = []
    for i, sec in enumerate(layout.sections):
        hdr = sec.header
        if not hdr.has_raw_data:
            continue
        if hdr.size_of_raw_data > hdr.virtual_size:
            regions.append(SlackRegion(
                section_index=i,
                file_offset=hdr.pointer_to_raw_data + hdr.virtual_size,
                length=hdr.size_of_raw_data - hdr.virtual_size,
            ))
    regions.sort(key=lambda r: -r.length)
    return regions


def inject_slack(layout: PeLayout, payload: bytes,
                 region: SlackRegion) -> tuple[PeLayout, InjectionRecord]:
    """Overwrite the leading bytes of a slack region with the payload.

    The file length and every byte outside the overwritten range are
    unchanged.
    """
    if len(payload) > region.length:
        raise PayloadTooLarge(
            f"payload of {len(payload)} bytes exceeds slack of {region.length}")
    sec = layout.sections[region.section_index]
    hdr = sec.header
    lo = region.file_offset - hdr.pointer_to_raw_data
    if (region.file_offset < hdr.pointer_to_raw_data + hdr.virtual_size
            or region.file_offset + region.length > hdr.pointer_to_raw_data + hdr.size_of_raw_data):
        raise Malformed("slack region is outside the section's unused bytes")

    original = layout.to_bytes()
    new_data = sec.data[:lo] + payload + sec.data[lo + len(payload):]
    new_sections = list(layout.sections)
    new_sections[region.section_index] = replace(sec, data=new_data)
    new_layout = replace(layout, sections=new_sections)
    modified = new_layout.to_bytes()
    record = InjectionRecord("slack", region.file_offset, len(payload),
                             digest(original), digest(modified))
    return new_layout, record


def append_section(layout: PeLayout, payload: bytes,
                   name: bytes = DEFAULT_SECTION_NAME) -> tuple[PeLayout, InjectionRecord]:
    """Append the payload as a new non-executable section at end of file.

    The new 40-byte header consumes header slack; raw data lands after all
    existing file content, zero-padded to the file alignment. Original
    bytes keep their offsets.
    """
    if not payload:
        raise PeError("cannot append an empty section")
    if len(name) > 8:
        raise PeError("section name longer than 8 bytes")
    falign = layout.optional.file_alignment
    salign = layout.optional.section_alignment
    if falign <= 0 or salign <= 0:
        raise Malformed("zero alignment in optional header")

    if layout.optional.size_of_headers - layout.table_end() < _SECTION_SIZE:
        raise NoHeaderSlack("no room left in the header area for another section header")
    data_idx = [i for i, s in enumerate(layout.sections) if s.header.has_raw_data]
    if not data_idx or len(layout.sections[data_idx[0]].gap_before) < _SECTION_SIZE:
        raise NoHeaderSlack("header padding before first section is too small")

    original = layout.to_bytes()
    new_ptr = _align_up(len(original), falign)
    raw_size = _align_up(len(payload), falign)
    image_end = max(s.header.virtual_address + s.header.virtual_size
                    for s in layout.sections)
    new_va = _align_up(image_end, salign)

    new_header = SectionHeader(
        name=name.ljust(8, b"\x00"),
        virtual_size=len(payload),
        virtual_address=new_va,
        size_of_raw_data=raw_size,
        pointer_to_raw_data=new_ptr,
        pointer_to_relocations=0,
        pointer_to_linenumbers=0,
        number_of_relocations=0,
        number_of_linenumbers=0,
        characteristics=NEW_SECTION_CHARACTERISTICS,
    )
    new_section = PeSection(
        header=new_header,
        # old overlay plus alignment padding now sits between the last old
        # section and the new raw data
        gap_before=layout.overlay + b"\x00" * (new_ptr - len(original)),
        data=payload + b"\x00" * (raw_size - len(payload)),
    )

    sections = list(layout.sections)
    # the table grew by one header, which eats the first 40 padding bytes
    first = sections[data_idx[0]]
    sections[data_idx[0]] = replace(first, gap_before=first.gap_before[_SECTION_SIZE:])
    sections.append(new_section)

    new_layout = replace(
        layout,
        coff=replace(layout.coff, number_of_sections=layout.coff.number_of_sections + 1),
        optional=replace(layout.optional,
                         size_of_image=_align_up(new_va + len(payload), salign)),
        sections=sections,
        overlay=b"",
    )
    modified = new_layout.to_bytes()
    record = InjectionRecord("new_section", new_ptr, len(payload),
                             digest(original), digest(modified))
    # must reparse cleanly; also canonicalizes gap bookkeeping
    return parse(modified), record


def append_overlay(data: bytes, payload: bytes) -> tuple[bytes, InjectionRecord]:
    """Append payload bytes after the end of the file.

    Loaders ignore trailing bytes, so this works for PE files and plain
    corpus files alike.
    """
    modified = data + payload
    record = InjectionRecord("overlay", len(data), len(payload),
                             digest(data), digest(modified))
    return modified, record


@dataclass
class FixtureSection:
    name: bytes = b".data"
    data: bytes = b""
    slack: int = 0
    characteristics: int = DATA_CHARACTERISTICS


@dataclass
class FixtureSpec:
    sections: list[FixtureSection] = field(default_factory=list)
    file_alignment: int = 0x200
    section_alignment: int = 0x1000
    # None pads the header area up to file_alignment; an int pins the spare
    # bytes after the section table exactly (0 leaves no room to append)
    header_slack: int | None = None


def make_fixture(spec: FixtureSpec) -> bytes:
    """Emit a minimal, structurally valid PE32 image for tests.

    Purely a function of the spec: section bodies are caller-supplied and
    no clock or RNG is consulted.
    """
    if not spec.sections:
        raise PeError("fixture needs at least one section")
    falign, salign = spec.file_alignment, spec.section_alignment
    if falign < 16 or falign & (falign - 1):
        raise PeError("file_alignment must be a power of two of at least 16")
    if salign < falign:
        raise PeError("section_alignment must be at least file_alignment")
    for fs in spec.sections:
        if len(fs.name) > 8:
            raise PeError("section name longer than 8 bytes")
        if fs.slack < 0:
            raise PeError("negative slack")
    if spec.header_slack is not None and spec.header_slack < 0:
        raise PeError("negative header slack")

    n = len(spec.sections)
    base_used = 64 + 4 + 20 + 224 + _SECTION_SIZE * n
    if spec.header_slack is None:
        stub_pad = 0
        size_of_headers = _align_up(base_used, falign)
    else:
        total = base_used + spec.header_slack
        stub_pad = (-total) % falign
        size_of_headers = total + stub_pad
    e_lfanew = 64 + stub_pad

    # section geometry: exact requested slack, alignment-true raw sizes
    headers: list[SectionHeader] = []
    bodies: list[bytes] = []
    ptr = size_of_headers
    va = salign
    for fs in spec.sections:
        raw_size = _align_up(len(fs.data) + fs.slack, falign)
        virtual_size = raw_size - fs.slack
        headers.append(SectionHeader(
            name=fs.name.ljust(8, b"\x00"),
            virtual_size=virtual_size,
            virtual_address=va,
            size_of_raw_data=raw_size,
            pointer_to_raw_data=ptr,
            pointer_to_relocations=0,
            pointer_to_linenumbers=0,
            number_of_relocations=0,
            number_of_linenumbers=0,
            characteristics=fs.characteristics,
        ))
        bodies.append(fs.data + b"\x00" * (raw_size - len(fs.data)))
        ptr += raw_size
        va = _align_up(va + max(virtual_size, 1), salign)
    size_of_image = va

    exec_hdrs = [h for h in headers if h.is_executable]
    data_hdrs = [h for h in headers if not h.is_executable]
    opt = bytearray(224)
    struct.pack_into("<HBB", opt, 0, PE32_MAGIC, 14, 0)
    struct.pack_into("<III", opt, 4,
                     sum(h.size_of_raw_data for h in exec_hdrs),
                     sum(h.size_of_raw_data for h in data_hdrs),
                     0)
    struct.pack_into("<III", opt, 16,
                     exec_hdrs[0].virtual_address if exec_hdrs else 0,
                     exec_hdrs[0].virtual_address if exec_hdrs else 0,
                     data_hdrs[0].virtual_address if data_hdrs else 0)
    struct.pack_into("<III", opt, 28, 0x400000, salign, falign)
    struct.pack_into("<HHHHHH", opt, 40, 6, 0, 0, 0, 6, 0)
    struct.pack_into("<III", opt, 52, 0, size_of_image, size_of_headers)
    struct.pack_into("<IHH", opt, 64, 0, 3, 0)
    struct.pack_into("<IIIIII", opt, 72, 0x100000, 0x1000, 0x100000, 0x1000, 0, 16)

    coff = CoffHeader(
        machine=0x14C,
        number_of_sections=n,
        time_date_stamp=0,
        pointer_to_symbol_table=0,
        number_of_symbols=0,
        size_of_optional_header=224,
        characteristics=0x0102,  # EXECUTABLE_IMAGE | 32BIT_MACHINE
    )

    dos = bytearray(64)
    dos[:2] = MZ_MAGIC
    struct.pack_into("<I", dos, 0x3C, e_lfanew)

    out = bytearray()
    out += dos
    out += b"\x00" * stub_pad
    out += PE_MAGIC
    out += coff.pack()
    out += opt
    for hdr in headers:
        out += hdr.pack()
    out += b"\x00" * (size_of_headers - len(out))
    for body in bodies:
        out += body
    return bytes(out)
