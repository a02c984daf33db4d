"""Image container: the stand-in for the stripped (diversified) binary.

A tagged-section file:

    magic "DIMG" | version u8 | sections...
    section: name_len u8 | name | payload_len u32 LE | payload

Sections written by the build drivers: "meta" (module identity),
"crash" (per-function frame and block placement data used by the crash
simulator), "text" (image bytes).  The delta packer appends a "dbpd"
section; appending never touches existing section bytes.

Code bytes are a fixed filler word per instruction, data blocks are
zeros and pools hold their constants little-endian, so the container is
deterministic and code regions are byte-comparable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from divsym.errors import DeltaFormatError
from divsym.progmodel import INSTR_BYTES

MAGIC = b"DIMG"
VERSION = 1
FILLER_WORD = 0xE1A00000  # mov r0, r0


@dataclass(frozen=True)
class CrashBlock:
    index: int
    addr: int
    pre_extras: int
    gaps: tuple            # 1-based NOP gap indices applied to this block


@dataclass(frozen=True)
class CrashFn:
    identifier: str
    name: str
    base: int
    size: int
    padding: int
    blocks: tuple


@dataclass(frozen=True)
class ImageInfo:
    module_name: str
    module_id: str
    functions: tuple       # CrashFn in placement order
    text: bytes


def pack_sections(sections):
    out = [MAGIC, bytes([VERSION])]
    for name, payload in sections:
        out.append(_section_record(name, payload))
    return b"".join(out)


def _section_record(name, payload):
    nb = name.encode("ascii")
    return bytes([len(nb)]) + nb + struct.pack("<I", len(payload)) + payload


def iter_sections(blob):
    if blob[:4] != MAGIC:
        raise DeltaFormatError("bad image magic")
    if blob[4] != VERSION:
        raise DeltaFormatError("unsupported image version %d" % blob[4])
    i = 5
    while i < len(blob):
        nlen = blob[i]
        i += 1
        name = blob[i:i + nlen].decode("ascii")
        i += nlen
        if i + 4 > len(blob):
            raise DeltaFormatError("truncated image section header")
        plen = struct.unpack("<I", blob[i:i + 4])[0]
        i += 4
        if i + plen > len(blob):
            raise DeltaFormatError("truncated image section %s" % name)
        yield name, blob[i:i + plen]
        i += plen


def append_section(blob, name, payload):
    if blob[:4] != MAGIC:
        raise DeltaFormatError("bad image magic")
    return blob + _section_record(name, payload)


def find_section(blob, name):
    found = None
    for n, payload in iter_sections(blob):
        if n == name:
            found = payload
    if found is None:
        raise DeltaFormatError("image has no %s section" % name)
    return found


def crash_info(result, decisions=None, module_name=""):
    """ImageInfo straight from a layout result (library-side shortcut)."""
    nop_map = {}
    pad_map = {}
    if decisions is not None:
        for ident, bi, gaps in decisions.nops:
            nop_map[(ident, bi)] = tuple(gaps)
        pad_map = dict(decisions.paddings)
    fns = []
    for fl in result.image:
        blocks = []
        for r in fl.regions:
            if r.kind != "code":
                continue
            blocks.append(CrashBlock(r.block_index, r.address, r.pre_extras,
                                     nop_map.get((fl.identifier, r.block_index), ())))
        fns.append(CrashFn(fl.identifier, fl.name, fl.base, fl.size,
                           pad_map.get(fl.identifier, fl.padding),
                           tuple(blocks)))
    return ImageInfo(module_name, result.symfile.module_id, tuple(fns),
                     _text_bytes(result))


def _text_bytes(result):
    if not result.image:
        return b""
    end = max(fl.base + fl.size for fl in result.image)
    buf = bytearray(end)
    filler = struct.pack("<I", FILLER_WORD)
    for fl in result.image:
        for r in fl.regions:
            if r.kind == "code":
                buf[r.address:r.address + r.size] = filler * (r.size // INSTR_BYTES)
            elif r.kind == "pool":
                for i, c in enumerate(r.consts):
                    off = r.address + 4 * i
                    buf[off:off + 4] = struct.pack("<I", c)
    return bytes(buf)


def write_image(result, decisions=None, module_name=""):
    info = crash_info(result, decisions, module_name)
    meta = "IMAGE v1 %s\nmoduleid %s\n" % (info.module_name, info.module_id)
    crash = _emit_crash_meta(info)
    return pack_sections([("meta", meta.encode()),
                          ("crash", crash.encode()),
                          ("text", info.text)])


def read_image(blob):
    meta = find_section(blob, "meta").decode()
    lines = meta.splitlines()
    if not lines or not lines[0].startswith("IMAGE v1 "):
        raise DeltaFormatError("bad image meta header")
    module_name = lines[0].split(" ", 2)[2]
    module_id = ""
    for ln in lines[1:]:
        if ln.startswith("moduleid "):
            module_id = ln.split(" ", 1)[1]
    fns = _parse_crash_meta(find_section(blob, "crash").decode())
    return ImageInfo(module_name, module_id, fns, find_section(blob, "text"))


def _emit_crash_meta(info):
    out = []
    for fn in info.functions:
        out.append("CRASHFN base=%x size=%x pad=%d name=%s id=%s"
                   % (fn.base, fn.size, fn.padding, fn.name, fn.identifier))
        for b in fn.blocks:
            gaps = ",".join(str(g) for g in b.gaps) or "-"
            out.append("CRASHBLOCK %d addr=%x pre=%d nops=%s"
                       % (b.index, b.addr, b.pre_extras, gaps))
    return "\n".join(out) + "\n" if out else ""


def _parse_crash_meta(text):
    fns = []
    cur = None
    blocks = None

    def close():
        nonlocal cur
        if cur is not None:
            fns.append(CrashFn(cur["id"], cur["name"], cur["base"], cur["size"],
                               cur["pad"], tuple(blocks)))
            cur = None

    for ln in text.splitlines():
        if not ln.strip():
            continue
        toks = ln.split()
        if toks[0] == "CRASHFN":
            close()
            kv = dict(t.split("=", 1) for t in toks[1:4])
            cur = {"base": int(kv["base"], 16), "size": int(kv["size"], 16),
                   "pad": int(kv["pad"]),
                   "name": ln.split("name=", 1)[1].split(" id=", 1)[0],
                   "id": ln.split("id=", 1)[1]}
            blocks = []
        elif toks[0] == "CRASHBLOCK":
            kv = dict(t.split("=", 1) for t in toks[2:])
            gaps = () if kv["nops"] == "-" else tuple(
                int(g) for g in kv["nops"].split(","))
            blocks.append(CrashBlock(int(toks[1]), int(kv["addr"], 16),
                                     int(kv["pre"]), gaps))
        else:
            raise DeltaFormatError("unknown crash meta record %r" % toks[0])
    close()
    return tuple(fns)
