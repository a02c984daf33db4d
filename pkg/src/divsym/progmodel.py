"""Synthetic ARM-like program model and its deterministic layout engine.

The model describes functions as ordered code/data blocks with stack
frames; the layout engine turns a model plus a function order into a
concrete image and symbol file.  All instructions are 4 bytes (ARM, no
Thumb).  The engine reproduces the indirect effects that make
server-side replication imperfect:

* allocation constants are split greedily into rotated-8-bit-encodable
  chunks, so frame-size changes can change prologue/epilogue length;
* stack accesses whose chosen base offset exceeds the LD/ST immediate
  range cost one extra materialization instruction;
* constants are loaded from forward literal pools placed by a
  reach-limited fixpoint pass, so code growth moves pools.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, replace

from divsym._speed import arm_imm_encodable
from divsym.errors import LayoutError, ModelError
from divsym.prng import Prng, function_reseed, mix64
from divsym.symfile import CfiInitRecord, FuncRecord, LineRecord, SymbolFile

INSTR_BYTES = 4
POOL_REACH = 4096
LDST_RANGE = 4095
FP_BIAS = 4
ALIGNMENTS = (4, 8, 16)
SAVEABLE = ("r4", "r5", "r6", "r7", "r8", "r9", "r10", "r11", "lr")

# All values expressible as an 8-bit constant rotated right by an even
# amount, sorted; used for the greedy allocation-constant split.
_ENCODABLE = sorted({((b >> r) | (b << (32 - r))) & 0xFFFFFFFF
                     for b in range(256) for r in range(0, 32, 2)})


@dataclass(frozen=True)
class BuildOptions:
    default_padding: bool = True
    sp_fp_opt: bool = False
    nop_num: int = 1          # NOP probability numerator
    nop_den: int = 5          # NOP probability denominator
    desync_num: int = 0       # desync injection rate numerator
    desync_den: int = 100
    pad_scheme: bool = True   # randomize stack padding
    shuffle_scheme: bool = True  # randomize function order


@dataclass(frozen=True)
class LineSpan:
    line: int
    filenum: int
    instrs: int


@dataclass(frozen=True)
class BlockModel:
    kind: str                 # "code" | "data"
    index: int
    spans: tuple = ()         # code: (LineSpan, ...)
    consts: tuple = ()        # code: 32-bit constants needing pool loads
    byte_size: int = 0        # data only
    epilogue: bool = False

    @property
    def instr_count(self):
        return sum(s.instrs for s in self.spans)


@dataclass(frozen=True)
class StackAccess:
    offset: int               # bytes below the top of the local area
    count: int
    source_line: int


@dataclass(frozen=True)
class FrameModel:
    local_size: int = 0
    callee_saved: tuple = ()
    accesses: tuple = ()
    padding: int = 0          # 0 in source models; set by diversification


@dataclass(frozen=True)
class FunctionModel:
    name: str
    object_name: str
    section_name: str
    alignment: int
    has_fp: bool
    frame: FrameModel
    blocks: tuple
    call_sites: tuple = ()    # ((block_index, instr_index, callee_name), ...)
    param_size: int = 0

    @property
    def identifier(self):
        return "%s@%s:%s" % (self.name, self.object_name, self.section_name)


@dataclass(frozen=True)
class ProgramModel:
    module_name: str
    files: tuple              # ((filenum, path), ...)
    functions: tuple


@dataclass(frozen=True)
class Region:
    address: int
    size: int
    kind: str                 # "code" | "data" | "pool"
    block_index: int | None
    n_instrs: int = 0         # code: laid-out instruction count
    model_instrs: int = 0     # code: model (body) instruction count
    pre_extras: int = 0       # code: prologue instructions before the body
    epilogue: bool = False
    consts: tuple = ()        # pool entries in placement order


@dataclass(frozen=True)
class FunctionLayout:
    identifier: str
    name: str
    alignment: int
    base: int
    size: int
    regions: tuple
    lines: tuple
    cfi: CfiInitRecord
    local_size: int
    saved_count: int
    has_fp: bool
    padding: int

    def code_regions(self):
        return tuple(r for r in self.regions if r.kind == "code")


@dataclass(frozen=True)
class LayoutResult:
    image: tuple              # FunctionLayout in placement order
    symfile: SymbolFile
    pool_placements: tuple    # ((identifier, after_block_index, byte_size), ...)


def stack_alloc_instrs(total):
    """Number of sp-adjust instructions for a total allocation.

    Greedy split: repeatedly subtract the largest encodable value not
    above the remainder.
    """
    if total < 0 or total % 4:
        raise ModelError("allocation size %d not a non-negative multiple of 4" % total)
    count = 0
    rem = total
    while rem:
        i = bisect.bisect_right(_ENCODABLE, rem) - 1
        chunk = _ENCODABLE[i]
        if chunk == 0:
            raise LayoutError("no encodable chunk for remainder %d" % rem)
        rem -= chunk
        count += 1
    return count


def access_instrs(frame, options, has_fp=False):
    """Total LD/ST instruction count for the frame's stack accesses."""
    return sum(acc.count * _access_cost(acc, frame, has_fp, options)
               for acc in frame.accesses)


def _access_cost(acc, frame, has_fp, options):
    sp_off = frame.local_size + frame.padding - acc.offset
    if has_fp:
        fp_off = acc.offset + FP_BIAS
        if options.sp_fp_opt:
            if fp_off <= LDST_RANGE:
                off = fp_off          # default base wins ties
            elif sp_off <= LDST_RANGE:
                off = sp_off
            else:
                off = fp_off
        else:
            off = fp_off
    else:
        off = sp_off
    return 1 if off <= LDST_RANGE else 2


def prologue_extras(saved_count, has_fp, total):
    """(push, fp-setup, allocation) instruction counts for a prologue."""
    return (1 if saved_count else 0,
            1 if has_fp else 0,
            stack_alloc_instrs(total))


def epilogue_extras(saved_count, has_fp, total):
    """(deallocation, pop) instruction counts for one epilogue."""
    if has_fp:
        dealloc = 1 if total else 0   # sp restored from fp, size-independent
    else:
        dealloc = stack_alloc_instrs(total)
    return dealloc, (1 if saved_count else 0)


def owning_block(func, access):
    """Code block charged with an access's LD/ST instructions."""
    code = [b for b in func.blocks if b.kind == "code"]
    for b in code:
        if any(s.line == access.source_line for s in b.spans):
            return b.index
    return code[-1].index


def validate_model(model):
    names = set()
    idents = set()
    callees = {}
    for f in model.functions:
        if f.identifier in idents:
            raise ModelError("duplicate identifier %s" % f.identifier)
        idents.add(f.identifier)
        names.add(f.name)
        callees[f.name] = f
    filenums = {fn for fn, _ in model.files}
    for f in model.functions:
        if f.alignment not in ALIGNMENTS:
            raise ModelError("%s: alignment %d" % (f.name, f.alignment))
        if not f.blocks or f.blocks[0].kind != "code":
            raise ModelError("%s: first block must be code" % f.name)
        if not any(b.epilogue for b in f.blocks if b.kind == "code"):
            raise ModelError("%s: no epilogue block" % f.name)
        for pos, b in enumerate(f.blocks):
            if b.index != pos:
                raise ModelError("%s: block index %d at position %d"
                                 % (f.name, b.index, pos))
            if b.kind == "code":
                if not b.spans or any(s.instrs <= 0 for s in b.spans):
                    raise ModelError("%s: block %d needs positive spans"
                                     % (f.name, b.index))
                if any(s.filenum not in filenums for s in b.spans):
                    raise ModelError("%s: span references unknown file" % f.name)
            else:
                if b.consts or b.spans or b.epilogue:
                    raise ModelError("%s: data block %d carries code fields"
                                     % (f.name, b.index))
                if b.byte_size <= 0 or b.byte_size % 4:
                    raise ModelError("%s: data block %d size %d"
                                     % (f.name, b.index, b.byte_size))
        fr = f.frame
        if fr.local_size < 0 or fr.local_size % 4:
            raise ModelError("%s: local_size %d" % (f.name, fr.local_size))
        if fr.padding < 0 or fr.padding % 8:
            raise ModelError("%s: padding %d" % (f.name, fr.padding))
        order = [r for r in SAVEABLE if r in fr.callee_saved]
        if tuple(order) != tuple(fr.callee_saved) or len(set(fr.callee_saved)) != len(fr.callee_saved):
            raise ModelError("%s: callee_saved must be unique, in push order"
                             % f.name)
        if any(r not in SAVEABLE for r in fr.callee_saved):
            raise ModelError("%s: unknown callee-saved register" % f.name)
        if f.has_fp and ("r11" not in fr.callee_saved or "lr" not in fr.callee_saved):
            raise ModelError("%s: has_fp requires saving r11 and lr" % f.name)
        for acc in fr.accesses:
            if not (0 <= acc.offset < fr.local_size):
                raise ModelError("%s: access offset %d outside local area"
                                 % (f.name, acc.offset))
            if acc.count < 1:
                raise ModelError("%s: access count %d" % (f.name, acc.count))
        for bi, ii, callee in f.call_sites:
            if not (0 <= bi < len(f.blocks)) or f.blocks[bi].kind != "code":
                raise ModelError("%s: call site in non-code block %d" % (f.name, bi))
            if not (0 <= ii < f.blocks[bi].instr_count):
                raise ModelError("%s: call site instruction %d out of range"
                                 % (f.name, ii))
            if callee not in names:
                raise ModelError("%s: call to unknown function %s" % (f.name, callee))
        if f.call_sites and "lr" not in fr.callee_saved:
            raise ModelError("%s: calling function must save lr" % f.name)


def align_up(x, a):
    return (x + a - 1) & ~(a - 1)


def _place_function(func, options, base, forced):
    """One placement attempt.

    Pools are emitted after the block where the running distance from
    the earliest pending reference crosses POOL_REACH - 8, plus at any
    walk position in `forced` (retry points from the fixpoint loop).
    Returns (regions, pools, violation) where violation is the walk
    position whose pool left a constant out of reach, or None.
    """
    fr = func.frame
    saved = len(fr.callee_saved)
    total = fr.local_size + fr.padding
    push, fps, alloc = prologue_extras(saved, func.has_fp, total)
    dealloc, pop = epilogue_extras(saved, func.has_fp, total)
    mat = {}
    for acc in fr.accesses:
        owner = owning_block(func, acc)
        cost = _access_cost(acc, fr, func.has_fp, options)
        mat[owner] = mat.get(owner, 0) + acc.count * cost

    regions = []
    pools = []
    pending = []  # (ref_address, const) in reference order
    cursor = base
    violation = None
    threshold = POOL_REACH - 8
    for pos, b in enumerate(func.blocks):
        if b.kind == "code":
            pre = (push + fps + alloc) if pos == 0 else 0
            epi = (dealloc + pop) if b.epilogue else 0
            n = pre + b.instr_count + mat.get(b.index, 0) + epi
            size = INSTR_BYTES * n
            regions.append(Region(cursor, size, "code", b.index, n,
                                  b.instr_count, pre, b.epilogue))
            for c in b.consts:
                pending.append((cursor, c))
        else:
            size = b.byte_size
            regions.append(Region(cursor, size, "data", b.index))
        cursor += size
        if pending and (pos in forced or cursor - pending[0][0] > threshold):
            cursor, bad = _emit_pool(regions, pools, pending, cursor, b.index)
            if bad and violation is None:
                violation = pos
            pending = []
    if pending:
        cursor, bad = _emit_pool(regions, pools, pending, cursor,
                                 func.blocks[-1].index)
        if bad and violation is None:
            violation = len(func.blocks) - 1
    return regions, pools, violation


def _emit_pool(regions, pools, pending, cursor, after_index):
    vals = []
    for _, c in pending:
        if c not in vals:
            vals.append(c)
    pool = Region(cursor, INSTR_BYTES * len(vals), "pool", None,
                  consts=tuple(vals))
    regions.append(pool)
    pools.append((after_index, pool.size))
    out_of_reach = any(
        pool.address + INSTR_BYTES * pool.consts.index(c) - ref > POOL_REACH
        for ref, c in pending)
    return cursor + pool.size, out_of_reach


def _layout_function(func, options, base):
    forced = set()
    for _ in range(64):
        regions, pools, violation = _place_function(func, options, base, forced)
        if violation is None:
            return regions, pools
        if violation == 0 or violation - 1 in forced:
            break
        forced.add(violation - 1)
    raise LayoutError("pool pass did not converge for %s" % func.identifier)


def _function_lines(func, regions):
    lines = []
    by_index = {r.block_index: r for r in regions if r.kind == "code"}
    for b in func.blocks:
        if b.kind != "code":
            continue
        region = by_index[b.index]
        post = region.n_instrs - region.pre_extras - b.instr_count
        addr = region.address
        for si, span in enumerate(b.spans):
            size = INSTR_BYTES * span.instrs
            if si == 0:
                size += INSTR_BYTES * region.pre_extras
            if si == len(b.spans) - 1:
                size += INSTR_BYTES * post
            lines.append(LineRecord(addr, size, span.line, span.filenum))
            addr += size
    return tuple(lines)


def _saved_slot_rules(callee_saved):
    """Post-push rules: cfa offset of each saved register, lr feeds .ra."""
    n = len(callee_saved)
    rules = {".cfa": ("sp", 4 * n, "+")}
    for p, reg in enumerate(callee_saved):
        off = 4 * n - 4 * p
        if reg == "lr":
            rules[".ra"] = (".cfa", -off, "+", "^")
        else:
            rules[reg] = (".cfa", -off, "+", "^")
    if ".ra" not in rules:
        rules[".ra"] = ("lr",)
    return rules


def _function_cfi(func, base, size, regions):
    fr = func.frame
    saved = len(fr.callee_saved)
    total = fr.local_size + fr.padding
    push, fps, alloc = prologue_extras(saved, func.has_fp, total)
    dealloc, pop = epilogue_extras(saved, func.has_fp, total)
    init = {".cfa": ("sp", 0, "+"), ".ra": ("lr",)}
    deltas = []
    a = base
    if push:
        a += INSTR_BYTES
        deltas.append((a, _saved_slot_rules(fr.callee_saved)))
    if fps:
        a += INSTR_BYTES
        deltas.append((a, {".cfa": ("r11", 4 * saved - 4, "+")}))
    if alloc:
        a += INSTR_BYTES * alloc
        if not func.has_fp:
            deltas.append((a, {".cfa": ("sp", 4 * saved + total, "+")}))
    if not func.has_fp and total:
        code = [r for r in regions if r.kind == "code"]
        for i, r in enumerate(code):
            if not r.epilogue:
                continue
            nxt = code[i + 1].address if i + 1 < len(code) else None
            d_addr = r.address + r.size - INSTR_BYTES * pop
            # with no pop the dealloc group ends the block; a delta there
            # would collide with the restore (or fall past the function)
            if d_addr < (nxt if nxt is not None else base + size):
                deltas.append((d_addr, {".cfa": ("sp", 4 * saved, "+")}))
            if nxt is not None:
                deltas.append((nxt, {".cfa": ("sp", 4 * saved + total, "+")}))
    return CfiInitRecord(base, size, init, tuple(deltas))


def _module_id(module_name):
    h = mix64(function_reseed(module_name, 0))
    return "Linux arm %016x%016x0 %s" % (h, mix64(h), module_name)


def layout(model, order, options, base=0):
    """Place functions in `order`; derive the image and its symbol file.

    Deterministic: identical inputs give identical results.  The model
    must already carry its padding and NOPs.
    """
    validate_model(model)
    n = len(model.functions)
    if sorted(order) != list(range(n)):
        raise LayoutError("order is not a permutation of 0..%d" % (n - 1))
    image = []
    funcs = []
    cfi = []
    pool_placements = []
    cursor = base
    for idx in order:
        f = model.functions[idx]
        fbase = align_up(cursor, f.alignment)
        regions, pools = _layout_function(f, options, fbase)
        size = regions[-1].address + regions[-1].size - fbase
        lines = _function_lines(f, regions)
        rec = _function_cfi(f, fbase, size, regions)
        image.append(FunctionLayout(
            identifier=f.identifier, name=f.name, alignment=f.alignment,
            base=fbase, size=size, regions=tuple(regions), lines=lines,
            cfi=rec, local_size=f.frame.local_size,
            saved_count=len(f.frame.callee_saved), has_fp=f.has_fp,
            padding=f.frame.padding))
        funcs.append(FuncRecord(fbase, size, f.param_size, f.name, lines))
        cfi.append(rec)
        pool_placements.extend((f.identifier, bi, sz) for bi, sz in pools)
        cursor = fbase + size
    sf = SymbolFile(module_id=_module_id(model.module_name),
                    files=tuple(model.files), funcs=tuple(funcs),
                    cfi_regions=tuple(cfi))
    return LayoutResult(tuple(image), sf, tuple(pool_placements))


# ---------------------------------------------------------------------------
# Corpus generation


def generate_corpus(seed, n_programs, size_class="small"):
    """Deterministic pseudo-random corpus of program models."""
    if n_programs < 1:
        raise ModelError("n_programs must be >= 1")
    if size_class not in ("small", "medium"):
        raise ModelError("size_class must be small or medium")
    return tuple(_generate_program(seed, i, size_class)
                 for i in range(n_programs))


def _generate_program(seed, index, size_class):
    name = "prog%03d" % index
    rng = Prng(function_reseed(name, seed))
    lo, hi = (8, 64) if size_class == "small" else (64, 512)
    n_funcs = rng.range(lo, hi)
    files = tuple((i, "src/%s_%d.c" % (name, i))
                  for i in range(1, rng.range(2, 4)))

    # Call DAG first: callers must save lr.
    edges = {i: [] for i in range(n_funcs)}
    for i in range(n_funcs):
        for j in range(i + 1, min(i + 9, n_funcs)):
            if rng.chance(25):
                edges[i].append(j)

    fnames = ["fn%03d_%04x" % (i, rng.below(1 << 16)) for i in range(n_funcs)]
    functions = []
    for i in range(n_funcs):
        functions.append(_generate_function(rng, fnames, files, i, edges[i]))
    model = ProgramModel(name, files, tuple(functions))
    validate_model(model)
    return model


def _generate_function(rng, fnames, files, i, callees):
    name = fnames[i]
    alignment = 4 if rng.chance(70) else (8 if rng.chance(67) else 16)
    filenum = rng.choice([fn for fn, _ in files])
    n_blocks = rng.range(1, 40)
    line = rng.range(1, 60)
    blocks = []
    for bi in range(n_blocks):
        if bi > 0 and rng.chance(10):
            blocks.append(BlockModel("data", bi, byte_size=4 * rng.range(1, 16)))
            continue
        spans = []
        for _ in range(rng.range(1, 3)):
            spans.append(LineSpan(line, filenum, rng.range(1, 66)))
            line += rng.range(1, 9)
        blocks.append(BlockModel("code", bi, spans=tuple(spans)))
    code_positions = [b.index for b in blocks if b.kind == "code"]
    blocks[code_positions[-1]] = replace(blocks[code_positions[-1]], epilogue=True)
    if len(code_positions) > 2 and rng.chance(10):
        extra = rng.choice(code_positions[:-1])
        blocks[extra] = replace(blocks[extra], epilogue=True)
    if rng.chance(30):
        carrier = rng.choice(code_positions)
        consts = tuple(rng.next() & 0xFFFFFFFF for _ in range(rng.range(1, 4)))
        blocks[carrier] = replace(blocks[carrier], consts=consts)

    r = rng.below(100)
    if r < 25:
        local = 0
    elif r < 90:
        local = 4 * rng.range(1, 128)
    else:
        local = rng.choice([1024, 2048, 4096, 8192, 16384])
    has_fp = rng.chance(30)
    saved = set(rng.choice(SAVEABLE[:8]) for _ in range(rng.below(6)))
    if callees or rng.chance(50):
        saved.add("lr")
    if has_fp:
        saved.update(("r11", "lr"))
    callee_saved = tuple(r for r in SAVEABLE if r in saved)

    accesses = []
    if local:
        span_lines = [s.line for b in blocks if b.kind == "code" for s in b.spans]
        for _ in range(rng.below(5)):
            accesses.append(StackAccess(4 * rng.below(local // 4),
                                        rng.range(1, 3), rng.choice(span_lines)))
        if local >= 4096:
            # accesses straddling the LD/ST range boundary, so padding
            # can flip their base choice / materialization cost
            for _ in range(2):
                off = max(0, local - 4 * rng.range(925, 1050))
                accesses.append(StackAccess(off, rng.range(1, 2),
                                            rng.choice(span_lines)))

    call_sites = []
    for j in callees:
        cb = rng.choice(code_positions)
        call_sites.append((cb, rng.below(blocks[cb].instr_count), fnames[j]))

    return FunctionModel(
        name=name, object_name=name + ".o", section_name=".text." + name,
        alignment=alignment, has_fp=has_fp,
        frame=FrameModel(local, callee_saved, tuple(accesses), 0),
        blocks=tuple(blocks), call_sites=tuple(call_sites),
        param_size=rng.choice([0, 0, 0, 4, 8]))


# ---------------------------------------------------------------------------
# Model text format (documented in docs/formats.md)


def emit_model(model):
    out = ["MODEL v1 %s" % model.module_name]
    for fn, path in model.files:
        out.append("FILE %d %s" % (fn, path))
    for f in model.functions:
        out.append("FUNCTION align=%d fp=%d param=%d object=%s section=%s name=%s"
                   % (f.alignment, int(f.has_fp), f.param_size,
                      f.object_name, f.section_name, f.name))
        saved = ",".join(f.frame.callee_saved) or "-"
        out.append("FRAME local=%d pad=%d saved=%s"
                   % (f.frame.local_size, f.frame.padding, saved))
        for a in f.frame.accesses:
            out.append("ACCESS %d %d %d" % (a.offset, a.count, a.source_line))
        for bi, ii, callee in f.call_sites:
            out.append("CALL %d %d %s" % (bi, ii, callee))
        for b in f.blocks:
            if b.kind == "code":
                out.append("BLOCK code %d%s" % (b.index, " epilogue" if b.epilogue else ""))
                for s in b.spans:
                    out.append("SPAN %d %d %d" % (s.line, s.filenum, s.instrs))
                for c in b.consts:
                    out.append("CONST %x" % c)
            else:
                out.append("BLOCK data %d %d" % (b.index, b.byte_size))
    return "\n".join(out) + "\n"


def parse_model(text):
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines or not lines[0].startswith("MODEL v1 "):
        raise ModelError("missing MODEL v1 header")
    module_name = lines[0].split(" ", 2)[2]
    files = []
    functions = []
    cur = None     # mutable function under construction
    blocks = None
    block = None

    def close_block():
        nonlocal block
        if block is not None:
            kind, idx, spans, consts, size, epi = block
            if kind == "code":
                blocks.append(BlockModel("code", idx, spans=tuple(spans),
                                         consts=tuple(consts), epilogue=epi))
            else:
                blocks.append(BlockModel("data", idx, byte_size=size))
            block = None

    def close_func():
        nonlocal cur, blocks
        close_block()
        if cur is not None:
            cur["blocks"] = tuple(blocks)
            functions.append(FunctionModel(
                name=cur["name"], object_name=cur["object"],
                section_name=cur["section"], alignment=cur["align"],
                has_fp=cur["fp"], param_size=cur["param"],
                frame=FrameModel(cur["local"], cur["saved"],
                                 tuple(cur["accesses"]), cur["pad"]),
                blocks=cur["blocks"], call_sites=tuple(cur["calls"])))
            cur = None
            blocks = None

    for ln in lines[1:]:
        toks = ln.split()
        kw = toks[0]
        if kw == "FILE":
            files.append((int(toks[1]), ln.split(" ", 2)[2]))
        elif kw == "FUNCTION":
            close_func()
            kv = dict(t.split("=", 1) for t in toks[1:5])
            name = ln.split("name=", 1)[1]
            cur = {"align": int(kv["align"]), "fp": bool(int(kv["fp"])),
                   "param": int(kv["param"]), "object": kv["object"],
                   "section": ln.split("section=", 1)[1].split(" name=", 1)[0],
                   "name": name, "accesses": [], "calls": [],
                   "local": 0, "pad": 0, "saved": ()}
            blocks = []
        elif kw == "FRAME":
            kv = dict(t.split("=", 1) for t in toks[1:])
            cur["local"] = int(kv["local"])
            cur["pad"] = int(kv["pad"])
            cur["saved"] = () if kv["saved"] == "-" else tuple(kv["saved"].split(","))
        elif kw == "ACCESS":
            cur["accesses"].append(StackAccess(int(toks[1]), int(toks[2]), int(toks[3])))
        elif kw == "CALL":
            cur["calls"].append((int(toks[1]), int(toks[2]), toks[3]))
        elif kw == "BLOCK":
            close_block()
            if toks[1] == "code":
                block = ["code", int(toks[2]), [], [], 0, len(toks) > 3 and toks[3] == "epilogue"]
            else:
                block = ["data", int(toks[2]), [], [], int(toks[3]), False]
        elif kw == "SPAN":
            block[2].append(LineSpan(int(toks[1]), int(toks[2]), int(toks[3])))
        elif kw == "CONST":
            block[3].append(int(toks[1], 16))
        else:
            raise ModelError("unknown model record %r" % kw)
    close_func()
    model = ProgramModel(module_name, tuple(files), tuple(functions))
    validate_model(model)
    return model
