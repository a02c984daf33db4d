import pytest

from divsym.diversify import (SeedTuple, build_default, build_diversified,
                              inject_desync, pad_amount)
from divsym.errors import ReplicationInputError
from divsym.progmodel import (BlockModel, BuildOptions, FrameModel,
                              FunctionModel, LineSpan, ProgramModel,
                              access_instrs, generate_corpus, layout)
from divsym.replicate import replicate
from divsym.symfile import emit_symbol_file

OPTS = BuildOptions()
SEEDS = SeedTuple(0xA1A1, 0xB2B2, 0xC3C3)


def benign_model(n=4):
    """Functions whose direct effects fully determine diversified layout:
    no constants (no pools), small frames, in-range accesses."""
    funcs = []
    for i in range(n):
        name = "benign%02d" % i
        blocks = (
            BlockModel("code", 0, spans=(LineSpan(10, 1, 6), LineSpan(12, 1, 9))),
            BlockModel("code", 1, spans=(LineSpan(20, 1, 12),), epilogue=True),
        )
        funcs.append(FunctionModel(
            name=name, object_name=name + ".o", section_name=".text." + name,
            alignment=(4, 8, 16)[i % 3], has_fp=(i % 2 == 0),
            frame=FrameModel(local_size=16 * (i + 1),
                             callee_saved=("r4", "r11", "lr") if i % 2 == 0 else ("r4", "lr"),
                             accesses=(), padding=0),
            blocks=blocks))
    return ProgramModel("benign", ((1, "src/benign_1.c"),), tuple(funcs))


def function_records(sf):
    """name -> (func record, cfi record) in a comparable, rebased form."""
    out = {}
    for f, c in zip(sf.funcs, sf.cfi_regions):
        lines = tuple((ln.address - f.address, ln.size, ln.line, ln.filenum)
                      for ln in f.lines)
        deltas = tuple((a - f.address, tuple(sorted((k, v) for k, v in r.items())))
                       for a, r in c.deltas)
        out[f.name] = (f.size, f.param_size, lines,
                       tuple(sorted((k, v) for k, v in c.init_rules.items())),
                       deltas)
    return out


def test_identity_replication_returns_default():
    model = generate_corpus(17, 1)[0]
    res, log = build_default(model, OPTS)
    noop = BuildOptions(nop_num=0, pad_scheme=False, shuffle_scheme=False)
    approx = replicate(res.symfile, log, SEEDS, noop)
    assert emit_symbol_file(approx) == emit_symbol_file(res.symfile)


def test_benign_model_replicates_exactly():
    model = benign_model()
    res, log = build_default(model, OPTS)
    for seed in range(5):
        seeds = SeedTuple(seed * 17 + 1, seed * 23 + 2, seed * 31 + 3)
        truth, _ = build_diversified(model, seeds, OPTS)
        approx = replicate(res.symfile, log, seeds, OPTS)
        assert emit_symbol_file(approx) == emit_symbol_file(truth.symfile)


def test_frame_constant_shift_for_pow2_local():
    # local 4088: default total 4096 is a single encodable chunk
    name = "pow2fn"
    f = FunctionModel(
        name=name, object_name=name + ".o", section_name=".text." + name,
        alignment=4, has_fp=False,
        frame=FrameModel(local_size=4088, callee_saved=("r4", "lr")),
        blocks=(BlockModel("code", 0, spans=(LineSpan(5, 1, 20),),
                           epilogue=True),))
    model = ProgramModel("pow2", ((1, "src/p.c"),), (f,))
    nonop = BuildOptions(nop_num=0)
    res, log = build_default(model, nonop)
    init_const = 8 + 4096  # saved area + default total
    assert any(d[1].get(".cfa") == ("sp", init_const, "+")
               for d in res.symfile.cfi_regions[0].deltas)

    # find a seed whose padding for this function is 16
    seed = next(s for s in range(1000)
                if pad_amount(f.identifier, s, False) == 16)
    seeds = SeedTuple(seed, 0, 0)
    approx = replicate(res.symfile, log, seeds, nonop)
    truth, _ = build_diversified(model, seeds, nonop)
    want = ("sp", 8 + 4088 + 16, "+")
    assert any(d[1].get(".cfa") == want for d in approx.cfi_regions[0].deltas)
    assert any(d[1].get(".cfa") == want for d in truth.symfile.cfi_regions[0].deltas)
    # padding 16 makes the total unencodable: both sides grow by one
    # sp-adjust in prologue and epilogue
    assert truth.symfile.funcs[0].size == res.symfile.funcs[0].size + 8
    assert approx.funcs[0].size == truth.symfile.funcs[0].size
    assert emit_symbol_file(approx) == emit_symbol_file(truth.symfile)


def _pool_signature(result):
    """identifier -> pool placements relative to the block sequence."""
    sig = {}
    for fl in result.image:
        pools = []
        prev_code = None
        for r in fl.regions:
            if r.kind == "pool":
                pools.append((prev_code, r.size))
            elif r.block_index is not None:
                prev_code = r.block_index
        sig[fl.identifier] = tuple(pools)
    return sig


def test_direct_effect_functions_replicate_exactly():
    model = generate_corpus(29, 2)[0]
    dres, log = build_default(model, OPTS)
    truth, _ = build_diversified(model, SEEDS, OPTS)
    approx = replicate(dres.symfile, log, SEEDS, OPTS)
    t_rec = function_records(truth.symfile)
    a_rec = function_records(approx)
    pool_def = _pool_signature(dres)
    pool_div = _pool_signature(truth)

    checked = 0
    for f in model.functions:
        pad = pad_amount(f.identifier, SEEDS.pad_seed, False)
        mat_def = access_instrs(
            FrameModel(f.frame.local_size, f.frame.callee_saved,
                       f.frame.accesses, 8), OPTS, f.has_fp)
        mat_div = access_instrs(
            FrameModel(f.frame.local_size, f.frame.callee_saved,
                       f.frame.accesses, pad), OPTS, f.has_fp)
        if mat_def != mat_div:
            continue
        if pool_def[f.identifier] != pool_div[f.identifier]:
            continue
        assert a_rec[f.name] == t_rec[f.name], f.name
        checked += 1
    assert checked >= len(model.functions) // 2


def test_desync_contained_to_its_function():
    model = benign_model(6)
    dres, log = build_default(model, OPTS)
    target = model.functions[2].identifier

    # diversified build with a phantom instruction in one function
    padded = model
    from divsym.diversify import _apply_padding  # same path as the driver
    padded = _apply_padding(
        model, lambda f: pad_amount(f.identifier, SEEDS.pad_seed, False))
    desynced, hits = inject_desync(padded, SEEDS, 0, 100, targets=[target])
    assert [h[0] for h in hits] == [target]
    from divsym.diversify import insert_nops, shuffle_permutation
    noppy = insert_nops(desynced, SEEDS.nop_seed, OPTS.nop_num, OPTS.nop_den)
    order = shuffle_permutation(len(model.functions), SEEDS.shuffle_seed)
    truth = layout(noppy, order, OPTS)

    approx = replicate(dres.symfile, log, SEEDS, OPTS)
    t_rec = function_records(truth.symfile)
    a_rec = function_records(approx)
    for f in model.functions:
        if f.identifier == target:
            assert a_rec[f.name] != t_rec[f.name]
        else:
            # identical up to the base shift that rebasing removed
            assert a_rec[f.name] == t_rec[f.name], f.name


def test_mismatched_log_rejected():
    model = generate_corpus(31, 1)[0]
    res, log = build_default(model, OPTS)
    from dataclasses import replace
    broken = replace(log, functions=log.functions[:-1])
    with pytest.raises(ReplicationInputError):
        replicate(res.symfile, broken, SEEDS, OPTS)


def test_approximation_soundness():
    # function set and per-function record kinds always match the truth,
    # even for desynced functions; only addresses/sizes/constants differ
    model = generate_corpus(29, 1)[0]
    dres, log = build_default(model, OPTS)
    opts = BuildOptions(desync_num=20, desync_den=100)
    truth, _ = build_diversified(model, SEEDS, opts)
    approx = replicate(dres.symfile, log, SEEDS, OPTS)
    t_names = [f.name for f in truth.symfile.funcs]
    a_names = [f.name for f in approx.funcs]
    assert sorted(t_names) == sorted(a_names)
    assert t_names == a_names  # same shuffle replay, same order
    assert len(approx.cfi_regions) == len(truth.symfile.cfi_regions)
    for af, tf in zip(approx.funcs, truth.symfile.funcs):
        assert af.name == tf.name
        assert bool(af.lines) == bool(tf.lines)


def test_replicate_is_deterministic():
    model = generate_corpus(37, 1)[0]
    res, log = build_default(model, OPTS)
    a = replicate(res.symfile, log, SEEDS, OPTS)
    b = replicate(res.symfile, log, SEEDS, OPTS)
    assert emit_symbol_file(a) == emit_symbol_file(b)
