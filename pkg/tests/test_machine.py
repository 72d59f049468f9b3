import numpy as np
import pytest

from stacksafe.machine import (
    PC, Instruction, Layout, MachineError, MachineState, MemWord, Op, Reg, CodeImage,
    compatible, diff_set, element, format_assembly, k_variant, all_variants, parse_assembly,
    raw_step,
)
from stacksafe.corpus import load

LAYOUT = Layout(code_base=0, code_size=256, stack_base=900, stack_size=100,
                globals_base=2000, globals_size=4, out=2000)


def _code(*pairs) -> CodeImage:
    code = CodeImage(LAYOUT)
    for addr, ins in pairs:
        code.instrs[addr] = ins
    return code


def _state(**regs) -> MachineState:
    m = MachineState.blank(LAYOUT, pc=0, sp=1000)
    return m.update({k: v for k, v in regs.items()})


def test_addi_moves_sp():
    m2, ev, halted = raw_step(_state(), _code((0, Instruction(Op.ADDI, "sp", "sp", imm=-20))))
    assert (m2.sp, m2.pc, ev, halted) == (980, 4, None, False)


def test_nop_only_advances_pc():
    m = _state(a0=7, t2=9)
    m2, ev, _ = raw_step(m, _code((0, Instruction(Op.NOP))))
    assert diff_set(m, m2) == {PC}
    assert m2.pc == 4 and ev is None


def test_store_to_out_is_observable():
    m = _state(a0=5)
    _, ev, _ = raw_step(m, _code((0, Instruction(Op.SW, rs1="zero", rs2="a0", imm=2000))))
    assert ev == 5


def test_jal_links_and_jalr_jumps():
    code = _code((0, Instruction(Op.JAL, "ra", imm=100)), (100, Instruction(Op.JALR, "zero", "ra", imm=8)))
    m1, _, _ = raw_step(_state(), code)
    assert m1.pc == 100 and m1.payload("ra") == 4
    m2, _, _ = raw_step(m1, code)
    assert m2.pc == 12


def test_zero_register_stays_zero():
    m2, _, _ = raw_step(_state(), _code((0, Instruction(Op.LI, "zero", imm=3))))
    assert m2.payload("zero") == 0


def test_halt_self_loops():
    m = _state()
    m2, ev, halted = raw_step(m, _code((0, Instruction(Op.HALT))))
    assert halted and m2 == m and ev is None


def test_out_of_region_access_halts():
    m = _state(t0=5000)
    m2, _, halted = raw_step(m, _code((0, Instruction(Op.LW, "t1", "t0", imm=0))))
    assert halted and m2 == m


def test_diff_set_examples():
    m = _state(a0=1)
    assert diff_set(m, m) == frozenset()
    assert diff_set(m, m.update({"a0": 2})) == {Reg("a0")}


def test_diff_after_sensitive_overwrite():
    asm, _ = load("golden_c")
    m = MachineState(asm.layout, [0] * asm.layout.size, [0] * asm.layout.size).update(
        {PC: 104, "sp": 980, "t1": 42})
    m2, _, _ = raw_step(m, asm.code)
    assert diff_set(m, m2) == {PC, MemWord(984)}


def test_unaligned_word_rejected():
    with pytest.raises(MachineError):
        MemWord(981)


def test_element_coercion():
    assert element("pc") is PC
    assert element(980) == MemWord(980)
    assert element("s0") == Reg("s0")
    with pytest.raises(MachineError):
        element("x9")


def test_overlapping_regions_rejected():
    with pytest.raises(MachineError):
        Layout(code_base=0, code_size=1024, stack_base=900, stack_size=100,
               globals_base=2000, globals_size=4, out=2000)


def test_out_must_be_in_globals():
    with pytest.raises(MachineError):
        Layout(code_base=0, code_size=256, stack_base=900, stack_size=100,
               globals_base=2000, globals_size=4, out=2004)


def test_k_variant_examples():
    m = _state(a0=5)
    rng = np.random.default_rng(0)
    assert k_variant(m, [], rng) == m
    for _ in range(20):
        n = k_variant(m, ["a0"], rng)
        assert diff_set(m, n) <= {Reg("a0")}
        assert compatible(m, n)


def test_k_variant_refuses_pc_and_zero():
    rng = np.random.default_rng(0)
    for k in (PC, "zero"):
        with pytest.raises(MachineError):
            k_variant(_state(), [k], rng)


def test_compatible_detects_tag_change():
    m = _state()
    assert compatible(m, m)
    assert not compatible(m, m.update(tags={980: 1}))


def test_all_variants_enumerates_domain():
    vs = list(all_variants(_state(), ["a0", 980], domain=2))
    assert len(vs) == 4
    assert {(v.payload("a0"), v.payload(980)) for v in vs} == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_assembly_round_trip():
    asm, _ = load("golden_a")
    again = parse_assembly(format_assembly(asm))
    assert again.code.instrs == asm.code.instrs
    assert again.code.kinds == asm.code.kinds
    assert again.layout == asm.layout
    assert again.init == asm.init and again.entry_args == asm.entry_args


def test_duplicate_address_rejected():
    with pytest.raises(MachineError):
        parse_assembly(".stack 900 100\n.out 2000\n0: NOP\n0: NOP\n")
