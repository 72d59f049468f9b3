import pytest

from conftest import BLESSED, blessed, case
from stacksafe import _pykernel as K
from stacksafe.machine import MemWord
from stacksafe.policy import (
    CELL, PCCOLOR, RETADDR, UNUSED, ConfigError, make_mutant, make_tag, parse_policy,
    guarded_step, tag_color, tag_kind,
)
from stacksafe.secsem import make_program
from stacksafe.traces import run_to_return


def steps(tc, pol, limit=200):
    """Guarded steps until halt or failstop: ``(states, writes, status)``;
    ``states[i]`` is the state before step i."""
    policy = parse_policy(pol)
    prog = make_program(tc.code, tc.annot)
    m, ps = tc.init, tc.ps
    states, writes = [], []
    for _ in range(limit):
        states.append((m, ps))
        r = guarded_step(m, ps, policy, prog)
        if r.status != K.OK:
            return states, writes, r.status
        if r.event is not None:
            writes.append(r.event)
        m, ps = r.state, r.ps
    return states, writes, None


def run_until_pc(tc, pol, pc):
    states, _, _ = steps(tc, pol)
    return [s for s in states if s[0].pc == pc]


FRAME = range(980, 1000, 4)


def test_di_header_colors_frame():
    tc = case(*blessed(["LI a0,1"]))
    (m, ps), = run_until_pc(tc, "di", 4)
    assert [m.tags[m.layout.index(a)] for a in FRAME] == [make_tag(CELL, 1)] * 5
    assert ps.depth == 1 and tag_kind(m.tags[0]) == PCCOLOR and tag_color(m.tags[0]) == 1


def test_di_return_clears_frame():
    tc = case(*blessed(["LI a0,1"]))
    (m, ps), = run_until_pc(tc, "di", 64)
    assert all(m.tags[m.layout.index(a)] == UNUSED for a in FRAME)
    assert ps.depth == 0


def test_di_same_depth_load_allowed():
    _, writes, status = steps(case(*blessed(["SW zero,0(sp)", "LW t0,0(sp)", "LI a0,1"])), "di")
    assert status == K.HALTED and writes == [1]


def test_di_cross_depth_load_failstops():
    _, writes, status = steps(case(*blessed(["LW t0,8(sp)", "SW t0,out"])), "di")
    assert status == K.FAILSTOP and writes == []


def test_di_cross_depth_store_failstops():
    states, _, status = steps(case(*blessed(["LI t1,42", "SW t1,12(sp)"])), "di")
    assert status == K.FAILSTOP
    assert states[-1][0].payload(984) == 0


def test_ltc_load_from_unused_failstops():
    _, _, status = steps(case(*blessed(["LW t0,0(sp)"])), "ltc")
    assert status == K.FAILSTOP


def test_ltc_foreign_store_retags_then_owner_load_failstops():
    tc = case(*blessed(["LI t1,42", "SW t1,12(sp)", "LI a0,1"]))
    states, _, status = steps(tc, "ltc")
    (m, ps), = [s for s in states if s[0].pc == 20]
    assert m.payload(984) == 42
    assert m.tags[m.layout.index(984)] == make_tag(CELL, 2)  # callee's fresh color
    assert status == K.FAILSTOP and states[-1][0].pc == 24  # caller's load of 4(sp)


SIBLINGS = """
.code 0 256
.stack 900 100
.globals 2000 4
.out 2000
.entry 0
.init sp 1000
.init ra 40
0: ADDI sp,sp,-8 @header1
4: SW ra,4(sp) @header2
8: JAL 100 @call
12: JAL 200 @call
16: LW ra,4(sp) @return1
20: ADDI sp,sp,8 @return2
24: JALR ra @return3
40: HALT
100: ADDI sp,sp,-8 @header1
104: SW ra,4(sp) @header2
108: LI t0,7
112: SW t0,0(sp)
116: LW ra,4(sp) @return1
120: ADDI sp,sp,8 @return2
124: JALR ra @return3
200: ADDI sp,sp,-8 @header1
204: SW ra,4(sp) @header2
208: LW t0,0(sp)
212: SW t0,out
216: LW ra,4(sp) @return1
220: ADDI sp,sp,8 @return2
224: JALR ra @return3
"""
SIBLINGS_ANN = """
0: alloc(priv,-8,8)
8: call(100,[],[])
12: call(200,[],[])
100: alloc(priv,-8,8)
120: dealloc(0,8)
124: return
200: alloc(priv,-8,8)
220: dealloc(0,8)
224: return
"""


@pytest.mark.parametrize("pol,status,writes", [
    ("ltc", K.FAILSTOP, []),
    ("ltc+regs", K.FAILSTOP, []),
    ("mutant:PER_DEPTH_TAG", K.HALTED, [7]),  # stale sibling data leaks
    ("di", K.HALTED, [0]),                    # cleared at return, reinitialized at entry
])
def test_sibling_stale_read(pol, status, writes):
    _, w, st = steps(case(SIBLINGS, SIBLINGS_ANN), pol)
    assert (st, w) == (status, writes)


SAVED = """
.code 0 256
.stack 900 100
.globals 2000 4
.out 2000
.entry 0
.init sp 1000
.init ra 40
0: ADDI sp,sp,-8 @header1
4: SW ra,4(sp) @header2
8: SW s0,0(sp) @savereg
12: LI s0,77
16: JAL 100 @call
20: SW s0,out
24: LW s0,0(sp) @restorereg
28: LW ra,4(sp) @return1
32: ADDI sp,sp,8 @return2
36: JALR ra @return3
40: HALT
100: ADDI sp,sp,-8 @header1
104: SW ra,4(sp) @header2
{save}
112: {body}
116: MOV t1,t0
{restore}
124: LW ra,4(sp) @return1
128: ADDI sp,sp,8 @return2
132: JALR ra @return3
"""
SAVED_ANN = """
0: alloc(priv,-8,8)
16: call(100,[],[])
32: dealloc(0,8)
100: alloc(priv,-8,8)
128: dealloc(0,8)
132: return
"""


def _saved(save: bool, body: str):
    return case(SAVED.format(
        save="108: SW s0,0(sp) @savereg" if save else "108: NOP",
        restore="120: LW s0,0(sp) @restorereg" if save else "120: NOP", body=body), SAVED_ANN)


@pytest.mark.parametrize("pol", ["di+regs", "ltc+regs"])
def test_blessed_save_and_restore(pol):
    _, writes, status = steps(_saved(True, "LI s0,9"), pol)
    assert status == K.HALTED and writes == [77]


@pytest.mark.parametrize("pol", ["di+regs", "ltc+regs"])
def test_unsaved_callee_saved_read_failstops(pol):
    states, _, status = steps(_saved(False, "MOV t0,s0"), pol)
    assert status == K.FAILSTOP and states[-1][0].pc == 112


def test_unsaved_clobber_detected():
    # DI refuses the write; LTC lets the callee take the register and the caller's read fails
    assert steps(_saved(False, "LI s0,9"), "di+regs")[0][-1][0].pc == 112
    assert steps(_saved(False, "LI s0,9"), "ltc+regs")[0][-1][0].pc == 20


@pytest.mark.parametrize("pol", ["none", "di", "ltc"])
def test_unprotected_without_extension(pol):
    _, writes, status = steps(_saved(False, "LI s0,9"), pol)
    assert status == K.HALTED and writes == [9]


@pytest.mark.parametrize("pol", ["di+regs", "ltc+regs"])
def test_caller_saved_readable_across_call(pol):
    _, _, status = steps(_saved(True, "MOV t2,t0"), pol)
    assert status == K.HALTED


def test_store_no_check_allows_cross_frame_store():
    _, writes, status = steps(case(*blessed(["LI t1,42", "SW t1,12(sp)", "LI a0,1"])), "mutant:STORE_NO_CHECK")
    assert status == K.HALTED and writes == [5]


def test_load_no_check_di_allows_cross_frame_load():
    _, writes, status = steps(case(*blessed(["LW t0,16(sp)", "SW t0,out", "LI a0,1"])), "mutant:LOAD_NO_CHECK_DI")
    assert status == K.HALTED and writes == [5, 1]


def test_load_no_check_lt_allows_unused_load():
    assert steps(case(*blessed(["LW t0,0(sp)", "LI a0,1"])), "mutant:LOAD_NO_CHECK_LT")[2] == K.HALTED


def test_header_no_init_leaves_frame_unused():
    (m, _), = run_until_pc(case(*blessed(["LI a0,1"])), "mutant:HEADER_NO_INIT", 4)
    assert all(m.tags[m.layout.index(a)] == UNUSED for a in FRAME)


def test_store_no_update_keeps_unused():
    tc = case(*blessed(["SW zero,0(sp)", "LW t0,0(sp)"]))
    states, _, status = steps(tc, "mutant:STORE_NO_UPDATE")
    assert status == K.FAILSTOP and states[-1][0].pc == 112
    assert steps(tc, "ltc")[2] == K.HALTED


def test_header2_must_follow_header1():
    text, ann = blessed(["LI a0,1"])
    text = text.replace("104: SW ra,4(sp) @header2", "104: NOP")
    states, _, status = steps(case(text, ann), "di")
    assert status == K.FAILSTOP and states[-1][0].pc == 104


def test_blessed_kind_out_of_sequence_failstops():
    text, ann = blessed(["ADDI sp,sp,8 @return2"])
    assert steps(case(text, ann), "ltc")[2] == K.FAILSTOP


def test_oversized_frame_failstops():
    text, ann = blessed(["LI a0,1"])
    text = text.replace("0: ADDI sp,sp,-20", "0: ADDI sp,sp,-200")
    assert steps(case(text, ann.replace("alloc(priv,-20,20)", "alloc(priv,-200,200)")), "di")[0][-1][0].pc == 0


def test_di_and_ltc_agree_on_benign_program():
    tc = case(*blessed(["LI a0,1"]))
    outs = set()
    for pol in ("di", "ltc", "di+regs", "ltc+regs"):
        t = run_to_return(tc.combined(), 0, parse_policy(pol), tc.code, tc.annot)
        outs.add((t.outputs, t.terminator))
    assert len(outs) == 1


def test_mutant_ids_and_selectors():
    for mid in ("LOAD_NO_CHECK_DI", "STORE_NO_CHECK", "HEADER_NO_INIT", "PER_DEPTH_TAG",
                "LOAD_NO_CHECK_LT", "STORE_NO_UPDATE"):
        p = make_mutant(mid)
        assert p.name == f"mutant:{mid}" and parse_policy(p.name).flags == p.flags
    with pytest.raises(ConfigError):
        make_mutant("NOPE")
    for bad in ("dx", "none+regs", "di+stack"):
        with pytest.raises(ConfigError):
            parse_policy(bad)


def test_failstop_is_idempotent_here():
    tc = case(*blessed(["LW t0,8(sp)"]))
    states, _, _ = steps(tc, "di")
    m, ps = states[-1]
    prog = make_program(tc.code, tc.annot)
    for _ in range(3):
        r = guarded_step(m, ps, parse_policy("di"), prog)
        assert r.failstop and r.state == m and r.ps == ps and r.event is None
