"""The compiled and interpreted kernels must agree step for step."""
from array import array

import pytest
from hypothesis import given, settings, strategies as st

from stacksafe import _core, _pykernel
from stacksafe.generator import GenConfig, generate
from stacksafe.machine import REGISTERS, CodeImage, Instruction, Kind, Layout, MachineState, Op, Program
from stacksafe.policy import PolicyState, initial_tags, parse_policy
from stacksafe.traces import FlatState

pytestmark = pytest.mark.skipif(_core.ckernel is None, reason="compiled kernel not built")

LAYOUT = Layout(code_base=0, code_size=64, stack_base=100, stack_size=32,
                globals_base=200, globals_size=8, out=200)
POLICIES = ["none", "di", "ltc", "di+regs", "ltc+regs", "mutant:LOAD_NO_CHECK_DI",
            "mutant:STORE_NO_CHECK", "mutant:HEADER_NO_INIT", "mutant:PER_DEPTH_TAG",
            "mutant:LOAD_NO_CHECK_LT", "mutant:STORE_NO_UPDATE"]

regs = st.sampled_from(REGISTERS)
imms = st.sampled_from([-16, -8, -4, 0, 4, 8, 12, 16, 100, 104, 200, 36, 60])
instr = st.builds(Instruction, st.sampled_from(list(Op)), regs, regs, regs, imms)


@st.composite
def programs(draw):
    code = CodeImage(LAYOUT)
    for a in range(0, 64, 4):
        code.instrs[a] = draw(instr)
        k = draw(st.sampled_from(list(Kind)))
        if k is not Kind.PLAIN:
            code.kinds[a] = k
    vals = [draw(st.sampled_from([0, 4, 100, 120, 132, 200, 7, 0xFFFFFFFF])) for _ in range(LAYOUT.size)]
    vals[0] = 0
    vals[3] = 132
    vals[1] = 0
    return code, vals


def _steps(kern, prog, vals, tags, ps, flags, n):
    vals, tags, ps = array("q", vals), array("q", tags), array("q", ps)
    out = []
    for _ in range(n):
        out.append(kern.step(vals, tags, ps, prog.arrays, prog.params, flags))
        out.append((tuple(vals), tuple(tags), tuple(ps)))
    return out


@settings(max_examples=1000, deadline=None)
@given(programs(), st.sampled_from(POLICIES))
def test_step_agreement(prog_vals, pol):
    code, vals = prog_vals
    prog = Program(code)
    flags = parse_policy(pol).flags
    tags = initial_tags(LAYOUT)
    ps = PolicyState.initial().data
    a = _steps(_pykernel, prog, vals, tags, ps, flags, 12)
    b = _steps(_core.ckernel, prog, vals, tags, ps, flags, 12)
    assert a == b


@pytest.mark.parametrize("pol", ["di+regs", "ltc+regs", "mutant:STORE_NO_UPDATE"])
def test_run_agreement_on_generated(pol):
    for seed in range(30):
        tc = generate(GenConfig(seed=seed), pol)
        r = tc.runner()
        results = []
        for kern in (_pykernel, _core.ckernel):
            st0 = FlatState.of(tc.init, tc.ps)
            p = r.prog
            res = kern.run(st0.vals, st0.tags, st0.ps, p.arrays, p.params, r.flags, 0, -(1 << 62), 4000, False)
            results.append((res, tuple(st0.vals), tuple(st0.tags), tuple(st0.ps)))
        assert results[0] == results[1]


def test_backend_switch():
    before = _core.BACKEND
    try:
        _core.use("python")
        assert _core.kernel is _pykernel
        with pytest.raises(ValueError):
            _core.use("fortran")
    finally:
        _core.use(before)
