"""Shared helpers: inline programs and one-call property evaluation."""
from __future__ import annotations

import pytest

from stacksafe.generator import TestCase
from stacksafe.machine import parse_assembly
from stacksafe.properties import Budget, check_all, execute
from stacksafe.secsem import DEFAULT_CONFIG, parse_annotations

# Caller with a 5-word frame (980..999): a0 holds the secret argument, 4(sp)
# is the sensitive flag, 12(sp) the saved return address. Callee at 100 uses
# a blessed 2-word frame. {callee} is spliced in at 108.
BLESSED = """
.code 0 256
.stack 900 100
.globals 2000 4
.out 2000
.entry 0
.args a0
.init sp 1000
.init a0 5
.init ra 68
0: ADDI sp,sp,-20 @header1
4: SW ra,12(sp) @header2
8: SW a0,8(sp)
12: SW zero,4(sp)
16: JAL 100 @call
20: SW a0,0(sp)
24: LW t0,4(sp)
28: LI t1,42
32: BNE t0,t1,L1
36: LW a0,8(sp)
40: SW a0,out
44: J L2
L1, 48: LW a0,0(sp)
52: SW a0,out
L2, 56: LW ra,12(sp) @return1
60: ADDI sp,sp,20 @return2
64: JALR ra @return3
68: HALT
100: ADDI sp,sp,-8 @header1
104: SW ra,4(sp) @header2
{callee}
"""

BLESSED_ANN = """
0: alloc(priv,-20,20)
16: call(100,[],[])
60: dealloc(0,20)
100: alloc(priv,-8,8)
"""


def blessed(body: list[str]) -> tuple[str, str]:
    """Blessed caller plus a callee whose body is ``body`` followed by the exit
    sequence."""
    lines = [f"{108 + 4 * i}: {ins}" for i, ins in enumerate(body)]
    a = 108 + 4 * len(body)
    lines += [f"{a}: LW ra,4(sp) @return1", f"{a + 4}: ADDI sp,sp,8 @return2",
              f"{a + 8}: JALR ra @return3"]
    ann = BLESSED_ANN + f"{a + 4}: dealloc(0,8)\n{a + 8}: return\n"
    return BLESSED.format(callee="\n".join(lines)), ann


def case(asm_text: str, ann_text: str, policy: str = "none") -> TestCase:
    return TestCase.from_asm(parse_assembly(asm_text), parse_annotations(ann_text), policy)


def verdicts(tc: TestCase, policy: str | None = None, config=DEFAULT_CONFIG,
             budget: Budget = Budget(), seed: int = 1) -> dict:
    run = execute(tc.runner(policy, config), tc.init, tc.ps, tc.initial_context(config))
    return {v.prop: v for v in check_all(run, budget=budget, seed=seed)}


@pytest.fixture
def honest_blessed() -> TestCase:
    return case(*blessed(["LI a0,1"]))
