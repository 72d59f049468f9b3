"""Generation-by-execution test programs.

Programs are built while they run: the generator keeps a live machine state
under the policy being tested and picks each next instruction at the current
pc. Every call enters a fresh function, so each function body is a single
straight-line path with forward branches; unexecuted holes become NOPs.
Benign choices follow a definedness discipline (only registers and stack words
the activation itself set up are read) and are additionally required not to
failstop. Misbehaviors are drawn from a fixed catalog and logged.
"""
from __future__ import annotations

import random
from array import array
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from stacksafe import _core
from stacksafe import _pykernel as K
from stacksafe.machine import (
    ARG_REGS, CALLEE_SAVED, MEM_BASE_INDEX, REG_INDEX, CodeImage, Instruction, Kind, Layout,
    MachineState, Op,
)
from stacksafe.policy import MicroPolicy, PolicyState, initial_tags, parse_policy
from stacksafe.secsem import (
    Alloc, AnnotationMap, Call, CombinedState, Dealloc, Return, SemConfig, TailCall,
    initial_context, make_program,
)
from stacksafe.traces import FlatState, Runner

TEMPS = ("t0", "t1", "t2", "t3")
SLOT_BYTES = 1024
MISBEHAVIORS = ("cross_load", "cross_store", "ra_tamper", "sp_tamper",
                "read_before_write", "callee_saved_clobber")


@dataclass(frozen=True)
class GenConfig:
    max_functions: int = 8
    max_frame_words: int = 6
    depth_cap: int = 4
    p_call: float = 0.15
    p_tailcall: float = 0.03
    p_store: float = 0.25
    p_load: float = 0.25
    p_misbehave: float = 0.05
    p_public_alloc: float = 0.2
    p_init_after_call: float = 0.8
    p_branch: float = 0.05
    p_output: float = 0.3
    p_stack_args: float = 0.4
    main_len: tuple = (15, 40)
    body_len: tuple = (3, 14)
    stack_words: int = 112
    fuel: int = 4000
    seed: int = 0

    def __post_init__(self):
        for name in ("p_call", "p_tailcall", "p_store", "p_load", "p_misbehave", "p_public_alloc",
                     "p_init_after_call", "p_branch", "p_output", "p_stack_args"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.depth_cap < 1 or self.max_functions < 1 or self.max_frame_words < 1:
            raise ValueError("depth cap, function count and frame size must be >= 1")

    def layout(self) -> Layout:
        code_size = SLOT_BYTES * self.max_functions
        stack_base = code_size
        if self.stack_words * 4 < 64:
            raise ValueError("stack too small")
        globals_base = stack_base + self.stack_words * 4
        return Layout(code_base=0, code_size=code_size, stack_base=stack_base,
                      stack_size=self.stack_words * 4, globals_base=globals_base,
                      globals_size=16, out=globals_base)


@dataclass
class TestCase:
    __test__ = False  # not a pytest class
    layout: Layout
    code: CodeImage
    annot: AnnotationMap
    init: MachineState
    ps: PolicyState
    entry_args: tuple
    seed: tuple
    policy: str
    log: list = field(default_factory=list)

    def runner(self, policy: MicroPolicy | str | None = None,
               config: SemConfig = SemConfig()) -> Runner:
        if policy is None:
            policy = self.policy
        if isinstance(policy, str):
            policy = parse_policy(policy)
        return Runner(self.code, self.annot, policy, config)

    def initial_context(self, config: SemConfig = SemConfig()):
        return initial_context(self.layout, self.entry_args, config)

    def combined(self, config: SemConfig = SemConfig()) -> CombinedState:
        return CombinedState(self.init, self.ps, self.initial_context(config))

    @classmethod
    def from_asm(cls, asm, annot, policy: str = "none", seed: tuple = ()) -> "TestCase":
        """Wrap a parsed program: ``.init`` payloads, initial tags, pc at the entry."""
        lay = asm.layout
        vals = [0] * lay.size
        vals[0] = asm.entry
        for el, v in asm.init.items():
            vals[lay.index(el)] = v & 0xFFFFFFFF
        m0 = MachineState(lay, vals, initial_tags(lay))
        return cls(lay, asm.code, AnnotationMap(annot), m0, PolicyState.initial(),
                   tuple(asm.entry_args), tuple(seed), policy)

    def to_asm(self):
        from stacksafe.machine import AsmProgram
        init = {self.layout.element(i): v for i, v in enumerate(self.init.vals) if i and v}
        return AsmProgram(self.layout, self.code, self.init.vals[0], init, self.entry_args)

    @property
    def size(self) -> int:
        return sum(1 for ins in self.code.instrs.values() if ins.op is not Op.NOP)

    def features(self) -> dict:
        ops = [o for lst in self.annot.values() for o in lst]
        return {
            "calls": sum(isinstance(o, Call) for o in ops),
            "tailcalls": sum(isinstance(o, TailCall) for o in ops),
            "stack_args": sum(isinstance(o, (Call, TailCall)) and bool(o.stack_args) for o in ops),
            "public_allocs": sum(isinstance(o, Alloc) and o.public for o in ops),
        }


@dataclass
class _Act:
    fn: int
    base: int
    n: int  # frame bytes
    locals_: int  # local words at offsets 0, 4, ...
    saves: dict  # reg -> slot offset
    ra_off: int
    arg_offs: tuple  # incoming stack-arg word offsets
    k: int  # incoming register args
    ret_addr: int
    budget: int
    is_main: bool = False
    defined: set = field(default_factory=set)
    inited: set = field(default_factory=set)  # initialized local offsets
    owned: set = field(default_factory=set)
    pending: list = field(default_factory=list)  # ops for the next emitted instruction
    bias: int = 0  # post-return reload bias
    written_ancestors: list = field(default_factory=list)


class _Stop(Exception):
    pass


def _seed_tuple(seed) -> tuple:
    return tuple(int(s) for s in seed) if isinstance(seed, (tuple, list)) else (int(seed),)


class _Builder:
    def __init__(self, cfg: GenConfig, policy: MicroPolicy, seed: tuple):
        self.cfg = cfg
        self.policy = policy
        self.flags = policy.flags
        self.seed = seed
        words = np.random.SeedSequence(list(seed)).generate_state(2)
        self.r = random.Random(int(words[0]) << 32 | int(words[1]))
        self.lay = cfg.layout()
        lay = self.lay
        n = lay.code_size // 4
        self.lists = tuple(array("q", [-1 if j == 0 else 0] * n) for j in range(8))
        self.params = lay.kernel_params()
        self.instrs: dict[int, Instruction] = {}
        self.kinds: dict[int, Kind] = {}
        self.annot = AnnotationMap()
        self.log: list[str] = []
        self.next_fn = 0
        self.acts: list[_Act] = []

    # ------------------------------------------------------------ plumbing
    def rint(self, lo, hi):
        return self.r.randint(lo, hi)

    def value(self) -> int:
        return 42 if self.r.random() < 0.05 else self.r.randint(0, 15)

    def emit(self, ins: Instruction, kind: Kind = Kind.PLAIN, ops=None, benign=True) -> bool:
        """Execute ``ins`` at the current pc under the tested policy and record it.

        Returns False (without recording) when a benign candidate would
        failstop. A misbehavior or blessed step that failstops is recorded and
        ends generation.
        """
        pc = self.st.vals[0]
        lay = self.lay
        if not lay.in_code(pc) or pc % 4 or pc in self.instrs:
            raise _Stop("pc left generated territory")
        act = self.acts[-1] if self.acts else None
        slot_end = (pc // SLOT_BYTES + 1) * SLOT_BYTES
        if slot_end - pc < 8:
            raise _Stop("function slot exhausted")
        i = (pc - lay.code_base) // 4
        L = self.lists
        vals = (int(ins.op), REG_INDEX[ins.rd], REG_INDEX[ins.rs1], REG_INDEX[ins.rs2], ins.imm, int(kind))
        old = [L[j][i] for j in range(6)]
        for j in range(6):
            L[j][i] = vals[j]
        trial = self.st.copy()
        status, _ = _core.kernel.step(trial.vals, trial.tags, trial.ps, L, self.params, self.flags)
        if status == K.FAILSTOP and benign and kind == Kind.PLAIN:
            for j in range(6):
                L[j][i] = old[j]
            return False
        all_ops = list(act.pending) if act is not None else []
        if act is not None:
            act.pending = []
        all_ops += list(ops or ())
        self.instrs[pc] = ins
        if kind != Kind.PLAIN:
            self.kinds[pc] = kind
        if all_ops:
            self.annot[pc] = all_ops
        if status != K.OK:
            raise _Stop("failstop" if status == K.FAILSTOP else "halt")
        self.st = trial
        return True

    def sp(self) -> int:
        return self.st.vals[REG_INDEX["sp"]]

    def reg(self, name: str) -> int:
        return self.st.vals[REG_INDEX[name]]

    def tag_at(self, addr: int) -> int:
        idx = self.lay.mem_index(addr)
        return self.st.tags[idx] if idx is not None else -1

    # ------------------------------------------------------- loadability probe
    def _would_allow(self, ins: Instruction) -> bool:
        pc = self.st.vals[0]
        i = (pc - self.lay.code_base) // 4
        L = self.lists
        vals = (int(ins.op), REG_INDEX[ins.rd], REG_INDEX[ins.rs1], REG_INDEX[ins.rs2], ins.imm, 0)
        old = [L[j][i] for j in range(6)]
        for j in range(6):
            L[j][i] = vals[j]
        trial = self.st.copy()
        status, _ = _core.kernel.step(trial.vals, trial.tags, trial.ps, L, self.params, self.flags)
        for j in range(6):
            L[j][i] = old[j]
        return status == K.OK

    # ------------------------------------------------------------ registers
    def sources(self, act: _Act) -> list[str]:
        return sorted(act.defined) or ["zero"]

    def dests(self, act: _Act) -> list[str]:
        return list(TEMPS) + list(ARG_REGS) + sorted(act.owned)

    def set_dest(self, act: _Act, rd: str) -> None:
        act.defined.add(rd)

    # ------------------------------------------------------------ benign ops
    def op_alu(self, act: _Act) -> None:
        rd = self.r.choice(self.dests(act))
        srcs = self.sources(act)
        c = self.r.random()
        if c < 0.3 or srcs == ["zero"]:
            ins = Instruction(Op.LI, rd, imm=self.value())
        elif c < 0.5:
            ins = Instruction(Op.ADDI, rd, self.r.choice(srcs), imm=self.rint(-4, 8))
        elif c < 0.65:
            ins = Instruction(Op.MOV, rd, self.r.choice(srcs))
        else:
            op = self.r.choice((Op.ADD, Op.SUB, Op.AND, Op.OR, Op.XOR))
            ins = Instruction(op, rd, self.r.choice(srcs), self.r.choice(srcs))
        if self.emit(ins):
            self.set_dest(act, rd)

    def op_output(self, act: _Act, reg: str | None = None) -> None:
        reg = reg or self.r.choice(self.sources(act))
        self.emit(Instruction(Op.SW, rs1="zero", rs2=reg, imm=self.lay.out))

    def op_store(self, act: _Act) -> None:
        srcs = self.sources(act)
        c = self.r.random()
        if c < self.cfg.p_output:
            self.op_output(act)
        elif c < 0.45 and not act.is_main or c < 0.4:
            g = self.lay.globals_base + 4 * self.rint(1, self.lay.globals_size // 4 - 1)
            self.emit(Instruction(Op.SW, rs1="zero", rs2=self.r.choice(srcs), imm=g))
        else:
            off = 4 * self.rint(0, act.locals_ - 1)
            if self.emit(Instruction(Op.SW, rs1="sp", rs2=self.r.choice(srcs), imm=off)):
                act.inited.add(off)

    def readable(self, act: _Act) -> list[int]:
        return sorted(act.inited) + list(act.arg_offs)

    def op_load(self, act: _Act) -> None:
        rd = self.r.choice(self.dests(act))
        offs = self.readable(act)
        if offs and self.r.random() < 0.8:
            ins = Instruction(Op.LW, rd, "sp", imm=self.r.choice(offs))
        else:
            g = self.lay.globals_base + 4 * self.rint(0, self.lay.globals_size // 4 - 1)
            ins = Instruction(Op.LW, rd, "zero", imm=g)
        if self.emit(ins):
            self.set_dest(act, rd)

    def op_branch(self, act: _Act) -> None:
        pc = self.st.vals[0]
        skip = self.rint(1, 4)
        target = pc + 4 + 4 * skip
        if target // SLOT_BYTES != pc // SLOT_BYTES or (pc // SLOT_BYTES + 1) * SLOT_BYTES - target < 256:
            return self.op_alu(act)
        srcs = self.sources(act)
        op = self.r.choice((Op.BEQ, Op.BNE))
        self.emit(Instruction(op, rs1=self.r.choice(srcs), rs2=self.r.choice(srcs), imm=target))

    def op_reload(self, act: _Act) -> None:
        """After a return: re-read own data that a callee may have touched."""
        choices = [("local", o) for o in sorted(act.inited)]
        choices += [("local", o) for o in act.arg_offs]
        choices += [("sreg", s) for s in sorted(act.owned & act.defined)]
        if not choices:
            return self.op_alu(act)
        what, x = self.r.choice(choices)
        if what == "local":
            rd = self.r.choice(TEMPS)
            if self.emit(Instruction(Op.LW, rd, "sp", imm=x)):
                act.defined.add(rd)
                if self.r.random() < 0.7:
                    self.op_output(act, rd)
        else:
            self.op_output(act, x)

    # ------------------------------------------------------------ frames
    def new_frame(self, k: int, n_stack_args: int, ret_addr: int, is_main=False):
        cfg = self.cfg
        fn = self.next_fn
        self.next_fn += 1
        nloc = self.rint(1, cfg.max_frame_words)
        saves = [s for s in CALLEE_SAVED if self.r.random() < 0.3]
        off = 4 * nloc
        save_offs = {}
        for s in saves:
            save_offs[s] = off
            off += 4
        ra_off = off
        off += 4
        arg_offs = tuple(off + 4 * (n_stack_args - j) for j in range(1, n_stack_args + 1))
        n = off + 4 * n_stack_args
        lo, hi = cfg.main_len if is_main else cfg.body_len
        act = _Act(fn, fn * SLOT_BYTES, n, nloc, save_offs, ra_off, arg_offs, k, ret_addr,
                   self.rint(lo, hi), is_main)
        act.defined = {"zero", "sp"} | set(ARG_REGS[:k])
        return act

    def enter(self, act: _Act) -> None:
        n = act.n
        ops = []
        for j in range(act.locals_):
            if self.r.random() < self.cfg.p_public_alloc:
                ops.append(Alloc(True, -n + 4 * j, 4))
        ops.append(Alloc(False, -n, n))
        self.acts.append(act)
        self.emit(Instruction(Op.ADDI, "sp", "sp", imm=-n), Kind.HEADER1, ops)
        self.emit(Instruction(Op.SW, rs1="sp", rs2="ra", imm=act.ra_off), Kind.HEADER2)
        for s, off in act.saves.items():
            self.emit(Instruction(Op.SW, rs1="sp", rs2=s, imm=off), Kind.SAVEREG)
            act.owned.add(s)
        for j in range(act.locals_):
            if self.r.random() < self.cfg.p_init_after_call:
                srcs = [r for r in act.defined if r not in ("zero", "sp")]
                if srcs and self.r.random() < 0.5:
                    src = self.r.choice(sorted(srcs))
                else:
                    src = self.r.choice(TEMPS)
                    if not self.emit(Instruction(Op.LI, src, imm=self.value())):
                        continue
                    act.defined.add(src)
                if self.emit(Instruction(Op.SW, rs1="sp", rs2=src, imm=4 * j)):
                    act.inited.add(4 * j)

    def leave_frame(self, act: _Act) -> None:
        for s, off in act.saves.items():
            self.emit(Instruction(Op.LW, s, "sp", imm=off), Kind.RESTOREREG)
        self.emit(Instruction(Op.LW, "ra", "sp", imm=act.ra_off), Kind.RETURN1)
        self.emit(Instruction(Op.ADDI, "sp", "sp", imm=act.n), Kind.RETURN2, [Dealloc(0, act.n)])

    def can_call(self) -> bool:
        return (len(self.acts) < self.cfg.depth_cap + 1 and self.next_fn < self.cfg.max_functions)

    def set_args(self, act: _Act, k: int, lo: int = 0) -> None:
        for r in ARG_REGS[lo:k]:
            if r not in act.defined or self.r.random() < 0.3:
                if self.emit(Instruction(Op.LI, r, imm=self.value())):
                    act.defined.add(r)
        for r in ARG_REGS[lo:k]:
            if r not in act.defined:
                raise _Stop("could not define argument")

    def op_call(self, act: _Act) -> None:
        k = self.rint(0, 3)
        nsa = self.rint(1, 2) if self.r.random() < self.cfg.p_stack_args else 0
        self.set_args(act, k)
        target = self.next_fn * SLOT_BYTES
        for j in range(1, nsa + 1):
            srcs = [r for r in act.defined if r != "sp"]
            ops = [Alloc(False, -4 * nsa, 4 * nsa)] if j == 1 else []
            self.emit(Instruction(Op.SW, rs1="sp", rs2=self.r.choice(sorted(srcs)), imm=-4 * j),
                      Kind.STOREARG, ops)
        sas = (("sp", -4 * nsa, 4 * nsa),) if nsa else ()
        pc = self.st.vals[0]
        self.emit(Instruction(Op.JAL, "ra", imm=target), Kind.CALL,
                  [Call(target, ARG_REGS[:k], sas)])
        callee = self.new_frame(k, nsa, pc + 4)
        self.body(callee)
        # back in the caller (sp and pc as the callee left them)
        if self.st.vals[0] != pc + 4:
            raise _Stop("callee returned elsewhere")
        act.defined = {"zero", "sp"} | (act.defined & act.owned)
        if nsa:
            act.pending.append(Dealloc(-4 * nsa, 4 * nsa))
        act.bias = 3

    def op_tailcall(self, act: _Act) -> None:
        k = self.rint(act.k, 3)
        self.set_args(act, k)
        target = self.next_fn * SLOT_BYTES
        self.leave_frame(act)
        self.emit(Instruction(Op.J, imm=target), Kind.TAILCALL, [TailCall(target, ARG_REGS[:k], ())])
        self.acts.pop()
        callee = self.new_frame(k, 0, act.ret_addr)
        self.enter(callee)
        self.run_body(callee)

    # ------------------------------------------------------------ misbehavior
    def ancestor_addrs(self, act: _Act) -> list[int]:
        top = self.sp() + act.n
        return list(range(top, self.lay.stack_top, 4))

    def caller_live_words(self, act: _Act) -> list[int]:
        """Words of the direct caller's frame it may still read or return through."""
        if len(self.acts) < 2:
            return []
        c = self.acts[-2]
        csp = self.sp() + act.n
        offs = set(c.inited) | set(c.arg_offs) | set(c.saves.values()) | {c.ra_off}
        return [csp + o for o in sorted(offs) if self.lay.in_stack(csp + o)]

    def _plan(self, act: _Act, shape: str):
        """Pick concrete operands for ``shape``: (key instruction, detail) or None."""
        sp = self.sp()
        tmp = self.r.choice(TEMPS)
        r = self.r
        if shape in ("cross_load", "read_before_write"):
            if shape == "cross_load":
                cands = self.ancestor_addrs(act)
            else:
                cands = [sp + 4 * j for j in range(act.locals_) if 4 * j not in act.inited]
            if not cands:
                return None
            ok = [a for a in cands if self._would_allow(Instruction(Op.LW, tmp, "sp", imm=a - sp))]
            addr = r.choice(ok if ok and r.random() < 0.5 else cands)
            return Instruction(Op.LW, tmp, "sp", imm=addr - sp), f"addr={addr}"
        if shape == "cross_store":
            cands = self.ancestor_addrs(act)
            if not cands:
                return None
            ok = [a for a in cands if self._would_allow(Instruction(Op.SW, rs1="sp", rs2="zero", imm=a - sp))]
            live = self.caller_live_words(act)
            x = r.random()
            pool = ok if ok and x < 0.5 else live if live and x < 0.8 else cands
            addr = r.choice(pool)
            return Instruction(Op.SW, rs1="sp", rs2=tmp, imm=addr - sp), f"addr={addr}"
        if shape == "ra_tamper":
            return Instruction(Op.SW, rs1="sp", rs2=tmp, imm=act.ra_off), f"ret={act.ret_addr}"
        if shape == "sp_tamper":
            return Instruction(Op.ADDI, "sp", "sp", imm=8), ""
        victims = [s for s in CALLEE_SAVED if s not in act.owned]
        if not victims:
            return None
        s = r.choice(victims)
        return Instruction(Op.LI, s, imm=self.value()), f"reg={s}"

    def misbehave(self, act: _Act) -> None:
        """Emit one catalog misbehavior. Half the time, shapes the tested
        policy would stop on the spot are redrawn (up to a few tries), so
        misbehaviors that slip through get to show their consequences."""
        r = self.r
        persist = r.random() < 0.5
        plan = None
        for _ in range(6 if persist else 1):
            shape = r.choice(MISBEHAVIORS)
            plan = self._plan(act, shape)
            if plan is not None and (not persist or self._would_allow(plan[0])):
                break
        if plan is None:
            return
        key, detail = plan
        if key.op is Op.SW and key.rs2 in TEMPS:
            value = act.ret_addr + 4 * r.randint(1, 4) if shape == "ra_tamper" else self.value()
            srcs = [x for x in self.sources(act) if x not in ("zero", "sp")]
            if shape != "ra_tamper" and srcs and r.random() < 0.5:
                key = key._replace(rs2=r.choice(srcs))
            elif self.emit(Instruction(Op.LI, key.rs2, imm=value)):
                act.defined.add(key.rs2)
            else:
                return
        self.log.append(f"{shape} pc={self.st.vals[0]} {detail}".rstrip())
        self.emit(key, benign=False)
        if key.op is Op.LW:
            act.defined.add(key.rd)
            if r.random() < 0.7:
                self.op_output(act, key.rd)
            elif r.random() < 0.5:
                if self.emit(Instruction(Op.MOV, "a0", key.rd)):
                    act.defined.add("a0")

    # ------------------------------------------------------------ bodies
    def body(self, act: _Act) -> None:
        self.enter(act)
        self.run_body(act)

    def run_body(self, act: _Act) -> None:
        cfg = self.cfg
        r = self.r
        while act.budget > 0:
            act.budget -= 1
            pc = self.st.vals[0]
            if (pc // SLOT_BYTES + 1) * SLOT_BYTES - pc < 200:
                break
            if act.bias > 0:
                act.bias -= 1
                if r.random() < 0.6:
                    self.op_reload(act)
                    continue
            x = r.random()
            if not act.is_main and x < cfg.p_misbehave:
                self.misbehave(act)
                continue
            x = r.random()
            if x < cfg.p_call:
                if self.can_call():
                    self.op_call(act)
                    continue
            elif x < cfg.p_call + cfg.p_tailcall:
                if not act.is_main and self.next_fn < cfg.max_functions:
                    self.op_tailcall(act)
                    return
            x = r.random()
            if x < cfg.p_store:
                self.op_store(act)
            elif x < cfg.p_store + cfg.p_load:
                self.op_load(act)
            elif x < cfg.p_store + cfg.p_load + cfg.p_branch:
                self.op_branch(act)
            else:
                self.op_alu(act)
        if act.is_main:
            self.op_output(act)
            self.emit(Instruction(Op.HALT))
            raise _Stop("done")
        self.leave_frame(act)
        self.emit(Instruction(Op.JALR, "zero", "ra"), Kind.RETURN3, [Return()])
        self.acts.pop()

    # ------------------------------------------------------------ driver
    def build(self) -> TestCase:
        lay = self.lay
        r = self.r
        vals = [0] * lay.size
        for name in REG_INDEX:
            if name not in ("zero", "sp", "ra"):
                vals[REG_INDEX[name]] = r.randint(0, 15)
        vals[REG_INDEX["sp"]] = lay.stack_top
        for i in range(MEM_BASE_INDEX, lay.size):
            vals[i] = r.randint(0, 15)
        m0 = MachineState(lay, vals, initial_tags(lay))
        ps0 = PolicyState.initial()
        self.st = FlatState.of(m0, ps0)
        k0 = r.randint(0, 2)
        main = self.new_frame(k0, 0, 0, is_main=True)
        try:
            self.body(main)
        except _Stop as e:
            self.log.append(f"stop: {e}")
        return self.finish(m0, ps0, ARG_REGS[:k0])

    def finish(self, m0, ps0, entry_args) -> TestCase:
        lay = self.lay
        code = CodeImage(lay)
        for fn in range(self.next_fn):
            base = fn * SLOT_BYTES
            used = [a for a in self.instrs if base <= a < base + SLOT_BYTES]
            if not used:
                continue
            for a in range(base, max(used) + 4, 4):
                code.instrs[a] = self.instrs.get(a, Instruction(Op.NOP))
        for a, kd in self.kinds.items():
            code.kinds[a] = kd
        pc = self.st.vals[0]
        if lay.in_code(pc) and pc not in code.instrs:
            code.instrs[pc] = Instruction(Op.HALT)
        return TestCase(lay, code, self.annot, m0, ps0, tuple(entry_args), self.seed,
                        self.policy.name, self.log)


def generate(cfg: GenConfig = GenConfig(), policy: MicroPolicy | str = "di+regs",
             seed=None) -> TestCase:
    """Build one test case by executing it under ``policy`` as it is generated."""
    if isinstance(policy, str):
        policy = parse_policy(policy)
    return _Builder(cfg, policy, _seed_tuple(cfg.seed if seed is None else seed)).build()


def spawn_variant(s: CombinedState, K_set, rng: np.random.Generator) -> CombinedState:
    """Vary the machine on K; policy state and context are copied unchanged."""
    from stacksafe.machine import k_variant
    return CombinedState(k_variant(s.m, K_set, rng), s.ps, s.ctx)


# ------------------------------------------------------------------ shrinking

def _with_code(tc: TestCase, instrs: dict, kinds: dict, annot: dict) -> TestCase:
    code = CodeImage(tc.layout, dict(instrs), dict(kinds))
    return replace(tc, code=code, annot=AnnotationMap({a: list(o) for a, o in annot.items() if a in instrs}))


def shrink(tc: TestCase, still_fails: Callable[[TestCase], bool], max_rounds: int = 20) -> TestCase:
    """Greedy reduction: drop whole functions, truncate function tails and
    NOP out single instructions while ``still_fails`` keeps holding."""
    if not still_fails(tc):
        raise ValueError("test case does not fail; nothing to shrink")

    def ok(c: TestCase) -> bool:
        try:
            return still_fails(c)
        except Exception:
            return False

    cur = tc
    for _ in range(max_rounds):
        changed = False
        # (c) remove whole functions: calls into them become NOPs
        slots = sorted({a // SLOT_BYTES for a in cur.code.instrs})
        for slot in slots[1:]:
            lo, hi = slot * SLOT_BYTES, (slot + 1) * SLOT_BYTES
            instrs = {a: i for a, i in cur.code.instrs.items() if not lo <= a < hi}
            kinds = {a: k for a, k in cur.code.kinds.items() if a in instrs}
            annot = {a: o for a, o in cur.annot.items() if a in instrs}
            for a, ins in list(instrs.items()):
                if ins.op in (Op.JAL, Op.J) and lo <= ins.imm < hi:
                    instrs[a] = Instruction(Op.NOP)
                    kinds.pop(a, None)
                    annot.pop(a, None)
            cand = _with_code(cur, instrs, kinds, annot)
            if ok(cand):
                cur, changed = cand, True
        # (a) truncate trailing instructions of each function
        for slot in sorted({a // SLOT_BYTES for a in cur.code.instrs}):
            addrs = sorted(a for a in cur.code.instrs if a // SLOT_BYTES == slot)
            lo, hi = 0, len(addrs)
            while lo < hi:
                mid = (lo + hi) // 2
                keep = set(addrs[:mid])
                instrs = {a: i for a, i in cur.code.instrs.items() if a // SLOT_BYTES != slot or a in keep}
                cand = _with_code(cur, instrs, {a: k for a, k in cur.code.kinds.items() if a in instrs},
                                  cur.annot)
                if mid < len(addrs) and ok(cand):
                    hi = mid
                else:
                    lo = mid + 1
            if lo < len(addrs):
                keep = set(addrs[:lo])
                instrs = {a: i for a, i in cur.code.instrs.items() if a // SLOT_BYTES != slot or a in keep}
                cur = _with_code(cur, instrs, {a: k for a, k in cur.code.kinds.items() if a in instrs},
                                 cur.annot)
                changed = True
        # (b) replace single instructions with NOP
        for a in sorted(cur.code.instrs):
            if cur.code.instrs[a].op is Op.NOP:
                continue
            instrs = dict(cur.code.instrs)
            instrs[a] = Instruction(Op.NOP)
            kinds = {b: k for b, k in cur.code.kinds.items() if b != a}
            annot = {b: o for b, o in cur.annot.items() if b != a}
            cand = _with_code(cur, instrs, kinds, annot)
            if ok(cand):
                cur, changed = cand, True
        if not changed:
            break
    return cur
