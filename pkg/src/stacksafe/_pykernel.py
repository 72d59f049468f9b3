"""Interpreted step/run kernel over flat state arrays.

This module and the compiled ``_ckernel`` implement the same contract and are
differential-tested against each other. State is three mutable integer
sequences (``vals``, ``tags``, ``ps``); the program is the 8-tuple of
per-slot arrays built by ``machine.Program``; ``P`` is the layout parameter
tuple from ``Layout.kernel_params``.
"""

M32 = 0xFFFFFFFF

# step status
OK = 0
FAILSTOP = 1
HALTED = 2

# run terminators
T_RETURNED = 0
T_FUEL = 1
T_HALTED = 2
T_STOPPED = 3

# opcodes (mirrors machine.Op)
ADD, SUB, AND, OR, XOR, ADDI, LI, MOV, LW, SW, JAL, JALR, BEQ, BNE, J, NOP, HALT = range(17)

# instruction kinds (mirrors machine.Kind)
K_PLAIN, K_CALL, K_HEADER1, K_HEADER2, K_RETURN1, K_RETURN2, K_RETURN3, \
    K_TAILCALL, K_SAVEREG, K_RESTOREREG, K_STOREARG = range(11)

# tag kinds, low 4 bits of a tag; color in the remaining bits
NOTAG, UNUSED, CELL, PCCOLOR, REGOWNED, RETADDR = range(6)

# entry/exit sequencing states
S_NONE, S_CALLED, S_H1, S_ENTRY, S_R1, S_R2 = range(6)

# policy flags
F_DI = 1
F_LTC = 2
F_REGS = 4
F_LOAD_NO_CHECK = 8
F_STORE_NO_CHECK = 16
F_HEADER_NO_INIT = 32
F_PER_DEPTH = 64
F_STORE_NO_UPDATE = 128

# register indices
R_ZERO, R_RA, R_SP = 1, 2, 3
R_S0 = 12

MAX_DEPTH = 64
PS_SIZE = 4 + 2 * MAX_DEPTH


def _mem_index(a, P):
    if a & 3:
        return -1
    if P[2] <= a < P[3]:
        return P[7] + ((a - P[2]) >> 2)
    if P[4] <= a < P[5]:
        return P[8] + ((a - P[4]) >> 2)
    return -1


def step(vals, tags, ps, L, P, flags):
    """Execute one guarded step in place. Returns ``(status, event)`` with
    ``event`` = -1 for the silent event."""
    OPS, RDS, RS1S, RS2S, IMMS, KINDS = L[0], L[1], L[2], L[3], L[4], L[5]
    pc = vals[0]
    off = pc - P[0]
    if off < 0 or off & 3:
        return HALTED, -1
    i = off >> 2
    if i >= P[1]:
        return HALTED, -1
    op = OPS[i]
    if op < 0 or op == HALT:
        return HALTED, -1
    rd = RDS[i]
    rs1 = RS1S[i]
    rs2 = RS2S[i]
    imm = IMMS[i]
    npc = (pc + 4) & M32
    wreg = 0
    wval = 0
    midx = -1
    store = False
    event = -1
    if op <= XOR:
        a = vals[rs1]
        b = vals[rs2]
        if op == ADD:
            wval = (a + b) & M32
        elif op == SUB:
            wval = (a - b) & M32
        elif op == AND:
            wval = a & b
        elif op == OR:
            wval = a | b
        else:
            wval = a ^ b
        wreg = rd
    elif op == ADDI:
        wval = (vals[rs1] + imm) & M32
        wreg = rd
    elif op == LI:
        wval = imm & M32
        wreg = rd
    elif op == MOV:
        wval = vals[rs1]
        wreg = rd
    elif op == LW:
        addr = (vals[rs1] + imm) & M32
        midx = _mem_index(addr, P)
        if midx < 0:
            return HALTED, -1
        wval = vals[midx]
        wreg = rd
    elif op == SW:
        addr = (vals[rs1] + imm) & M32
        midx = _mem_index(addr, P)
        if midx < 0:
            return HALTED, -1
        wval = vals[rs2]
        store = True
        if addr == P[6]:
            event = wval
    elif op == JAL:
        wreg = rd
        wval = npc
        npc = imm & M32
    elif op == JALR:
        t = (vals[rs1] + imm) & M32
        wreg = rd
        wval = npc
        npc = t
    elif op == BEQ:
        if vals[rs1] == vals[rs2]:
            npc = imm & M32
    elif op == BNE:
        if vals[rs1] != vals[rs2]:
            npc = imm & M32
    elif op == J:
        npc = imm & M32

    if flags:
        if _policy(vals, tags, ps, P, flags, op, rd, rs1, rs2, imm, KINDS[i],
                   wreg, midx, store):
            return FAILSTOP, -1

    if wreg > R_ZERO:
        vals[wreg] = wval
    if store:
        vals[midx] = wval
    vals[0] = npc
    return OK, event


def _in_frame(vals, ps, midx, P):
    """Is memory index ``midx`` inside the current top frame [sp, sp+N)?"""
    d = ps[2]
    if d < 1 or midx < P[7] or midx >= P[8]:
        return False
    n = ps[5 + 2 * (d - 1)]
    addr = P[2] + ((midx - P[7]) << 2)
    sp = vals[R_SP]
    return sp <= addr < sp + n


def _policy(vals, tags, ps, P, flags, op, rd, rs1, rs2, imm, kind, wreg, midx, store):
    """Check and apply tag rules. Returns True on failstop; on allow, tags and
    ps are updated (payload side effects of frame init/clear included)."""
    color = ps[0]
    seq = ps[3]
    regs = flags & F_REGS
    di = flags & F_DI
    cell = CELL | (color << 4)
    own = REGOWNED | (color << 4)
    if not regs and (kind == K_SAVEREG or kind == K_RESTOREREG):
        kind = K_PLAIN

    if seq == S_CALLED:
        if kind != K_HEADER1:
            return True
    elif seq == S_H1:
        if kind != K_HEADER2:
            return True
    elif seq == S_R1:
        if kind != K_RETURN2:
            return True
    elif seq == S_R2:
        if kind != K_RETURN3 and kind != K_TAILCALL:
            return True
    else:
        if kind == K_HEADER1 or kind == K_HEADER2 or kind == K_RETURN2 \
                or kind == K_RETURN3 or kind == K_TAILCALL:
            return True
        if kind == K_SAVEREG and seq != S_ENTRY:
            return True

    if regs:
        # callee-saved sources must be owned by the running activation
        if op <= XOR or op == BEQ or op == BNE:
            if (rs1 >= R_S0 and tags[rs1] != own) or (rs2 >= R_S0 and tags[rs2] != own):
                return True
        elif op == ADDI or op == MOV or op == LW or op == JALR:
            if rs1 >= R_S0 and tags[rs1] != own:
                return True
        elif op == SW:
            if rs1 >= R_S0 and tags[rs1] != own:
                return True
            if rs2 >= R_S0 and tags[rs2] != own and kind != K_SAVEREG:
                return True

    if wreg == R_SP and kind != K_HEADER1 and kind != K_RETURN2:
        return True

    new_seq = S_NONE
    stack_mem = midx >= P[7] and midx < P[8]

    if kind == K_PLAIN:
        if stack_mem:
            t = tags[midx]
            if store:
                if di:
                    if flags & F_STORE_NO_CHECK:
                        if t & 15 == UNUSED:
                            tags[midx] = cell
                    elif t & 15 == UNUSED or t == cell:
                        tags[midx] = cell
                    else:
                        return True
                elif not flags & F_STORE_NO_UPDATE:
                    tags[midx] = cell
            elif not flags & F_LOAD_NO_CHECK and t != cell:
                return True
        if regs and wreg >= R_S0:
            if di:
                if tags[wreg] != own:
                    return True
            else:
                tags[wreg] = own
        # (a failstop above happens before any retag of a register)
    elif kind == K_CALL:
        if op != JAL or rd != R_RA:
            return True
        new_seq = S_CALLED
    elif kind == K_TAILCALL:
        if op != J:
            return True
        new_seq = S_CALLED
    elif kind == K_HEADER1:
        if op != ADDI or rd != R_SP or rs1 != R_SP or imm >= 0 or (-imm) & 3:
            return True
        n = -imm
        sp = vals[R_SP]
        d = ps[2]
        if sp & 3 or sp - n < P[2] or sp > P[3] or d >= MAX_DEPTH:
            return True
        ps[4 + 2 * d] = color
        ps[5 + 2 * d] = n
        ps[2] = d + 1
        if (flags & F_LTC) and not (flags & F_PER_DEPTH):
            nc = ps[1]
            ps[1] = nc + 1
        else:
            nc = d + 1
        if di and not flags & F_HEADER_NO_INIT:
            ncell = CELL | (nc << 4)
            lo = P[7] + ((sp - n - P[2]) >> 2)
            for k in range(lo, lo + (n >> 2)):
                if tags[k] & 15 == UNUSED:
                    tags[k] = ncell
                    vals[k] = 0
        ps[0] = nc
        tags[0] = PCCOLOR | (nc << 4)
        new_seq = S_H1
    elif kind == K_HEADER2:
        if op != SW or rs1 != R_SP or rs2 != R_RA or not _in_frame(vals, ps, midx, P):
            return True
        t = tags[midx]
        if di and t & 15 != UNUSED and t != cell:
            return True
        tags[midx] = RETADDR | (color << 4)
        new_seq = S_ENTRY
    elif kind == K_SAVEREG:
        if op != SW or rs1 != R_SP or rs2 < R_S0 or not _in_frame(vals, ps, midx, P):
            return True
        t = tags[midx]
        if di and t & 15 != UNUSED and t != cell:
            return True
        tags[midx] = tags[rs2]
        tags[rs2] = own
        new_seq = S_ENTRY
    elif kind == K_RESTOREREG:
        if op != LW or rs1 != R_SP or rd < R_S0 or not _in_frame(vals, ps, midx, P):
            return True
        t = tags[midx]
        if t & 15 != REGOWNED:
            return True
        tags[rd] = t
        tags[midx] = cell
    elif kind == K_RETURN1:
        if op != LW or rd != R_RA or rs1 != R_SP or not _in_frame(vals, ps, midx, P):
            return True
        if tags[midx] != RETADDR | (color << 4):
            return True
        tags[midx] = cell
        new_seq = S_R1
    elif kind == K_RETURN2:
        d = ps[2]
        if op != ADDI or rd != R_SP or rs1 != R_SP or d < 1:
            return True
        n = ps[5 + 2 * (d - 1)]
        sp = vals[R_SP]
        if imm != n or sp + n > P[3] or sp < P[2]:
            return True
        if di:
            lo = P[7] + ((sp - P[2]) >> 2)
            for k in range(lo, lo + (n >> 2)):
                tags[k] = UNUSED
                vals[k] = 0
        ps[2] = d - 1
        ps[0] = ps[4 + 2 * (d - 1)]
        tags[0] = PCCOLOR | (ps[0] << 4)
        new_seq = S_R2
    elif kind == K_RETURN3:
        if op != JALR or rd != R_ZERO or rs1 != R_RA or imm != 0:
            return True
    elif kind == K_STOREARG:
        if op != SW or rs1 != R_SP or not stack_mem:
            return True
        addr = P[2] + ((midx - P[7]) << 2)
        if addr >= vals[R_SP]:
            return True
        if (flags & F_LTC) and not (flags & F_PER_DEPTH):
            nxt = ps[1]
        else:
            nxt = ps[2] + 1
        ncell = CELL | (nxt << 4)
        t = tags[midx]
        if di and t & 15 != UNUSED and t != ncell:
            return True
        tags[midx] = ncell
    else:
        return True
    ps[3] = new_seq
    return False


def raw_exec(vals, L, P):
    """Unguarded step on ``vals`` in place; returns ``(event_or_None, halted)``."""
    st, ev = step(vals, None, None, L, P, 0)
    if st == HALTED:
        return None, True
    return (ev if ev >= 0 else None), False


def run(vals, tags, ps, L, P, flags, depth, d, fuel, stop_at_annot):
    """Step until depth < d (d >= 1), fuel is spent, the machine halts, or
    (if ``stop_at_annot``) the pc reaches an annotated slot.

    Depth moves by the per-slot delta of each executed instruction. A
    failstop counts as silently consuming the remaining fuel.
    Returns ``(steps, writes, terminator, depth, failstopped)`` where writes is
    a list of ``(step_index, payload)``.
    """
    DD = L[6]
    ANN = L[7]
    base = P[0]
    ncode = P[1]
    writes = []
    steps = 0
    term = T_FUEL
    failed = False
    while steps < fuel:
        off = vals[0] - base
        i = off >> 2
        valid = off >= 0 and not off & 3 and i < ncode
        if stop_at_annot and valid and ANN[i]:
            term = T_STOPPED
            break
        st, ev = step(vals, tags, ps, L, P, flags)
        if st == HALTED:
            term = T_HALTED
            break
        if st == FAILSTOP:
            failed = True
            steps = fuel
            break
        if ev >= 0:
            writes.append((steps, ev))
        steps += 1
        depth += DD[i]
        if depth < d:
            term = T_RETURNED
            break
    return steps, writes, term, depth, failed
