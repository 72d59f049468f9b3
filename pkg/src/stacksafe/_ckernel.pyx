# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled step/run kernel; same contract as ``_pykernel``."""

ctypedef long long i64

cdef enum:
    M32 = 0xFFFFFFFF
    OK = 0
    FAILSTOP = 1
    HALTED = 2
    T_RETURNED = 0
    T_FUEL = 1
    T_HALTED = 2
    T_STOPPED = 3

cdef enum:
    ADD, SUB, AND_, OR_, XOR, ADDI, LI, MOV, LW, SW, JAL, JALR, BEQ, BNE, J, NOP, HALT

cdef enum:
    K_PLAIN, K_CALL, K_HEADER1, K_HEADER2, K_RETURN1, K_RETURN2, K_RETURN3, \
        K_TAILCALL, K_SAVEREG, K_RESTOREREG, K_STOREARG

cdef enum:
    NOTAG, UNUSED, CELL, PCCOLOR, REGOWNED, RETADDR

cdef enum:
    S_NONE, S_CALLED, S_H1, S_ENTRY, S_R1, S_R2

cdef enum:
    F_DI = 1
    F_LTC = 2
    F_REGS = 4
    F_LOAD_NO_CHECK = 8
    F_STORE_NO_CHECK = 16
    F_HEADER_NO_INIT = 32
    F_PER_DEPTH = 64
    F_STORE_NO_UPDATE = 128

cdef enum:
    R_ZERO = 1
    R_RA = 2
    R_SP = 3
    R_S0 = 12
    MAX_DEPTH = 64


cdef struct Layout:
    i64 code_base, ncode, stack_lo, stack_hi, glob_lo, glob_hi, out, mem0, glob0


cdef struct Prog:
    i64* op
    i64* rd
    i64* rs1
    i64* rs2
    i64* imm
    i64* kind
    i64* dd
    i64* ann


cdef inline i64 mem_index(i64 a, Layout* P) nogil:
    if a & 3:
        return -1
    if P.stack_lo <= a < P.stack_hi:
        return P.mem0 + ((a - P.stack_lo) >> 2)
    if P.glob_lo <= a < P.glob_hi:
        return P.glob0 + ((a - P.glob_lo) >> 2)
    return -1


cdef inline bint in_frame(i64* vals, i64* ps, i64 midx, Layout* P) nogil:
    cdef i64 d = ps[2]
    if d < 1 or midx < P.mem0 or midx >= P.glob0:
        return False
    cdef i64 n = ps[5 + 2 * (d - 1)]
    cdef i64 addr = P.stack_lo + ((midx - P.mem0) << 2)
    cdef i64 sp = vals[R_SP]
    return sp <= addr < sp + n


cdef bint policy(i64* vals, i64* tags, i64* ps, Layout* P, i64 flags, i64 op, i64 rd,
                 i64 rs1, i64 rs2, i64 imm, i64 kind, i64 wreg, i64 midx, bint store) nogil:
    cdef i64 color = ps[0]
    cdef i64 seq = ps[3]
    cdef i64 regs = flags & F_REGS
    cdef i64 di = flags & F_DI
    cdef i64 cell = CELL | (color << 4)
    cdef i64 own = REGOWNED | (color << 4)
    cdef i64 t, n, sp, d, nc, ncell, lo, k, addr, nxt
    cdef i64 new_seq = S_NONE
    cdef bint stack_mem
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

    stack_mem = midx >= P.mem0 and midx < P.glob0

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
                elif not (flags & F_STORE_NO_UPDATE):
                    tags[midx] = cell
            elif not (flags & F_LOAD_NO_CHECK) and t != cell:
                return True
        if regs and wreg >= R_S0:
            if di:
                if tags[wreg] != own:
                    return True
            else:
                tags[wreg] = own
    elif kind == K_CALL:
        if op != JAL or rd != R_RA:
            return True
        new_seq = S_CALLED
    elif kind == K_TAILCALL:
        if op != J:
            return True
        new_seq = S_CALLED
    elif kind == K_HEADER1:
        if op != ADDI or rd != R_SP or rs1 != R_SP or imm >= 0 or ((-imm) & 3):
            return True
        n = -imm
        sp = vals[R_SP]
        d = ps[2]
        if (sp & 3) or sp - n < P.stack_lo or sp > P.stack_hi or d >= MAX_DEPTH:
            return True
        ps[4 + 2 * d] = color
        ps[5 + 2 * d] = n
        ps[2] = d + 1
        if (flags & F_LTC) and not (flags & F_PER_DEPTH):
            nc = ps[1]
            ps[1] = nc + 1
        else:
            nc = d + 1
        if di and not (flags & F_HEADER_NO_INIT):
            ncell = CELL | (nc << 4)
            lo = P.mem0 + ((sp - n - P.stack_lo) >> 2)
            for k in range(lo, lo + (n >> 2)):
                if tags[k] & 15 == UNUSED:
                    tags[k] = ncell
                    vals[k] = 0
        ps[0] = nc
        tags[0] = PCCOLOR | (nc << 4)
        new_seq = S_H1
    elif kind == K_HEADER2:
        if op != SW or rs1 != R_SP or rs2 != R_RA or not in_frame(vals, ps, midx, P):
            return True
        t = tags[midx]
        if di and (t & 15) != UNUSED and t != cell:
            return True
        tags[midx] = RETADDR | (color << 4)
        new_seq = S_ENTRY
    elif kind == K_SAVEREG:
        if op != SW or rs1 != R_SP or rs2 < R_S0 or not in_frame(vals, ps, midx, P):
            return True
        t = tags[midx]
        if di and (t & 15) != UNUSED and t != cell:
            return True
        tags[midx] = tags[rs2]
        tags[rs2] = own
        new_seq = S_ENTRY
    elif kind == K_RESTOREREG:
        if op != LW or rs1 != R_SP or rd < R_S0 or not in_frame(vals, ps, midx, P):
            return True
        t = tags[midx]
        if (t & 15) != REGOWNED:
            return True
        tags[rd] = t
        tags[midx] = cell
    elif kind == K_RETURN1:
        if op != LW or rd != R_RA or rs1 != R_SP or not in_frame(vals, ps, midx, P):
            return True
        if tags[midx] != (RETADDR | (color << 4)):
            return True
        tags[midx] = cell
        new_seq = S_R1
    elif kind == K_RETURN2:
        d = ps[2]
        if op != ADDI or rd != R_SP or rs1 != R_SP or d < 1:
            return True
        n = ps[5 + 2 * (d - 1)]
        sp = vals[R_SP]
        if imm != n or sp + n > P.stack_hi or sp < P.stack_lo:
            return True
        if di:
            lo = P.mem0 + ((sp - P.stack_lo) >> 2)
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
        addr = P.stack_lo + ((midx - P.mem0) << 2)
        if addr >= vals[R_SP]:
            return True
        if (flags & F_LTC) and not (flags & F_PER_DEPTH):
            nxt = ps[1]
        else:
            nxt = ps[2] + 1
        ncell = CELL | (nxt << 4)
        t = tags[midx]
        if di and (t & 15) != UNUSED and t != ncell:
            return True
        tags[midx] = ncell
    else:
        return True
    ps[3] = new_seq
    return False


cdef int cstep(i64* vals, i64* tags, i64* ps, Prog* L, Layout* P, i64 flags,
               i64* event) nogil:
    cdef i64 pc = vals[0]
    cdef i64 off = pc - P.code_base
    cdef i64 i, op, rd, rs1, rs2, imm, npc, wreg = 0, wval = 0, midx = -1, a, b, addr
    cdef bint store = False
    event[0] = -1
    if off < 0 or (off & 3):
        return HALTED
    i = off >> 2
    if i >= P.ncode:
        return HALTED
    op = L.op[i]
    if op < 0 or op == HALT:
        return HALTED
    rd = L.rd[i]
    rs1 = L.rs1[i]
    rs2 = L.rs2[i]
    imm = L.imm[i]
    npc = (pc + 4) & M32
    if op <= XOR:
        a = vals[rs1]
        b = vals[rs2]
        if op == ADD:
            wval = (a + b) & M32
        elif op == SUB:
            wval = (a - b) & M32
        elif op == AND_:
            wval = a & b
        elif op == OR_:
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
        midx = mem_index(addr, P)
        if midx < 0:
            return HALTED
        wval = vals[midx]
        wreg = rd
    elif op == SW:
        addr = (vals[rs1] + imm) & M32
        midx = mem_index(addr, P)
        if midx < 0:
            return HALTED
        wval = vals[rs2]
        store = True
        if addr == P.out:
            event[0] = wval
    elif op == JAL:
        wreg = rd
        wval = npc
        npc = imm & M32
    elif op == JALR:
        a = (vals[rs1] + imm) & M32
        wreg = rd
        wval = npc
        npc = a
    elif op == BEQ:
        if vals[rs1] == vals[rs2]:
            npc = imm & M32
    elif op == BNE:
        if vals[rs1] != vals[rs2]:
            npc = imm & M32
    elif op == J:
        npc = imm & M32

    if flags:
        if policy(vals, tags, ps, P, flags, op, rd, rs1, rs2, imm, L.kind[i],
                  wreg, midx, store):
            event[0] = -1
            return FAILSTOP

    if wreg > R_ZERO:
        vals[wreg] = wval
    if store:
        vals[midx] = wval
    vals[0] = npc
    return OK


cdef void load_params(Layout* P, tuple params):
    P.code_base = params[0]
    P.ncode = params[1]
    P.stack_lo = params[2]
    P.stack_hi = params[3]
    P.glob_lo = params[4]
    P.glob_hi = params[5]
    P.out = params[6]
    P.mem0 = params[7]
    P.glob0 = params[8]


cdef void load_prog(Prog* L, i64[::1] op, i64[::1] rd, i64[::1] rs1, i64[::1] rs2,
                    i64[::1] imm, i64[::1] kind, i64[::1] dd, i64[::1] ann):
    L.op = &op[0]
    L.rd = &rd[0]
    L.rs1 = &rs1[0]
    L.rs2 = &rs2[0]
    L.imm = &imm[0]
    L.kind = &kind[0]
    L.dd = &dd[0]
    L.ann = &ann[0]


def step(i64[::1] vals, i64[::1] tags, i64[::1] ps, tuple L, tuple params, i64 flags):
    cdef Layout P
    cdef Prog prog
    cdef i64 ev
    cdef int st
    load_params(&P, params)
    load_prog(&prog, L[0], L[1], L[2], L[3], L[4], L[5], L[6], L[7])
    st = cstep(&vals[0], &tags[0], &ps[0], &prog, &P, flags, &ev)
    return st, ev


def run(i64[::1] vals, i64[::1] tags, i64[::1] ps, tuple L, tuple params, i64 flags,
        i64 depth, i64 d, i64 fuel, bint stop_at_annot):
    cdef Layout P
    cdef Prog prog
    cdef i64 ev, off, i, steps = 0
    cdef int st, term = T_FUEL
    cdef bint failed = False, valid
    cdef list writes = []
    cdef i64* v = &vals[0]
    cdef i64* t = &tags[0]
    cdef i64* p = &ps[0]
    load_params(&P, params)
    load_prog(&prog, L[0], L[1], L[2], L[3], L[4], L[5], L[6], L[7])
    while steps < fuel:
        off = v[0] - P.code_base
        i = off >> 2
        valid = off >= 0 and not (off & 3) and i < P.ncode
        if stop_at_annot and valid and prog.ann[i]:
            term = T_STOPPED
            break
        st = cstep(v, t, p, &prog, &P, flags, &ev)
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
        depth += prog.dd[i]
        if depth < d:
            term = T_RETURNED
            break
    return steps, writes, term, depth, failed
