//! Built-in benchmark programs, embedded as assembly text.
//!
//! Shared mutable state travels through small handle tables (`env` arrays
//! holding allocation ids), so the traced arguments of worker functions stay
//! schedule-independent while the data they guard interleaves freely.

use thiserror::Error;

use crate::value::Value;
use crate::vm::{load_program, Program};

/// Thread-safe work queue: chunks pushed under a mutex, slots guarded by a
/// counting semaphore. Chunk order is not functionally relevant, so outputs
/// compare as multisets.
const WORKQUEUE: &str = r#"@output multiset

func addChunk(env: i64[], x: i64) -> i64 {
entry:
  sem_wait freeSlots
  cmp_lt c, x, 0
  br_cond c, fixup, push
fixup:
  sub x, 0, x          ; normalize negative chunks
  br push
push:
  lock qmutex
  load q, env, 0
  load nx, env, 1
  load ni, nx, 0
  store q, ni, x
  add ni2, ni, 1
  store nx, 0, ni2
  unlock qmutex
  ret 1
}

func wq_worker(env: i64[], x: i64) -> i64 {
entry:
  call r, addChunk, env, x
  ret 0
}

func scheck(s: i64[]) -> i64 {
entry:
  load r, s, 0
  ret r
}

func main(t: i64, a: i64, b: i64, c: i64, d: i64) {
entry:
  alloc chunks, 4
  alloc nix, 1
  store nix, 0, 0
  alloc env, 2
  store env, 0, chunks
  store env, 1, nix
  sem_post freeSlots
  sem_post freeSlots
  sem_post freeSlots
  sem_post freeSlots
  cmp_le st, t, 1
  br_cond st, seq, par
seq:
  call r1, wq_worker, env, a
  call r2, wq_worker, env, b
  call r3, wq_worker, env, c
  call r4, wq_worker, env, d
  br snap
par:
  spawn t1, wq_worker, env, a
  spawn t2, wq_worker, env, b
  spawn t3, wq_worker, env, c
  spawn t4, wq_worker, env, d
  join t1
  join t2
  join t3
  join t4
  br snap
snap:
  ; order-insensitive view of the queue: sort a copy, then check it
  alloc scopy, 4
  add i, 0, 0
  br cp
cp:
  cmp_lt cc, i, 4
  br_cond cc, cpb, s0
cpb:
  load cv, chunks, i
  store scopy, i, cv
  add i, i, 1
  br cp
s0:
  add i, 1, 0
  br souter
souter:
  cmp_lt oc, i, 4
  br_cond oc, sinner0, checks
sinner0:
  add j, i, 0
  br sinner
sinner:
  cmp_gt jc, j, 0
  br_cond jc, sbody, snext
sbody:
  sub jm1, j, 1
  load sa, scopy, jm1
  load sb, scopy, j
  cmp_gt swp, sa, sb
  br_cond swp, sswap, snext
sswap:
  store scopy, jm1, sb
  store scopy, j, sa
  sub j, j, 1
  br sinner
snext:
  add i, i, 1
  br souter
checks:
  call v1, scheck, scopy
  call v2, scheck, scopy
  br fin
fin:
  output chunks
  ret
}
"#;

/// Concurrent integer sort: one partition pass, two workers quicksorting
/// disjoint buffers, then a sortedness check and a merge.
const QSORTMT: &str = r#"func qsort_rec(xs: i64[], lo: i64, hi: i64) -> i64 {
entry:
  cmp_lt c, lo, hi
  br_cond c, part, done
part:
  load pivot, xs, hi
  add i, lo, 0
  add j, lo, 0
  br loop
loop:
  cmp_lt lc, j, hi
  br_cond lc, body, after
body:
  load vj, xs, j
  cmp_lt sc, vj, pivot
  br_cond sc, swap, next
swap:
  load vi, xs, i
  store xs, j, vi
  store xs, i, vj
  add i, i, 1
  br next
next:
  add j, j, 1
  br loop
after:
  load vh, xs, hi
  load vi2, xs, i
  store xs, hi, vi2
  store xs, i, vh
  sub im1, i, 1
  add ip1, i, 1
  call l, qsort_rec, xs, lo, im1
  call r, qsort_rec, xs, ip1, hi
  ret 1
done:
  ret 0
}

func qsort_worker(buf: i64[], k: i64, env: i64[]) -> i64 {
entry:
  sub hi, k, 1
  call r, qsort_rec, buf, 0, hi
  load stats, env, 0
  lock smutex
  load s, stats, 0
  add s1, s, 1
  store stats, 0, s1
  unlock smutex
  ret 0
}

func check(out: i64[]) -> i64 {
entry:
  len n, out
  add i, 0, 0
  br loop
loop:
  sub nm1, n, 1
  cmp_lt c, i, nm1
  br_cond c, body, done
body:
  load a, out, i
  add i1, i, 1
  load b, out, i1
  cmp_le ok, a, b
  br_cond ok, next, bad
next:
  add i, i, 1
  br loop
bad:
  ret 0
done:
  ret 1
}

func main(t: i64, xs: i64[]) {
entry:
  len n, xs
  add lk, 0, 0
  add i, 0, 0
  load pivot, xs, 0
  br cloop
cloop:
  cmp_lt c, i, n
  br_cond c, cbody, cdone
cbody:
  load v, xs, i
  cmp_lt lt, v, pivot
  br_cond lt, cinc, cnext
cinc:
  add lk, lk, 1
  br cnext
cnext:
  add i, i, 1
  br cloop
cdone:
  sub rk, n, lk
  alloc left, lk
  alloc right, rk
  alloc stats, 1
  store stats, 0, 0
  alloc env, 1
  store env, 0, stats
  add i, 0, 0
  add li, 0, 0
  add ri, 0, 0
  br floop
floop:
  cmp_lt c2, i, n
  br_cond c2, fbody, fdone
fbody:
  load v2, xs, i
  cmp_lt lt2, v2, pivot
  br_cond lt2, toleft, toright
toleft:
  store left, li, v2
  add li, li, 1
  br fnext
toright:
  store right, ri, v2
  add ri, ri, 1
  br fnext
fnext:
  add i, i, 1
  br floop
fdone:
  cmp_le st, t, 1
  br_cond st, seq, par
seq:
  call wa, qsort_worker, left, lk, env
  call wb, qsort_worker, right, rk, env
  br checks
par:
  spawn ta, qsort_worker, left, lk, env
  spawn tb, qsort_worker, right, rk, env
  join ta
  join tb
  br checks
checks:
  call ck1, check, left
  call ck2, check, right
  alloc out, n
  add i, 0, 0
  br m1
m1:
  cmp_lt c3, i, lk
  br_cond c3, m1b, m2pre
m1b:
  load v3, left, i
  store out, i, v3
  add i, i, 1
  br m1
m2pre:
  add j, 0, 0
  br m2
m2:
  cmp_lt c4, j, rk
  br_cond c4, m2b, fin
m2b:
  load v4, right, j
  add k, lk, j
  store out, k, v4
  add j, j, 1
  br m2
fin:
  output out
  ret
}
"#;

/// Branch-heavy numeric kernel. `cndf` carries the sign-flip branch across
/// six basic blocks; `blend` exposes an order-dependent accumulator value to
/// its basic blocks while keeping entry/exit values schedule-independent.
const NUMERIKERNEL: &str = r#"func cndf(x: f64) -> f64 {
b1:
  cmp_lt neg, x, 0.0
  br_cond neg, b2, b3
b2:
  sub x, 0.0, x        ; take the absolute value
  const sign, 1
  br b4
b3:
  const sign, 0
  br b4
b4:
  add xp1, x, 1.0
  div t, x, xp1
  mul th, t, 0.5
  add y, th, 0.5
  cmp_eq flip, sign, 1
  br_cond flip, b5, b6
b5:
  sub y, 1.0, y        ; mirror the negative side
  br b6
b6:
  ret y
}

func blend(x: f64, w: f64, env: i64[]) -> f64 {
b1:
  load acc, env, 3
  lock amutex
  load a, acc, 0
  mul ah, a, 0.5
  add a2, ah, x
  store acc, 0, a2
  unlock amutex
  add w, a2, 0.0
  cmp_lt small, w, 1.0
  br_cond small, b2, b3
b2:
  br b4
b3:
  br b4
b4:
  const w, 0.0
  mul xh, x, 0.5
  add y, xh, 1.25
  ret y
}

func worker(env: i64[]) -> i64 {
entry:
  load xs, env, 0
  load out, env, 1
  load idx, env, 2
  len n, xs
  br loop
loop:
  lock imutex
  load i, idx, 0
  add i1, i, 1
  store idx, 0, i1
  unlock imutex
  cmp_lt c, i, n
  br_cond c, body, done
body:
  load x, xs, i
  call y, cndf, x
  call z, blend, y, 0.0, env
  add o, x, z
  store out, i, o
  br loop
done:
  ret 0
}

func finalize(a: f64[], b: f64[]) -> f64 {
entry:
  len n, a
  add i, 0, 0
  const s, 0.0
  br loop
loop:
  cmp_lt c, i, n
  br_cond c, body, done
body:
  load v, b, i
  add s, s, v
  add i, i, 1
  br loop
done:
  ret s
}

func main(t: i64, xs: f64[]) {
entry:
  len n, xs
  alloc out, n
  alloc idx, 1
  store idx, 0, 0
  alloc acc, 1
  store acc, 0, 0.0
  alloc env, 4
  store env, 0, xs
  store env, 1, out
  store env, 2, idx
  store env, 3, acc
  cmp_le st, t, 1
  br_cond st, seq, par
seq:
  call w, worker, env
  br fin
par:
  spawn t1, worker, env
  spawn t2, worker, env
  spawn t3, worker, env
  spawn t4, worker, env
  join t1
  join t2
  join t3
  join t4
  br fin
fin:
  call f1, finalize, xs, out
  call f2, finalize, xs, out
  output out
  ret
}
"#;

/// Shared counter incremented under one mutex: the race-condition target.
const RACER: &str = r#"func inc_worker(env: i64[], k: i64) -> i64 {
entry:
  load cell, env, 0
  add i, 0, 0
  br loop
loop:
  cmp_lt c, i, k
  br_cond c, body, done
body:
  lock cmutex
  load v, cell, 0
  add v2, v, 1
  store cell, 0, v2
  unlock cmutex
  add i, i, 1
  br loop
done:
  ret 0
}

func main(t: i64) {
entry:
  alloc cell, 1
  store cell, 0, 0
  alloc env, 1
  store env, 0, cell
  cmp_le st, t, 1
  br_cond st, seq, par
seq:
  call r, inc_worker, env, 8
  br fin
par:
  spawn t1, inc_worker, env, 2
  spawn t2, inc_worker, env, 2
  spawn t3, inc_worker, env, 2
  spawn t4, inc_worker, env, 2
  join t1
  join t2
  join t3
  join t4
  br fin
fin:
  load total, cell, 0
  output total
  ret
}
"#;

/// Request-dispatch loop over simulated I/O, with parameterless helpers.
const HTTPISH: &str = r#"func helper_ok() -> i64 {
entry:
  ret 200
}

func helper_busy() -> i64 {
entry:
  ret 503
}

func helper_err() -> i64 {
entry:
  ret 400
}

func handle_request(env: i64[], code: i64) -> i64 {
entry:
  cmp_eq is1, code, 1
  br_cond is1, ok, ck2
ck2:
  cmp_eq is2, code, 2
  br_cond is2, busy, err
ok:
  call r, helper_ok
  br respond
busy:
  call r, helper_busy
  br respond
err:
  call r, helper_err
  br respond
respond:
  load obuf, env, 2
  lock iomutex
  store obuf, 0, r
  io_write obuf, 1
  unlock iomutex
  ret r
}

func http_worker(env: i64[]) -> i64 {
entry:
  load q, env, 0
  load idx, env, 1
  len n, q
  br loop
loop:
  lock qmutex
  load i, idx, 0
  add i1, i, 1
  store idx, 0, i1
  unlock qmutex
  cmp_lt c, i, n
  br_cond c, body, done
body:
  load code, q, i
  call r, handle_request, env, code
  load scell, env, 3
  lock smutex
  load s, scell, 0
  add s2, s, r
  store scell, 0, s2
  unlock smutex
  br loop
done:
  ret 0
}

func main(t: i64, reqs: i64[]) {
entry:
  len n, reqs
  alloc q, n
  alloc idx, 1
  store idx, 0, 0
  alloc obuf, 2
  alloc scell, 1
  store scell, 0, 0
  alloc env, 4
  store env, 0, q
  store env, 1, idx
  store env, 2, obuf
  store env, 3, scell
  alloc rbuf, 2
  add i, 0, 0
  br rdloop
rdloop:
  cmp_lt c, i, n
  br_cond c, rdbody, rddone
rdbody:
  io_read rbuf, 1
  load b, rbuf, 0
  store q, i, b
  add i, i, 1
  br rdloop
rddone:
  cmp_le st, t, 1
  br_cond st, seq, par
seq:
  call w, http_worker, env
  br fin
par:
  spawn t1, http_worker, env
  spawn t2, http_worker, env
  spawn t3, http_worker, env
  spawn t4, http_worker, env
  join t1
  join t2
  join t3
  join t4
  br fin
fin:
  load total, scell, 0
  output total
  ret
}
"#;

pub const BUILTINS: [(&str, &str); 5] = [
    ("workqueue", WORKQUEUE),
    ("qsortmt", QSORTMT),
    ("numerikernel", NUMERIKERNEL),
    ("racer", RACER),
    ("httpish", HTTPISH),
];

#[derive(Debug, Error)]
#[error("unknown builtin `{0}`")]
pub struct BuiltinError(pub String);

pub fn builtin_names() -> Vec<&'static str> {
    BUILTINS.iter().map(|(n, _)| *n).collect()
}

pub fn builtin_source(name: &str) -> Result<&'static str, BuiltinError> {
    BUILTINS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| *s)
        .ok_or_else(|| BuiltinError(name.to_string()))
}

/// Load a built-in program by name.
pub fn builtin(name: &str) -> Result<Program, BuiltinError> {
    let src = builtin_source(name)?;
    Ok(load_program(name, src).expect("builtin sources always load"))
}

/// Default input for a builtin, without the leading thread-count value that
/// the harness prepends.
pub fn builtin_default_input(name: &str) -> Result<Vec<Value>, BuiltinError> {
    match name {
        "workqueue" => Ok(vec![
            Value::I64(0),
            Value::I64(1),
            Value::I64(2),
            Value::I64(3),
        ]),
        "qsortmt" => Ok(vec![Value::I64Array(vec![5, 3, 7, 1, 4, 8, 2, 6])]),
        "numerikernel" => Ok(vec![Value::F64Array(vec![
            -2.0, -1.25, 0.5, 1.75, 2.5, -0.75, 3.25, 1.0,
        ])]),
        "racer" => Ok(vec![]),
        "httpish" => Ok(vec![Value::I64Array(vec![1, 2, 3, 1, 2, 3, 1, 1])]),
        other => Err(BuiltinError(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_builtins_load() {
        for name in builtin_names() {
            let p = builtin(name).unwrap();
            assert!(p.functions.len() >= 1, "{}", name);
            assert!(p.metadata.lines_of_code > 0);
        }
    }

    #[test]
    fn workqueue_has_main_and_addchunk() {
        let p = builtin("workqueue").unwrap();
        assert!(p.function_index("main").is_some());
        assert!(p.function_index("addChunk").is_some());
    }

    #[test]
    fn numerikernel_cndf_has_six_blocks() {
        let p = builtin("numerikernel").unwrap();
        let f = &p.functions[p.function_index("cndf").unwrap()];
        assert_eq!(f.blocks.len(), 6);
    }
}
