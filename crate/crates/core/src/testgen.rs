//! Random program and input generation for differential testing, plus
//! fixture loading shared by the test suites.
//!
//! Generated functions are diamond-bearing by construction and valid by
//! construction: operand types always line up, divisors and shift amounts
//! that must not trap are constants, and memory accesses stay inside a
//! 16-byte global or the argument buffer. The else path is usually produced
//! by mutating the shape of the then path, which mirrors the
//! structurally-similar branches the melder is built for.

use crate::interp::ArgValue;
use crate::ir::*;
use rand::prelude::*;
use rand::rngs::StdRng;
use std::collections::HashMap;
use std::path::PathBuf;

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Names of all corpus fixtures, for corpus-wide checks.
pub const FIXTURES: &[&str] = &[
    "abs_diff.mir",
    "cond_load.mir",
    "count_lower.mir",
    "div_pick.mir",
    "div_safe.mir",
    "low_score.mir",
    "nested.mir",
    "offset_pick.mir",
    "saturating_sub.mir",
    "shift_pick.mir",
    "to_upper.mir",
    "two_globals.mir",
    "two_store.mir",
];

pub fn load_fixture(name: &str) -> Module {
    let path = fixtures_dir().join(name);
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("cannot read fixture {}: {e}", path.display()));
    crate::text::parse_module(&text).unwrap_or_else(|e| panic!("fixture {name} does not parse: {e}"))
}

/// Default argument generator. Integer parameters get a mix of small and
/// full-range values; pointer parameters get a random buffer whose length is
/// written into the following integer parameter when there is one (the
/// buffer-plus-length convention the fixtures use).
pub fn gen_inputs(rng: &mut StdRng, f: &Function) -> Vec<ArgValue> {
    let mut args = Vec::with_capacity(f.params.len());
    let mut companion_len: Option<u64> = None;
    for (_, ty) in &f.params {
        if *ty != IrType::Ptr {
            if let Some(len) = companion_len.take() {
                args.push(ArgValue::Int(len & ty.mask()));
                continue;
            }
        }
        match ty {
            IrType::I1 => args.push(ArgValue::Int(rng.gen_range(0..=1))),
            IrType::I8 => args.push(ArgValue::Int(rng.gen_range(0..=255))),
            IrType::I32 | IrType::I64 => {
                let v = match rng.gen_range(0..3) {
                    0 => rng.gen_range(0..=16u64),
                    1 => (rng.gen_range(-8i64..=8) as u64) & ty.mask(),
                    _ => rng.gen::<u64>() & ty.mask(),
                };
                args.push(ArgValue::Int(v));
            }
            IrType::Ptr => {
                let len = rng.gen_range(16..=64usize);
                let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                companion_len = Some(len as u64);
                args.push(ArgValue::Buffer(bytes));
            }
        }
    }
    args
}

const GLOBAL_SIZE: usize = 16;
const MAX_MEM_OFFSET: i64 = 8;

struct FnGen<'r> {
    rng: &'r mut StdRng,
    next_reg: usize,
    use_memory: bool,
    /// Pointer bases safe to access at offsets `0..=MAX_MEM_OFFSET`.
    mem_bases: Vec<Value>,
}

type Pool = HashMap<IrType, Vec<Value>>;

impl<'r> FnGen<'r> {
    fn fresh(&mut self) -> String {
        let n = self.next_reg;
        self.next_reg += 1;
        format!("t{n}")
    }

    fn rand_const(&mut self, ty: IrType) -> Value {
        match ty {
            IrType::I1 => Value::const_int(ty, self.rng.gen_range(0..=1)),
            IrType::I8 => Value::const_int(ty, self.rng.gen_range(-100..=100)),
            _ => Value::const_int(ty, self.rng.gen_range(-16..=64)),
        }
    }

    fn pick(&mut self, pool: &Pool, ty: IrType) -> Value {
        let candidates = pool.get(&ty).map(|v| v.as_slice()).unwrap_or(&[]);
        if !candidates.is_empty() && self.rng.gen_bool(0.7) {
            candidates.choose(self.rng).unwrap().clone()
        } else {
            self.rand_const(ty)
        }
    }

    fn push_def(pool: &mut Pool, inst: &Instruction) {
        if let Some(v) = inst.result_value() {
            pool.entry(v.ty()).or_default().push(v);
        }
    }

    /// One random instruction appended to `out`, drawing operands from
    /// `pool` and registering any result back into it.
    fn gen_instr(&mut self, pool: &mut Pool, out: &mut Vec<Instruction>) {
        let mem = self.use_memory && !self.mem_bases.is_empty();
        let choice = self.rng.gen_range(0..if mem { 10 } else { 7 });
        let inst = match choice {
            0..=2 => {
                let op = *[Opcode::Add, Opcode::Sub, Opcode::Mul, Opcode::And, Opcode::Or, Opcode::Xor]
                    .choose(self.rng)
                    .unwrap();
                let ty = if self.rng.gen_bool(0.7) { IrType::I64 } else { IrType::I32 };
                let a = self.pick(pool, ty);
                let b = self.pick(pool, ty);
                Instruction::binary(op, ty, self.fresh(), a, b)
            }
            3 => {
                let op = if self.rng.gen_bool(0.5) { Opcode::Udiv } else { Opcode::Sdiv };
                let a = self.pick(pool, IrType::I64);
                // Mostly constant nonzero divisors; occasionally a pool value
                // so trap behavior gets exercised too.
                let b = if self.rng.gen_bool(0.2) {
                    self.pick(pool, IrType::I64)
                } else {
                    Value::const_int(IrType::I64, self.rng.gen_range(1..=9))
                };
                Instruction::binary(op, IrType::I64, self.fresh(), a, b)
            }
            4 => {
                let op = *[Opcode::Shl, Opcode::Lshr, Opcode::Ashr].choose(self.rng).unwrap();
                let a = self.pick(pool, IrType::I64);
                let amt = Value::const_int(IrType::I64, self.rng.gen_range(0..=63));
                Instruction::binary(op, IrType::I64, self.fresh(), a, amt)
            }
            5 => {
                let pred = *[
                    IcmpPred::Eq,
                    IcmpPred::Ne,
                    IcmpPred::Ult,
                    IcmpPred::Slt,
                    IcmpPred::Sge,
                    IcmpPred::Ule,
                ]
                .choose(self.rng)
                .unwrap();
                let a = self.pick(pool, IrType::I64);
                let b = self.pick(pool, IrType::I64);
                Instruction::icmp(pred, self.fresh(), a, b)
            }
            6 => {
                let c = self.pick(pool, IrType::I1);
                let a = self.pick(pool, IrType::I64);
                let b = self.pick(pool, IrType::I64);
                Instruction::select(IrType::I64, self.fresh(), c, a, b)
            }
            7 => {
                let base = self.mem_bases.choose(self.rng).unwrap().clone();
                let off = Value::const_int(IrType::I64, self.rng.gen_range(0..=MAX_MEM_OFFSET));
                let addr = Instruction::ptradd(self.fresh(), base, off);
                let addr_val = addr.result_value().unwrap();
                Self::push_def(pool, &addr);
                out.push(addr);
                Instruction::load(IrType::I8, self.fresh(), addr_val)
            }
            8 => {
                let base = self.mem_bases.choose(self.rng).unwrap().clone();
                let off = Value::const_int(IrType::I64, self.rng.gen_range(0..=MAX_MEM_OFFSET));
                let addr = Instruction::ptradd(self.fresh(), base, off);
                let addr_val = addr.result_value().unwrap();
                Self::push_def(pool, &addr);
                out.push(addr);
                let v = self.pick(pool, IrType::I8);
                Instruction::store(IrType::I8, v, addr_val)
            }
            _ => {
                let base = self.mem_bases.choose(self.rng).unwrap().clone();
                let off = self.pick(pool, IrType::I64);
                let off = if off.is_const() {
                    off
                } else {
                    // Keep runtime offsets in bounds.
                    Value::const_int(IrType::I64, self.rng.gen_range(0..=MAX_MEM_OFFSET))
                };
                Instruction::ptradd(self.fresh(), base, off)
            }
        };
        Self::push_def(pool, &inst);
        out.push(inst);
    }

    /// A path block body. With a shape to imitate, most instructions repeat
    /// the shape's operation with freshly chosen operands, so the two paths
    /// end up largely alignable.
    fn gen_path(&mut self, outer: &Pool, shape: Option<&[Instruction]>) -> Vec<Instruction> {
        let mut pool = outer.clone();
        let mut out = Vec::new();
        match shape {
            None => {
                let len = self.rng.gen_range(0..=5);
                for _ in 0..len {
                    self.gen_instr(&mut pool, &mut out);
                }
            }
            Some(shape) => {
                for inst in shape {
                    if self.rng.gen_bool(0.15) {
                        continue; // drop
                    }
                    if self.rng.gen_bool(0.75) {
                        out.push(self.echo_shape(inst, &mut pool));
                    } else {
                        self.gen_instr(&mut pool, &mut out);
                    }
                    if self.rng.gen_bool(0.1) {
                        self.gen_instr(&mut pool, &mut out);
                    }
                }
            }
        }
        out
    }

    /// A compatible twin of `inst` with operands re-drawn from `pool`.
    fn echo_shape(&mut self, inst: &Instruction, pool: &mut Pool) -> Instruction {
        let mut operands = Vec::with_capacity(inst.operands.len());
        for (i, op) in inst.operands.iter().enumerate() {
            let trap_position = (inst.opcode.is_div() || inst.opcode.is_shift()) && i == 1;
            let mem_addr = (inst.opcode == Opcode::Load && i == 0)
                || (inst.opcode == Opcode::Store && i == 1)
                || (inst.opcode == Opcode::PtrAdd && i == 0);
            let v = if trap_position || op.is_const() {
                // Keep the safety of the original constant choice.
                match inst.opcode {
                    Opcode::Udiv | Opcode::Sdiv => {
                        Value::const_int(IrType::I64, self.rng.gen_range(1..=9))
                    }
                    Opcode::Shl | Opcode::Lshr | Opcode::Ashr => {
                        Value::const_int(IrType::I64, self.rng.gen_range(0..=63))
                    }
                    Opcode::PtrAdd => {
                        Value::const_int(IrType::I64, self.rng.gen_range(0..=MAX_MEM_OFFSET))
                    }
                    _ => self.rand_const(op.ty()),
                }
            } else if mem_addr {
                if op.ty() == IrType::Ptr && pool.get(&IrType::Ptr).is_some_and(|p| !p.is_empty()) {
                    pool[&IrType::Ptr].choose(self.rng).unwrap().clone()
                } else {
                    self.mem_bases.choose(self.rng).unwrap().clone()
                }
            } else {
                self.pick(pool, op.ty())
            };
            operands.push(v);
        }
        let mut twin = inst.clone();
        twin.operands = operands;
        if twin.result.is_some() {
            twin.result = Some(self.fresh());
        }
        Self::push_def(pool, &twin);
        twin
    }
}

/// Generates a valid module whose first function contains one or two
/// diamond or triangle regions. Deterministic for a given RNG state.
pub fn gen_module(rng: &mut StdRng) -> Module {
    let use_memory = rng.gen_bool(0.6);
    let with_buffer = use_memory && rng.gen_bool(0.5);
    let mut params = vec![("a".to_string(), IrType::I64), ("b".to_string(), IrType::I64)];
    if rng.gen_bool(0.5) {
        params.push(("c".to_string(), IrType::I32));
    }
    if with_buffer {
        params.push(("buf".to_string(), IrType::Ptr));
        params.push(("len".to_string(), IrType::I64));
    }

    let mut globals = Vec::new();
    let mut mem_bases = Vec::new();
    if use_memory {
        globals.push(Global::zeroed("gmem", GLOBAL_SIZE));
        mem_bases.push(Value::global("gmem"));
    }
    if with_buffer {
        let index = params.iter().position(|(n, _)| n == "buf").unwrap();
        mem_bases.push(Value::Arg {
            index,
            name: "buf".to_string(),
            ty: IrType::Ptr,
        });
    }

    let mut g = FnGen {
        rng,
        next_reg: 0,
        use_memory,
        mem_bases,
    };

    let mut pool: Pool = HashMap::new();
    for (i, (name, ty)) in params.iter().enumerate() {
        pool.entry(*ty).or_default().push(Value::Arg {
            index: i,
            name: name.clone(),
            ty: *ty,
        });
    }

    let mut blocks = Vec::new();
    let mut entry_body = Vec::new();
    for _ in 0..g.rng.gen_range(1..=2) {
        g.gen_instr(&mut pool, &mut entry_body);
    }

    let regions = if g.rng.gen_bool(0.3) { 2 } else { 1 };
    let mut head_label = "entry".to_string();
    let mut head_body = entry_body;
    for r in 0..regions {
        let then_label = format!("p{r}t");
        let else_label = format!("p{r}e");
        let merge_label = if r + 1 == regions { "done".to_string() } else { format!("m{r}") };
        let triangle = g.rng.gen_bool(0.35);

        let ca = g.pick(&pool, IrType::I64);
        let cb = g.pick(&pool, IrType::I64);
        let pred = *[IcmpPred::Slt, IcmpPred::Eq, IcmpPred::Uge, IcmpPred::Ne]
            .choose(g.rng)
            .unwrap();
        let cond = Instruction::icmp(pred, g.fresh(), ca, cb);
        let cond_val = cond.result_value().unwrap();
        FnGen::push_def(&mut pool, &cond);
        head_body.push(cond);

        let outer = pool.clone();
        let then_body = g.gen_path(&outer, None);
        let mut then_pool = outer.clone();
        for inst in &then_body {
            FnGen::push_def(&mut then_pool, inst);
        }

        let (else_body, else_pool, else_edge) = if triangle {
            (None, outer.clone(), head_label.clone())
        } else {
            let body = if g.rng.gen_bool(0.7) {
                g.gen_path(&outer, Some(&then_body))
            } else {
                g.gen_path(&outer, None)
            };
            let mut p = outer.clone();
            for inst in &body {
                FnGen::push_def(&mut p, inst);
            }
            (Some(body), p, else_label.clone())
        };

        head_body.push(Instruction::br_cond(
            cond_val,
            then_label.clone(),
            if triangle { merge_label.clone() } else { else_label.clone() },
        ));
        let mut head_block_body = std::mem::take(&mut head_body);
        blocks.push(BasicBlock::new(head_label.clone(), std::mem::take(&mut head_block_body)));

        let mut then_block = then_body;
        then_block.push(Instruction::br(merge_label.clone()));
        blocks.push(BasicBlock::new(then_label.clone(), then_block));
        if let Some(mut body) = else_body {
            body.push(Instruction::br(merge_label.clone()));
            blocks.push(BasicBlock::new(else_label.clone(), body));
        }

        // Merge block: phis over i64 values from each side, then continue.
        pool = outer;
        let mut merge_body = Vec::new();
        for _ in 0..g.rng.gen_range(1..=2) {
            let tv = then_pool[&IrType::I64].choose(g.rng).unwrap().clone();
            let ev = else_pool[&IrType::I64].choose(g.rng).unwrap().clone();
            let phi = Instruction::phi(
                IrType::I64,
                g.fresh(),
                vec![(tv, then_label.clone()), (ev, else_edge.clone())],
            );
            FnGen::push_def(&mut pool, &phi);
            merge_body.push(phi);
        }

        head_label = merge_label;
        head_body = merge_body;
    }

    // Final block: fold a couple of pool values into the return.
    let mut tail = head_body;
    let a = g.pick(&pool, IrType::I64);
    let b = g.pick(&pool, IrType::I64);
    let sum = Instruction::binary(Opcode::Xor, IrType::I64, g.fresh(), a, b);
    let ret_val = sum.result_value().unwrap();
    tail.push(sum);
    tail.push(Instruction::ret(Some(ret_val)));
    blocks.push(BasicBlock::new(head_label, tail));

    Module {
        functions: vec![Function {
            name: "f".to_string(),
            params,
            return_type: Some(IrType::I64),
            blocks,
            source_file: None,
        }],
        globals,
        safe_global: None,
    }
}

/// Random instruction-sequence pair for exercising the aligner, lengths at
/// most 8 per side. Operand values are arbitrary; only operations and types
/// matter to alignment.
pub fn gen_sequence_pair(rng: &mut StdRng) -> (Vec<Instruction>, Vec<Instruction>) {
    let mut counter = 0usize;
    let mut gen_seq = |rng: &mut StdRng, len: usize| {
        (0..len)
            .map(|_| {
                counter += 1;
                let r = format!("s{counter}");
                let c64 = Value::const_int(IrType::I64, 1);
                let c32 = Value::const_int(IrType::I32, 1);
                match rng.gen_range(0..8) {
                    0 => Instruction::binary(Opcode::Add, IrType::I64, r, c64.clone(), c64),
                    1 => Instruction::binary(Opcode::Add, IrType::I32, r, c32.clone(), c32),
                    2 => Instruction::binary(Opcode::Sub, IrType::I64, r, c64.clone(), c64),
                    3 => Instruction::binary(Opcode::Mul, IrType::I64, r, c64.clone(), c64),
                    4 => Instruction::icmp(IcmpPred::Slt, r, c64.clone(), c64),
                    5 => Instruction::icmp(IcmpPred::Eq, r, c64.clone(), c64),
                    6 => Instruction::load(IrType::I8, r, Value::global("m")),
                    _ => Instruction::store(IrType::I8, Value::const_int(IrType::I8, 0), Value::global("m")),
                }
            })
            .collect::<Vec<_>>()
    };
    let n = rng.gen_range(0..=8);
    let m = rng.gen_range(0..=8);
    (gen_seq(rng, n), gen_seq(rng, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::validate_module;
    use crate::region::{collect_valid_branches, FilterSpec};

    #[test]
    fn fixtures_all_parse_and_validate() {
        for name in FIXTURES {
            let m = load_fixture(name);
            assert!(validate_module(&m).is_empty(), "{name} has violations");
        }
    }

    #[test]
    fn generated_modules_validate_and_bear_regions() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut with_region = 0;
        for i in 0..150 {
            let m = gen_module(&mut rng);
            let violations = validate_module(&m);
            assert!(violations.is_empty(), "generated module {i}: {violations:?}");
            let f = &m.functions[0];
            if !collect_valid_branches(f, &FilterSpec::default(), 64).is_empty() {
                with_region += 1;
            }
        }
        assert!(with_region > 120, "only {with_region}/150 had collectible regions");
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = gen_module(&mut StdRng::seed_from_u64(42));
        let b = gen_module(&mut StdRng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn inputs_match_signatures_and_length_convention() {
        let m = load_fixture("to_upper.mir");
        let f = m.function("to_upper").unwrap();
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..20 {
            let args = gen_inputs(&mut rng, f);
            assert_eq!(args.len(), 2);
            match (&args[0], &args[1]) {
                (ArgValue::Buffer(bytes), ArgValue::Int(len)) => {
                    assert_eq!(bytes.len() as u64, *len)
                }
                other => panic!("unexpected argument shapes: {other:?}"),
            }
        }
    }
}
