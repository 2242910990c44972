//! Deterministic interpreter for IR functions.
//!
//! Executes a function on concrete arguments, producing the return value,
//! the final memory image, and exact dynamic instruction counts. Each
//! global and each pointer-argument buffer occupies its own address range
//! separated by 4KiB guard gaps; touching a gap traps, which makes invalid
//! memory accesses observable. The interpreter doubles as the
//! semantic-equivalence oracle: `differential_check` runs original and
//! transformed modules on shared inputs and compares everything observable
//! outside the safe global.

use crate::ir::*;
use std::collections::{BTreeMap, HashMap, HashSet};
use thiserror::Error;

/// Default instruction budget per interpretation.
pub const DEFAULT_FUEL: u64 = 10_000_000;

const GUARD_GAP: u64 = 4096;
const BASE_ADDR: u64 = 0x10000;

/// One concrete argument. Pointer parameters receive a buffer, which the
/// interpreter maps at a fresh address and passes by address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArgValue {
    Int(u64),
    Buffer(Vec<u8>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trap {
    DivByZero,
    UnmappedMemory,
    /// Shift amount at or above the operand width.
    InvalidShift,
}

impl std::fmt::Display for Trap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Trap::DivByZero => write!(f, "div-by-zero"),
            Trap::UnmappedMemory => write!(f, "unmapped-memory"),
            Trap::InvalidShift => write!(f, "invalid-shift"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Returned(Option<u64>),
    Trapped(Trap),
    FuelExhausted,
}

/// Everything observable from one interpretation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionTrace {
    pub outcome: Outcome,
    pub return_value: Option<u64>,
    /// Final bytes of every global, by name.
    pub final_memory: BTreeMap<String, Vec<u8>>,
    /// Final bytes of every buffer argument, by parameter index.
    pub final_buffers: Vec<(usize, Vec<u8>)>,
    /// Executed-instruction counts by opcode mnemonic.
    pub dyn_counts: BTreeMap<&'static str, u64>,
    pub cond_branch_count: u64,
    pub select_count: u64,
    pub total_dynamic_instructions: u64,
}

#[derive(Debug, Error)]
pub enum InterpError {
    #[error("unknown function @{0}")]
    UnknownFunction(String),
    #[error("@{function}: {message}")]
    ArgMismatch { function: String, message: String },
    #[error("fuel must be positive")]
    NoFuel,
}

enum RegionKind {
    Global(String),
    Buffer(usize),
}

struct MemRegion {
    base: u64,
    bytes: Vec<u8>,
    kind: RegionKind,
}

struct Memory {
    regions: Vec<MemRegion>,
}

impl Memory {
    fn build(module: &Module, buffers: Vec<(usize, Vec<u8>)>) -> (Memory, HashMap<String, u64>, Vec<u64>) {
        let mut regions = Vec::new();
        let mut global_base = HashMap::new();
        let mut buffer_base = Vec::new();
        let mut cursor = BASE_ADDR;
        let mut place = |bytes: Vec<u8>, kind: RegionKind, cursor: &mut u64| -> u64 {
            let base = *cursor;
            let span = (bytes.len() as u64).div_ceil(GUARD_GAP) * GUARD_GAP;
            *cursor += span + GUARD_GAP;
            regions.push(MemRegion { base, bytes, kind });
            base
        };
        for g in &module.globals {
            let base = place(g.init.clone(), RegionKind::Global(g.name.clone()), &mut cursor);
            global_base.insert(g.name.clone(), base);
        }
        for (index, bytes) in buffers {
            let base = place(bytes, RegionKind::Buffer(index), &mut cursor);
            buffer_base.push(base);
        }
        (Memory { regions }, global_base, buffer_base)
    }

    /// Resolves `addr..addr+size`; the whole access must land in one region.
    fn locate(&mut self, addr: u64, size: usize) -> Option<(&mut Vec<u8>, usize)> {
        for region in &mut self.regions {
            if addr >= region.base {
                let offset = (addr - region.base) as usize;
                if offset + size <= region.bytes.len() {
                    return Some((&mut region.bytes, offset));
                }
            }
        }
        None
    }
}

fn sign_extend(bits: u64, ty: IrType) -> i64 {
    let w = ty.bit_width();
    if w == 64 {
        bits as i64
    } else {
        let shift = 64 - w;
        ((bits << shift) as i64) >> shift
    }
}

/// Runs `function_name` on `args` with the given instruction budget.
///
/// Preconditions are hard errors: the function must exist, the argument
/// list must match the signature, and fuel must be positive. Traps and fuel
/// exhaustion are ordinary outcomes inside the trace.
pub fn interpret(
    module: &Module,
    function_name: &str,
    args: &[ArgValue],
    fuel: u64,
) -> Result<ExecutionTrace, InterpError> {
    let function = module
        .function(function_name)
        .ok_or_else(|| InterpError::UnknownFunction(function_name.to_string()))?;
    if fuel == 0 {
        return Err(InterpError::NoFuel);
    }
    if args.len() != function.params.len() {
        return Err(InterpError::ArgMismatch {
            function: function_name.to_string(),
            message: format!("expected {} arguments, got {}", function.params.len(), args.len()),
        });
    }
    let mut buffers = Vec::new();
    for (i, ((pname, pty), arg)) in function.params.iter().zip(args).enumerate() {
        match (pty, arg) {
            (IrType::Ptr, ArgValue::Buffer(bytes)) => buffers.push((i, bytes.clone())),
            (IrType::Ptr, ArgValue::Int(_)) => {
                return Err(InterpError::ArgMismatch {
                    function: function_name.to_string(),
                    message: format!("parameter %{pname} is ptr and needs a buffer argument"),
                })
            }
            (_, ArgValue::Buffer(_)) => {
                return Err(InterpError::ArgMismatch {
                    function: function_name.to_string(),
                    message: format!("parameter %{pname} is {pty} and needs an integer argument"),
                })
            }
            _ => {}
        }
    }

    let (mut memory, global_base, buffer_base) = Memory::build(module, buffers);
    let mut arg_values = Vec::with_capacity(args.len());
    let mut next_buffer = 0;
    for ((_, pty), arg) in function.params.iter().zip(args) {
        match arg {
            ArgValue::Int(v) => arg_values.push(v & pty.mask()),
            ArgValue::Buffer(_) => {
                arg_values.push(buffer_base[next_buffer]);
                next_buffer += 1;
            }
        }
    }

    let mut regs: HashMap<&str, u64> = HashMap::new();
    let mut counts: BTreeMap<&'static str, u64> = BTreeMap::new();
    let mut remaining = fuel;
    let mut block = 0usize;
    let mut prev_label: Option<&str> = None;

    let eval = |v: &Value, regs: &HashMap<&str, u64>, arg_values: &[u64], global_base: &HashMap<String, u64>| -> u64 {
        match v {
            Value::Const { bits, .. } => *bits,
            Value::Reg { name, .. } => *regs
                .get(name.as_str())
                .unwrap_or_else(|| panic!("register %{name} read before write")),
            Value::Global { name } => global_base[name],
            Value::Arg { index, .. } => arg_values[*index],
        }
    };

    let outcome = 'run: loop {
        let blk = &function.blocks[block];

        // Phis read the pre-entry state all at once.
        let mut phi_writes: Vec<(&str, u64)> = Vec::new();
        let mut ii = 0;
        while ii < blk.instructions.len() && blk.instructions[ii].opcode == Opcode::Phi {
            let inst = &blk.instructions[ii];
            if remaining == 0 {
                break 'run Outcome::FuelExhausted;
            }
            remaining -= 1;
            *counts.entry(inst.opcode.mnemonic()).or_insert(0) += 1;
            let prev = prev_label.expect("phi in entry block");
            let slot = inst
                .labels
                .iter()
                .position(|l| l == prev)
                .expect("phi covers the incoming edge");
            let v = eval(&inst.operands[slot], &regs, &arg_values, &global_base);
            phi_writes.push((inst.result.as_deref().unwrap(), v));
            ii += 1;
        }
        for (name, v) in phi_writes {
            regs.insert(name, v);
        }

        while ii < blk.instructions.len() {
            let inst = &blk.instructions[ii];
            ii += 1;
            if remaining == 0 {
                break 'run Outcome::FuelExhausted;
            }
            remaining -= 1;
            *counts.entry(inst.opcode.mnemonic()).or_insert(0) += 1;

            match inst.opcode {
                op if op.is_binary_int() => {
                    let ty = inst.result_type.unwrap();
                    let mask = ty.mask();
                    let a = eval(&inst.operands[0], &regs, &arg_values, &global_base) & mask;
                    let b = eval(&inst.operands[1], &regs, &arg_values, &global_base) & mask;
                    let result = match op {
                        Opcode::Add => a.wrapping_add(b),
                        Opcode::Sub => a.wrapping_sub(b),
                        Opcode::Mul => a.wrapping_mul(b),
                        Opcode::Udiv => {
                            if b == 0 {
                                break 'run Outcome::Trapped(Trap::DivByZero);
                            }
                            a / b
                        }
                        Opcode::Sdiv => {
                            if b == 0 {
                                break 'run Outcome::Trapped(Trap::DivByZero);
                            }
                            sign_extend(a, ty).wrapping_div(sign_extend(b, ty)) as u64
                        }
                        Opcode::And => a & b,
                        Opcode::Or => a | b,
                        Opcode::Xor => a ^ b,
                        Opcode::Shl | Opcode::Lshr | Opcode::Ashr => {
                            if b >= ty.bit_width() as u64 {
                                break 'run Outcome::Trapped(Trap::InvalidShift);
                            }
                            match op {
                                Opcode::Shl => a << b,
                                Opcode::Lshr => a >> b,
                                _ => (sign_extend(a, ty) >> b) as u64,
                            }
                        }
                        _ => unreachable!(),
                    };
                    regs.insert(inst.result.as_deref().unwrap(), result & mask);
                }
                Opcode::Icmp(pred) => {
                    let ty = inst.operands[0].ty();
                    let a = eval(&inst.operands[0], &regs, &arg_values, &global_base) & ty.mask();
                    let b = eval(&inst.operands[1], &regs, &arg_values, &global_base) & ty.mask();
                    let (sa, sb) = (sign_extend(a, ty), sign_extend(b, ty));
                    let r = match pred {
                        IcmpPred::Eq => a == b,
                        IcmpPred::Ne => a != b,
                        IcmpPred::Ult => a < b,
                        IcmpPred::Ule => a <= b,
                        IcmpPred::Ugt => a > b,
                        IcmpPred::Uge => a >= b,
                        IcmpPred::Slt => sa < sb,
                        IcmpPred::Sle => sa <= sb,
                        IcmpPred::Sgt => sa > sb,
                        IcmpPred::Sge => sa >= sb,
                    };
                    regs.insert(inst.result.as_deref().unwrap(), r as u64);
                }
                Opcode::Select => {
                    let c = eval(&inst.operands[0], &regs, &arg_values, &global_base) & 1;
                    let v = if c == 1 {
                        eval(&inst.operands[1], &regs, &arg_values, &global_base)
                    } else {
                        eval(&inst.operands[2], &regs, &arg_values, &global_base)
                    };
                    let mask = inst.result_type.unwrap().mask();
                    regs.insert(inst.result.as_deref().unwrap(), v & mask);
                }
                Opcode::Load => {
                    let ty = inst.result_type.unwrap();
                    let addr = eval(&inst.operands[0], &regs, &arg_values, &global_base);
                    let Some((bytes, offset)) = memory.locate(addr, ty.byte_size()) else {
                        break 'run Outcome::Trapped(Trap::UnmappedMemory);
                    };
                    let mut v = 0u64;
                    for (k, b) in bytes[offset..offset + ty.byte_size()].iter().enumerate() {
                        v |= (*b as u64) << (8 * k);
                    }
                    regs.insert(inst.result.as_deref().unwrap(), v & ty.mask());
                }
                Opcode::Store => {
                    let ty = inst.operands[0].ty();
                    let v = eval(&inst.operands[0], &regs, &arg_values, &global_base) & ty.mask();
                    let addr = eval(&inst.operands[1], &regs, &arg_values, &global_base);
                    let Some((bytes, offset)) = memory.locate(addr, ty.byte_size()) else {
                        break 'run Outcome::Trapped(Trap::UnmappedMemory);
                    };
                    for k in 0..ty.byte_size() {
                        bytes[offset + k] = (v >> (8 * k)) as u8;
                    }
                }
                Opcode::PtrAdd => {
                    let base = eval(&inst.operands[0], &regs, &arg_values, &global_base);
                    let off = eval(&inst.operands[1], &regs, &arg_values, &global_base);
                    regs.insert(inst.result.as_deref().unwrap(), base.wrapping_add(off));
                }
                Opcode::Br => {
                    prev_label = Some(&blk.label);
                    block = function.block_index(&inst.labels[0]).unwrap();
                    continue 'run;
                }
                Opcode::BrCond => {
                    let c = eval(&inst.operands[0], &regs, &arg_values, &global_base) & 1;
                    prev_label = Some(&blk.label);
                    let target = if c == 1 { &inst.labels[0] } else { &inst.labels[1] };
                    block = function.block_index(target).unwrap();
                    continue 'run;
                }
                Opcode::Ret => {
                    let v = inst
                        .operands
                        .first()
                        .map(|v| eval(v, &regs, &arg_values, &global_base) & v.ty().mask());
                    break 'run Outcome::Returned(v);
                }
                Opcode::Phi => unreachable!("phi outside leading prefix"),
            }
        }
    };

    let mut final_memory = BTreeMap::new();
    let mut final_buffers = Vec::new();
    for region in memory.regions {
        match region.kind {
            RegionKind::Global(name) => {
                final_memory.insert(name, region.bytes);
            }
            RegionKind::Buffer(index) => final_buffers.push((index, region.bytes)),
        }
    }
    let total: u64 = counts.values().sum();
    Ok(ExecutionTrace {
        return_value: match outcome {
            Outcome::Returned(v) => v,
            _ => None,
        },
        cond_branch_count: counts.get("br_cond").copied().unwrap_or(0),
        select_count: counts.get("select").copied().unwrap_or(0),
        total_dynamic_instructions: total,
        outcome,
        final_memory,
        final_buffers,
        dyn_counts: counts,
    })
}

/// Result of a differential run.
#[derive(Debug, Clone, PartialEq)]
pub enum DiffVerdict {
    Equivalent,
    Counterexample {
        args: Vec<ArgValue>,
        divergence: String,
    },
}

/// Runs `trials` randomized inputs through both modules and compares
/// observable behavior. Equivalent means: on every input where the original
/// runs to completion, the transformed version returns the same value,
/// leaves identical bytes in every global except the safe global, leaves
/// identical bytes in every argument buffer, and does not trap.
/// Inputs on which the original itself traps or runs out of fuel impose no
/// constraint.
pub fn differential_check(
    before: &Module,
    after: &Module,
    function_name: &str,
    trials: u32,
    mut input_gen: impl FnMut(&Function) -> Vec<ArgValue>,
    fuel: u64,
) -> Result<DiffVerdict, InterpError> {
    let f_before = before
        .function(function_name)
        .ok_or_else(|| InterpError::UnknownFunction(function_name.to_string()))?;
    let f_after = after
        .function(function_name)
        .ok_or_else(|| InterpError::UnknownFunction(function_name.to_string()))?;
    if f_before.params != f_after.params || f_before.return_type != f_after.return_type {
        return Err(InterpError::ArgMismatch {
            function: function_name.to_string(),
            message: "signatures differ between modules".to_string(),
        });
    }

    let mut excluded: HashSet<&str> = HashSet::new();
    if let Some(name) = &before.safe_global {
        excluded.insert(name);
    }
    if let Some(name) = &after.safe_global {
        excluded.insert(name);
    }

    for _ in 0..trials {
        let args = input_gen(f_before);
        let t0 = interpret(before, function_name, &args, fuel)?;
        if !matches!(t0.outcome, Outcome::Returned(_)) {
            continue;
        }
        let t1 = interpret(after, function_name, &args, fuel)?;
        let divergence = match t1.outcome {
            Outcome::Trapped(trap) => Some(format!("transformed trapped ({trap}) where original returned")),
            Outcome::FuelExhausted => Some("transformed exhausted fuel where original returned".into()),
            Outcome::Returned(_) if t1.return_value != t0.return_value => Some(format!(
                "return values differ: original {:?}, transformed {:?}",
                t0.return_value, t1.return_value
            )),
            Outcome::Returned(_) => {
                let mut diff = None;
                for (name, bytes) in &t0.final_memory {
                    if excluded.contains(name.as_str()) {
                        continue;
                    }
                    if t1.final_memory.get(name) != Some(bytes) {
                        diff = Some(format!("final bytes of @{name} differ"));
                        break;
                    }
                }
                if diff.is_none() && t0.final_buffers != t1.final_buffers {
                    diff = Some("final bytes of an argument buffer differ".into());
                }
                diff
            }
        };
        if let Some(divergence) = divergence {
            return Ok(DiffVerdict::Counterexample { args, divergence });
        }
    }
    Ok(DiffVerdict::Equivalent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testgen::load_fixture;
    use crate::text::parse_module;

    fn str_args(s: &str) -> Vec<ArgValue> {
        vec![
            ArgValue::Buffer(s.as_bytes().to_vec()),
            ArgValue::Int(s.len() as u64),
        ]
    }

    #[test]
    fn to_upper_uppercases_and_counts_branches() {
        let m = load_fixture("to_upper.mir");
        let trace = interpret(&m, "to_upper", &str_args("aZ3b"), DEFAULT_FUEL).unwrap();
        assert_eq!(trace.outcome, Outcome::Returned(None));
        assert_eq!(trace.final_buffers[0].1, b"AZ3B");
        // 4 data-dependent branches plus 5 loop-header branches.
        assert_eq!(trace.cond_branch_count, 9);
        assert_eq!(
            trace.total_dynamic_instructions,
            trace.dyn_counts.values().sum::<u64>()
        );
    }

    #[test]
    fn division_by_zero_traps() {
        let m = parse_module(
            "func @f(i64 %x, i64 %y) -> i64 {\nentry:\n  %q = udiv i64 %x, %y\n  ret %q\n}",
        )
        .unwrap();
        let trace = interpret(&m, "f", &[ArgValue::Int(10), ArgValue::Int(0)], DEFAULT_FUEL).unwrap();
        assert_eq!(trace.outcome, Outcome::Trapped(Trap::DivByZero));
        assert_eq!(trace.return_value, None);
    }

    #[test]
    fn oversized_shift_traps() {
        let m = parse_module(
            "func @f(i64 %x, i64 %y) -> i64 {\nentry:\n  %q = shl i64 %x, %y\n  ret %q\n}",
        )
        .unwrap();
        let trace = interpret(&m, "f", &[ArgValue::Int(1), ArgValue::Int(64)], DEFAULT_FUEL).unwrap();
        assert_eq!(trace.outcome, Outcome::Trapped(Trap::InvalidShift));
    }

    #[test]
    fn out_of_bounds_access_traps() {
        let m = parse_module(
            "global @g : 8 = zero\nfunc @f(i64 %i) -> i8 {\nentry:\n  %p = ptradd @g, %i\n  %v = load i8, %p\n  ret %v\n}",
        )
        .unwrap();
        let ok = interpret(&m, "f", &[ArgValue::Int(7)], DEFAULT_FUEL).unwrap();
        assert_eq!(ok.outcome, Outcome::Returned(Some(0)));
        let bad = interpret(&m, "f", &[ArgValue::Int(8)], DEFAULT_FUEL).unwrap();
        assert_eq!(bad.outcome, Outcome::Trapped(Trap::UnmappedMemory));
    }

    #[test]
    fn fuel_exhaustion_is_distinguished() {
        let m = parse_module("func @spin() -> void {\nentry:\n  br label %entry\n}").unwrap();
        let trace = interpret(&m, "spin", &[], 100).unwrap();
        assert_eq!(trace.outcome, Outcome::FuelExhausted);
    }

    #[test]
    fn interpretation_is_deterministic() {
        let m = load_fixture("to_upper.mir");
        let a = interpret(&m, "to_upper", &str_args("Hello, World"), DEFAULT_FUEL).unwrap();
        let b = interpret(&m, "to_upper", &str_args("Hello, World"), DEFAULT_FUEL).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn signed_division_wraps_at_width() {
        let m = parse_module(
            "func @f(i8 %x, i8 %y) -> i8 {\nentry:\n  %q = sdiv i8 %x, %y\n  ret %q\n}",
        )
        .unwrap();
        // -128 / -1 wraps back to -128.
        let trace = interpret(&m, "f", &[ArgValue::Int(0x80), ArgValue::Int(0xFF)], DEFAULT_FUEL).unwrap();
        assert_eq!(trace.outcome, Outcome::Returned(Some(0x80)));
    }

    #[test]
    fn identical_modules_are_equivalent() {
        let m = load_fixture("abs_diff.mir");
        let mut n = 0u64;
        let verdict = differential_check(
            &m,
            &m,
            "abs_diff",
            25,
            |_| {
                n += 1;
                vec![ArgValue::Int(n * 37), ArgValue::Int(n ^ 5)]
            },
            DEFAULT_FUEL,
        )
        .unwrap();
        assert_eq!(verdict, DiffVerdict::Equivalent);
    }

    #[test]
    fn behavioral_difference_is_caught() {
        let a = parse_module("func @f(i64 %x) -> i64 {\nentry:\n  %r = add i64 %x, 1\n  ret %r\n}").unwrap();
        let b = parse_module("func @f(i64 %x) -> i64 {\nentry:\n  %r = add i64 %x, 2\n  ret %r\n}").unwrap();
        let verdict =
            differential_check(&a, &b, "f", 5, |_| vec![ArgValue::Int(0)], DEFAULT_FUEL).unwrap();
        match verdict {
            DiffVerdict::Counterexample { divergence, .. } => {
                assert!(divergence.contains("return values differ"), "{divergence}")
            }
            other => panic!("expected counterexample, got {other:?}"),
        }
    }
}
