//! The SSA intermediate representation: types, values, instructions, blocks,
//! functions, modules, plus structural validation and def-use analysis.
//!
//! Values are immutable once built; passes mutate functions by rebuilding
//! instruction lists. Integer semantics are wrap-around two's complement at
//! the declared width, so identity operands like `x + 0` can never fault.
//! Pointers are plain 64-bit addresses and `ptradd` is the only address
//! arithmetic.

use std::collections::{BTreeMap, HashMap, HashSet};

/// Scalar value types. `i1` holds only 0 or 1, `iN` is an N-bit
/// two's-complement integer, `ptr` is a 64-bit address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IrType {
    I1,
    I8,
    I32,
    I64,
    Ptr,
}

impl IrType {
    pub fn bit_width(self) -> u32 {
        match self {
            IrType::I1 => 1,
            IrType::I8 => 8,
            IrType::I32 => 32,
            IrType::I64 | IrType::Ptr => 64,
        }
    }

    pub fn byte_size(self) -> usize {
        match self {
            IrType::I1 | IrType::I8 => 1,
            IrType::I32 => 4,
            IrType::I64 | IrType::Ptr => 8,
        }
    }

    /// Mask selecting the low `bit_width` bits.
    pub fn mask(self) -> u64 {
        match self.bit_width() {
            64 => u64::MAX,
            w => (1u64 << w) - 1,
        }
    }

    pub fn is_int(self) -> bool {
        !matches!(self, IrType::Ptr)
    }

    pub fn name(self) -> &'static str {
        match self {
            IrType::I1 => "i1",
            IrType::I8 => "i8",
            IrType::I32 => "i32",
            IrType::I64 => "i64",
            IrType::Ptr => "ptr",
        }
    }
}

impl std::fmt::Display for IrType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// An SSA operand.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Value {
    /// Constant with its bit pattern stored masked to the type width.
    Const { ty: IrType, bits: u64 },
    /// Result of an instruction, unique per function.
    Reg { name: String, ty: IrType },
    /// Address of a module global (always `ptr`).
    Global { name: String },
    /// Function parameter; `name` mirrors the parameter list for printing.
    Arg { index: usize, name: String, ty: IrType },
}

impl Value {
    pub fn const_int(ty: IrType, v: i64) -> Value {
        Value::Const {
            ty,
            bits: (v as u64) & ty.mask(),
        }
    }

    pub fn reg(name: impl Into<String>, ty: IrType) -> Value {
        Value::Reg {
            name: name.into(),
            ty,
        }
    }

    pub fn global(name: impl Into<String>) -> Value {
        Value::Global { name: name.into() }
    }

    pub fn ty(&self) -> IrType {
        match self {
            Value::Const { ty, .. } | Value::Reg { ty, .. } | Value::Arg { ty, .. } => *ty,
            Value::Global { .. } => IrType::Ptr,
        }
    }

    /// Constant bit pattern sign-extended to 64 bits, for display.
    pub fn const_signed(&self) -> Option<i64> {
        match self {
            Value::Const { ty, bits } => {
                let w = ty.bit_width();
                if w == 64 {
                    Some(*bits as i64)
                } else {
                    let shift = 64 - w;
                    Some(((bits << shift) as i64) >> shift)
                }
            }
            _ => None,
        }
    }

    pub fn is_const(&self) -> bool {
        matches!(self, Value::Const { .. })
    }
}

/// Comparison predicates for `icmp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IcmpPred {
    Eq,
    Ne,
    Ult,
    Ule,
    Slt,
    Sle,
    Ugt,
    Uge,
    Sgt,
    Sge,
}

impl IcmpPred {
    pub fn name(self) -> &'static str {
        match self {
            IcmpPred::Eq => "eq",
            IcmpPred::Ne => "ne",
            IcmpPred::Ult => "ult",
            IcmpPred::Ule => "ule",
            IcmpPred::Slt => "slt",
            IcmpPred::Sle => "sle",
            IcmpPred::Ugt => "ugt",
            IcmpPred::Uge => "uge",
            IcmpPred::Sgt => "sgt",
            IcmpPred::Sge => "sge",
        }
    }

    pub fn from_name(s: &str) -> Option<IcmpPred> {
        Some(match s {
            "eq" => IcmpPred::Eq,
            "ne" => IcmpPred::Ne,
            "ult" => IcmpPred::Ult,
            "ule" => IcmpPred::Ule,
            "slt" => IcmpPred::Slt,
            "sle" => IcmpPred::Sle,
            "ugt" => IcmpPred::Ugt,
            "uge" => IcmpPred::Uge,
            "sgt" => IcmpPred::Sgt,
            "sge" => IcmpPred::Sge,
            _ => return None,
        })
    }
}

/// Instruction opcodes. The icmp predicate is part of the operation, so two
/// icmps with different predicates are different operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Opcode {
    Add,
    Sub,
    Mul,
    Udiv,
    Sdiv,
    And,
    Or,
    Xor,
    Shl,
    Lshr,
    Ashr,
    Icmp(IcmpPred),
    Select,
    Load,
    Store,
    PtrAdd,
    BrCond,
    Br,
    Phi,
    Ret,
}

impl Opcode {
    pub fn is_terminator(self) -> bool {
        matches!(self, Opcode::BrCond | Opcode::Br | Opcode::Ret)
    }

    pub fn is_binary_int(self) -> bool {
        matches!(
            self,
            Opcode::Add
                | Opcode::Sub
                | Opcode::Mul
                | Opcode::Udiv
                | Opcode::Sdiv
                | Opcode::And
                | Opcode::Or
                | Opcode::Xor
                | Opcode::Shl
                | Opcode::Lshr
                | Opcode::Ashr
        )
    }

    pub fn is_shift(self) -> bool {
        matches!(self, Opcode::Shl | Opcode::Lshr | Opcode::Ashr)
    }

    pub fn is_div(self) -> bool {
        matches!(self, Opcode::Udiv | Opcode::Sdiv)
    }

    pub fn is_memory(self) -> bool {
        matches!(self, Opcode::Load | Opcode::Store)
    }

    /// Whether instructions with this opcode produce a result register.
    pub fn has_result(self) -> bool {
        !matches!(
            self,
            Opcode::Store | Opcode::BrCond | Opcode::Br | Opcode::Ret
        )
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Add => "add",
            Opcode::Sub => "sub",
            Opcode::Mul => "mul",
            Opcode::Udiv => "udiv",
            Opcode::Sdiv => "sdiv",
            Opcode::And => "and",
            Opcode::Or => "or",
            Opcode::Xor => "xor",
            Opcode::Shl => "shl",
            Opcode::Lshr => "lshr",
            Opcode::Ashr => "ashr",
            Opcode::Icmp(_) => "icmp",
            Opcode::Select => "select",
            Opcode::Load => "load",
            Opcode::Store => "store",
            Opcode::PtrAdd => "ptradd",
            Opcode::BrCond => "br_cond",
            Opcode::Br => "br",
            Opcode::Phi => "phi",
            Opcode::Ret => "ret",
        }
    }

    pub fn binary_from_name(s: &str) -> Option<Opcode> {
        Some(match s {
            "add" => Opcode::Add,
            "sub" => Opcode::Sub,
            "mul" => Opcode::Mul,
            "udiv" => Opcode::Udiv,
            "sdiv" => Opcode::Sdiv,
            "and" => Opcode::And,
            "or" => Opcode::Or,
            "xor" => Opcode::Xor,
            "shl" => Opcode::Shl,
            "lshr" => Opcode::Lshr,
            "ashr" => Opcode::Ashr,
            _ => return None,
        })
    }
}

/// One SSA operation.
///
/// `labels` carry block-label references: `[target]` for `br`,
/// `[then, else]` for `br_cond`, and one label per incoming operand for
/// `phi`. Other opcodes leave it empty.
///
/// Equality ignores `source_line`: two instructions are the same operation
/// on the same operands regardless of where they were written, which is what
/// round-trip and melding comparisons need.
#[derive(Debug, Clone, Eq)]
pub struct Instruction {
    pub opcode: Opcode,
    pub operands: Vec<Value>,
    pub result: Option<String>,
    pub result_type: Option<IrType>,
    pub labels: Vec<String>,
    pub source_line: Option<u32>,
}

impl PartialEq for Instruction {
    fn eq(&self, other: &Self) -> bool {
        self.opcode == other.opcode
            && self.operands == other.operands
            && self.result == other.result
            && self.result_type == other.result_type
            && self.labels == other.labels
    }
}

impl Instruction {
    pub fn binary(opcode: Opcode, ty: IrType, result: impl Into<String>, a: Value, b: Value) -> Instruction {
        Instruction {
            opcode,
            operands: vec![a, b],
            result: Some(result.into()),
            result_type: Some(ty),
            labels: vec![],
            source_line: None,
        }
    }

    pub fn icmp(pred: IcmpPred, result: impl Into<String>, a: Value, b: Value) -> Instruction {
        Instruction {
            opcode: Opcode::Icmp(pred),
            operands: vec![a, b],
            result: Some(result.into()),
            result_type: Some(IrType::I1),
            labels: vec![],
            source_line: None,
        }
    }

    pub fn select(ty: IrType, result: impl Into<String>, cond: Value, t: Value, f: Value) -> Instruction {
        Instruction {
            opcode: Opcode::Select,
            operands: vec![cond, t, f],
            result: Some(result.into()),
            result_type: Some(ty),
            labels: vec![],
            source_line: None,
        }
    }

    pub fn load(ty: IrType, result: impl Into<String>, addr: Value) -> Instruction {
        Instruction {
            opcode: Opcode::Load,
            operands: vec![addr],
            result: Some(result.into()),
            result_type: Some(ty),
            labels: vec![],
            source_line: None,
        }
    }

    pub fn store(ty: IrType, value: Value, addr: Value) -> Instruction {
        debug_assert_eq!(value.ty(), ty);
        Instruction {
            opcode: Opcode::Store,
            operands: vec![value, addr],
            result: None,
            result_type: None,
            labels: vec![],
            source_line: None,
        }
    }

    pub fn ptradd(result: impl Into<String>, base: Value, offset: Value) -> Instruction {
        Instruction {
            opcode: Opcode::PtrAdd,
            operands: vec![base, offset],
            result: Some(result.into()),
            result_type: Some(IrType::Ptr),
            labels: vec![],
            source_line: None,
        }
    }

    pub fn br(target: impl Into<String>) -> Instruction {
        Instruction {
            opcode: Opcode::Br,
            operands: vec![],
            result: None,
            result_type: None,
            labels: vec![target.into()],
            source_line: None,
        }
    }

    pub fn br_cond(cond: Value, then_label: impl Into<String>, else_label: impl Into<String>) -> Instruction {
        Instruction {
            opcode: Opcode::BrCond,
            operands: vec![cond],
            result: None,
            result_type: None,
            labels: vec![then_label.into(), else_label.into()],
            source_line: None,
        }
    }

    pub fn phi(ty: IrType, result: impl Into<String>, incoming: Vec<(Value, String)>) -> Instruction {
        let (operands, labels) = incoming.into_iter().unzip();
        Instruction {
            opcode: Opcode::Phi,
            operands,
            result: Some(result.into()),
            result_type: Some(ty),
            labels,
            source_line: None,
        }
    }

    pub fn ret(value: Option<Value>) -> Instruction {
        Instruction {
            opcode: Opcode::Ret,
            operands: value.into_iter().collect(),
            result: None,
            result_type: None,
            labels: vec![],
            source_line: None,
        }
    }

    pub fn is_terminator(&self) -> bool {
        self.opcode.is_terminator()
    }

    /// The result as a `Value`, when this instruction defines one.
    pub fn result_value(&self) -> Option<Value> {
        match (&self.result, self.result_type) {
            (Some(name), Some(ty)) => Some(Value::reg(name.clone(), ty)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicBlock {
    pub label: String,
    pub instructions: Vec<Instruction>,
}

impl BasicBlock {
    pub fn new(label: impl Into<String>, instructions: Vec<Instruction>) -> BasicBlock {
        BasicBlock {
            label: label.into(),
            instructions,
        }
    }

    pub fn terminator(&self) -> Option<&Instruction> {
        self.instructions.last().filter(|i| i.is_terminator())
    }

    /// Instructions excluding the terminator; the unit the aligner works on.
    pub fn body(&self) -> &[Instruction] {
        match self.instructions.last() {
            Some(last) if last.is_terminator() => {
                &self.instructions[..self.instructions.len() - 1]
            }
            _ => &self.instructions[..],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub params: Vec<(String, IrType)>,
    /// `None` means void.
    pub return_type: Option<IrType>,
    pub blocks: Vec<BasicBlock>,
    pub source_file: Option<String>,
}

impl Function {
    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    pub fn block(&self, label: &str) -> Option<&BasicBlock> {
        self.blocks.iter().find(|b| b.label == label)
    }

    pub fn block_mut(&mut self, label: &str) -> Option<&mut BasicBlock> {
        self.blocks.iter_mut().find(|b| b.label == label)
    }

    /// Parameter as an `Arg` value.
    pub fn arg_value(&self, index: usize) -> Value {
        let (name, ty) = &self.params[index];
        Value::Arg {
            index,
            name: name.clone(),
            ty: *ty,
        }
    }

    /// CFG predecessors by block index.
    pub fn predecessors(&self) -> Vec<Vec<usize>> {
        let index_of: HashMap<&str, usize> = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (b.label.as_str(), i))
            .collect();
        let mut preds = vec![Vec::new(); self.blocks.len()];
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(term) = block.terminator() {
                for label in &term.labels {
                    if let Some(&j) = index_of.get(label.as_str()) {
                        if !preds[j].contains(&i) {
                            preds[j].push(i);
                        }
                    }
                }
            }
        }
        preds
    }

    pub fn successor_labels(&self, block: usize) -> Vec<String> {
        self.blocks[block]
            .terminator()
            .map(|t| t.labels.clone())
            .unwrap_or_default()
    }

    /// Total conditional branch instructions in the function.
    pub fn cond_branch_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| &b.instructions)
            .filter(|i| i.opcode == Opcode::BrCond)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Global {
    pub name: String,
    pub size: usize,
    /// Exactly `size` bytes.
    pub init: Vec<u8>,
}

impl Global {
    pub fn zeroed(name: impl Into<String>, size: usize) -> Global {
        Global {
            name: name.into(),
            size,
            init: vec![0; size],
        }
    }

    pub fn is_zero_init(&self) -> bool {
        self.init.iter().all(|&b| b == 0)
    }
}

/// A whole program: globals, functions, and (once melding has run) the name
/// of the compiler-owned safe memory global that extraneous memory
/// operations are redirected to.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Module {
    pub functions: Vec<Function>,
    pub globals: Vec<Global>,
    pub safe_global: Option<String>,
}

impl Module {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut Function> {
        self.functions.iter_mut().find(|f| f.name == name)
    }

    pub fn global(&self, name: &str) -> Option<&Global> {
        self.globals.iter().find(|g| g.name == name)
    }

    /// Returns the safe global's name, creating the 8-byte zero-initialized
    /// slot on first use. One slot serves the whole module.
    pub fn ensure_safe_global(&mut self) -> String {
        if let Some(name) = &self.safe_global {
            return name.clone();
        }
        let mut name = "__safe_mem".to_string();
        let mut n = 0;
        while self.global(&name).is_some() {
            n += 1;
            name = format!("__safe_mem{n}");
        }
        self.globals.push(Global::zeroed(name.clone(), 8));
        self.safe_global = Some(name.clone());
        name
    }
}

/// Fresh-name generator scoped to one function. Names are deterministic:
/// `base0`, `base1`, ... skipping anything already taken.
pub struct NameGen {
    used: HashSet<String>,
    counters: HashMap<String, usize>,
}

impl NameGen {
    pub fn for_function(function: &Function) -> NameGen {
        let mut used = HashSet::new();
        for (name, _) in &function.params {
            used.insert(name.clone());
        }
        for block in &function.blocks {
            used.insert(block.label.clone());
            for inst in &block.instructions {
                if let Some(r) = &inst.result {
                    used.insert(r.clone());
                }
            }
        }
        NameGen {
            used,
            counters: HashMap::new(),
        }
    }

    pub fn fresh(&mut self, base: &str) -> String {
        let counter = self.counters.entry(base.to_string()).or_insert(0);
        loop {
            let candidate = format!("{base}{counter}");
            *counter += 1;
            if self.used.insert(candidate.clone()) {
                return candidate;
            }
        }
    }
}

/// Position of an instruction within a function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct InstrRef {
    pub block: usize,
    pub index: usize,
}

/// Definition site and ordered use sites of one register.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DefUse {
    pub def: InstrRef,
    pub uses: Vec<InstrRef>,
}

/// Maps every result register of the function to its definition and its
/// uses in instruction order. Keys are exactly the function's result
/// registers; a dead definition maps to an empty use list.
pub fn def_use_map(function: &Function) -> BTreeMap<String, DefUse> {
    let mut map: BTreeMap<String, DefUse> = BTreeMap::new();
    for (bi, block) in function.blocks.iter().enumerate() {
        for (ii, inst) in block.instructions.iter().enumerate() {
            if let Some(r) = &inst.result {
                map.entry(r.clone()).or_insert(DefUse {
                    def: InstrRef { block: bi, index: ii },
                    uses: Vec::new(),
                });
            }
        }
    }
    for (bi, block) in function.blocks.iter().enumerate() {
        for (ii, inst) in block.instructions.iter().enumerate() {
            let site = InstrRef { block: bi, index: ii };
            for op in &inst.operands {
                if let Value::Reg { name, .. } = op {
                    if let Some(entry) = map.get_mut(name) {
                        if entry.uses.last() != Some(&site) {
                            entry.uses.push(site);
                        }
                    }
                }
            }
        }
    }
    map
}

/// Structural validation. Returns a description of every violated invariant;
/// an empty list means the module is well formed. Violations are data, not
/// failures: transformation passes refuse modules with violations.
pub fn validate_module(module: &Module) -> Vec<String> {
    let mut errs = Vec::new();

    let mut global_names = HashSet::new();
    for g in &module.globals {
        if !global_names.insert(g.name.as_str()) {
            errs.push(format!("duplicate global @{}", g.name));
        }
        if g.size == 0 {
            errs.push(format!("global @{} has zero size", g.name));
        }
        if g.init.len() != g.size {
            errs.push(format!(
                "global @{} initializer has {} bytes, size is {}",
                g.name,
                g.init.len(),
                g.size
            ));
        }
    }
    if let Some(name) = &module.safe_global {
        match module.global(name) {
            None => errs.push(format!("safe global @{name} is not declared")),
            Some(g) => {
                if g.size < 8 {
                    errs.push(format!("safe global @{name} is smaller than 8 bytes"));
                }
                if !g.is_zero_init() {
                    errs.push(format!("safe global @{name} is not zero-initialized"));
                }
            }
        }
    }

    let mut fn_names = HashSet::new();
    for f in &module.functions {
        if !fn_names.insert(f.name.as_str()) {
            errs.push(format!("duplicate function @{}", f.name));
        }
        validate_function(module, f, &mut errs);
    }
    errs
}

fn validate_function(module: &Module, f: &Function, errs: &mut Vec<String>) {
    let ctx = |msg: String| format!("@{}: {}", f.name, msg);

    let mut param_names = HashSet::new();
    for (name, _) in &f.params {
        if !param_names.insert(name.as_str()) {
            errs.push(ctx(format!("duplicate parameter %{name}")));
        }
    }

    if f.blocks.is_empty() {
        errs.push(ctx("function has no blocks".to_string()));
        return;
    }

    let mut labels = HashSet::new();
    for b in &f.blocks {
        if !labels.insert(b.label.as_str()) {
            errs.push(ctx(format!("duplicate block label {}", b.label)));
        }
    }

    // Collect definitions first so dominance checks can resolve types.
    let mut defs: HashMap<&str, (usize, usize, IrType)> = HashMap::new();
    for (bi, block) in f.blocks.iter().enumerate() {
        for (ii, inst) in block.instructions.iter().enumerate() {
            if let Some(r) = &inst.result {
                if param_names.contains(r.as_str()) {
                    errs.push(ctx(format!("register %{r} shadows a parameter")));
                } else if let Some(ty) = inst.result_type {
                    if defs.contains_key(r.as_str()) {
                        errs.push(ctx(format!("register %{r} defined more than once")));
                    } else {
                        defs.insert(r.as_str(), (bi, ii, ty));
                    }
                }
            }
        }
    }

    for block in &f.blocks {
        validate_block(module, f, block, &defs, errs);
    }

    // CFG-level checks: phi incoming edges and dominance.
    let preds = f.predecessors();
    let reachable = reachable_blocks(f);
    let dominators = compute_dominators(f, &preds, &reachable);

    for (bi, block) in f.blocks.iter().enumerate() {
        let pred_labels: HashSet<&str> = preds[bi]
            .iter()
            .map(|&p| f.blocks[p].label.as_str())
            .collect();
        for inst in &block.instructions {
            if inst.opcode == Opcode::Phi {
                let incoming: Vec<&str> = inst.labels.iter().map(|s| s.as_str()).collect();
                let incoming_set: HashSet<&str> = incoming.iter().copied().collect();
                if incoming.len() != incoming_set.len() {
                    errs.push(ctx(format!(
                        "phi in block {} has duplicate incoming labels",
                        block.label
                    )));
                } else if incoming_set != pred_labels {
                    errs.push(ctx(format!(
                        "phi in block {} incoming labels do not match predecessors",
                        block.label
                    )));
                }
            }
        }

        // Use-site dominance. Phi operands are checked at the end of the
        // incoming block; interiors of unreachable blocks are dead code and
        // skipped.
        if !reachable[bi] {
            continue;
        }
        for (ii, inst) in block.instructions.iter().enumerate() {
            if inst.opcode == Opcode::Phi {
                for (op, label) in inst.operands.iter().zip(&inst.labels) {
                    if let Value::Reg { name, .. } = op {
                        if let Some(&(db, _, _)) = defs.get(name.as_str()) {
                            if let Some(pb) = f.block_index(label) {
                                if !block_dominates(&dominators, db, pb) {
                                    errs.push(ctx(format!(
                                        "%{name} does not dominate its phi use in block {}",
                                        block.label
                                    )));
                                }
                            }
                        } else {
                            errs.push(ctx(format!("use of undefined register %{name}")));
                        }
                    }
                }
                continue;
            }
            for op in &inst.operands {
                if let Value::Reg { name, .. } = op {
                    match defs.get(name.as_str()) {
                        None => errs.push(ctx(format!("use of undefined register %{name}"))),
                        Some(&(db, di, _)) => {
                            let dominated = if db == bi {
                                di < ii
                            } else {
                                reachable[db] && block_dominates(&dominators, db, bi)
                            };
                            if !dominated {
                                errs.push(ctx(format!(
                                    "%{name} used in block {} before its definition dominates it",
                                    block.label
                                )));
                            }
                        }
                    }
                }
            }
        }
    }
}

fn validate_block(
    module: &Module,
    f: &Function,
    block: &BasicBlock,
    defs: &HashMap<&str, (usize, usize, IrType)>,
    errs: &mut Vec<String>,
) {
    let ctx = |msg: String| format!("@{}: block {}: {}", f.name, block.label, msg);

    match block.instructions.last() {
        None => {
            errs.push(ctx("block is empty".to_string()));
            return;
        }
        Some(last) if !last.is_terminator() => {
            errs.push(ctx("block lacks a terminator".to_string()));
        }
        _ => {}
    }

    let mut phi_prefix_done = false;
    for (ii, inst) in block.instructions.iter().enumerate() {
        if inst.is_terminator() && ii + 1 != block.instructions.len() {
            errs.push(ctx(format!(
                "terminator {} before end of block",
                inst.opcode.mnemonic()
            )));
        }
        if inst.opcode == Opcode::Phi {
            if phi_prefix_done {
                errs.push(ctx("phi after non-phi instruction".to_string()));
            }
        } else {
            phi_prefix_done = true;
        }
        validate_instruction(module, f, block, inst, defs, errs);
    }
}

fn validate_instruction(
    module: &Module,
    f: &Function,
    block: &BasicBlock,
    inst: &Instruction,
    defs: &HashMap<&str, (usize, usize, IrType)>,
    errs: &mut Vec<String>,
) {
    let ctx = |msg: String| format!("@{}: block {}: {}", f.name, block.label, msg);
    let op = inst.opcode;

    if op.has_result() {
        if inst.result.is_none() || inst.result_type.is_none() {
            errs.push(ctx(format!("{} must define a result", op.mnemonic())));
            return;
        }
    } else if inst.result.is_some() || inst.result_type.is_some() {
        errs.push(ctx(format!("{} must not define a result", op.mnemonic())));
    }

    // Operand sanity that doesn't depend on the opcode.
    for v in &inst.operands {
        match v {
            Value::Const { ty, bits } => {
                if bits & !ty.mask() != 0 {
                    errs.push(ctx(format!("constant {bits} does not fit {ty}")));
                }
            }
            Value::Global { name } => {
                if module.global(name).is_none() {
                    errs.push(ctx(format!("reference to undeclared global @{name}")));
                }
            }
            Value::Arg { index, name, ty } => match f.params.get(*index) {
                Some((pname, pty)) if pname == name && pty == ty => {}
                _ => errs.push(ctx(format!("argument %{name} does not match parameter list"))),
            },
            Value::Reg { name, ty } => {
                if let Some(&(_, _, def_ty)) = defs.get(name.as_str()) {
                    if def_ty != *ty {
                        errs.push(ctx(format!(
                            "%{name} used at type {ty} but defined at {def_ty}"
                        )));
                    }
                }
            }
        }
    }

    let arity_err = |errs: &mut Vec<String>, want: usize| {
        errs.push(ctx(format!(
            "{} expects {} operands, has {}",
            op.mnemonic(),
            want,
            inst.operands.len()
        )));
    };

    match op {
        _ if op.is_binary_int() => {
            if inst.operands.len() != 2 {
                return arity_err(errs, 2);
            }
            let rt = inst.result_type.unwrap();
            if !rt.is_int() {
                errs.push(ctx(format!("{} result must be an integer type", op.mnemonic())));
            }
            for v in &inst.operands {
                if v.ty() != rt {
                    errs.push(ctx(format!(
                        "{} operand type {} differs from result type {}",
                        op.mnemonic(),
                        v.ty(),
                        rt
                    )));
                }
            }
        }
        Opcode::Icmp(_) => {
            if inst.operands.len() != 2 {
                return arity_err(errs, 2);
            }
            if inst.operands[0].ty() != inst.operands[1].ty() {
                errs.push(ctx("icmp operand types differ".to_string()));
            }
            if inst.result_type != Some(IrType::I1) {
                errs.push(ctx("icmp must produce i1".to_string()));
            }
        }
        Opcode::Select => {
            if inst.operands.len() != 3 {
                return arity_err(errs, 3);
            }
            if inst.operands[0].ty() != IrType::I1 {
                errs.push(ctx("select condition must be i1".to_string()));
            }
            let rt = inst.result_type.unwrap();
            if inst.operands[1].ty() != rt || inst.operands[2].ty() != rt {
                errs.push(ctx("select value operands must share the result type".to_string()));
            }
        }
        Opcode::Load => {
            if inst.operands.len() != 1 {
                return arity_err(errs, 1);
            }
            if inst.operands[0].ty() != IrType::Ptr {
                errs.push(ctx("load address must be ptr".to_string()));
            }
        }
        Opcode::Store => {
            if inst.operands.len() != 2 {
                return arity_err(errs, 2);
            }
            if inst.operands[1].ty() != IrType::Ptr {
                errs.push(ctx("store address must be ptr".to_string()));
            }
        }
        Opcode::PtrAdd => {
            if inst.operands.len() != 2 {
                return arity_err(errs, 2);
            }
            if inst.operands[0].ty() != IrType::Ptr {
                errs.push(ctx("ptradd base must be ptr".to_string()));
            }
            if inst.operands[1].ty() != IrType::I64 {
                errs.push(ctx("ptradd offset must be i64".to_string()));
            }
            if inst.result_type != Some(IrType::Ptr) {
                errs.push(ctx("ptradd must produce ptr".to_string()));
            }
        }
        Opcode::BrCond => {
            if inst.operands.len() != 1 {
                return arity_err(errs, 1);
            }
            if inst.operands[0].ty() != IrType::I1 {
                errs.push(ctx("br condition must be i1".to_string()));
            }
            if inst.labels.len() != 2 {
                errs.push(ctx("conditional br needs two target labels".to_string()));
            }
            check_labels(f, inst, &ctx, errs);
        }
        Opcode::Br => {
            if !inst.operands.is_empty() {
                return arity_err(errs, 0);
            }
            if inst.labels.len() != 1 {
                errs.push(ctx("br needs one target label".to_string()));
            }
            check_labels(f, inst, &ctx, errs);
        }
        Opcode::Phi => {
            if inst.operands.is_empty() || inst.operands.len() != inst.labels.len() {
                errs.push(ctx("phi needs one incoming value per label".to_string()));
            }
            let rt = inst.result_type.unwrap();
            for v in &inst.operands {
                if v.ty() != rt {
                    errs.push(ctx(format!(
                        "phi incoming type {} differs from result type {}",
                        v.ty(),
                        rt
                    )));
                }
            }
            check_labels(f, inst, &ctx, errs);
        }
        Opcode::Ret => match (&f.return_type, inst.operands.len()) {
            (None, 0) => {}
            (None, _) => errs.push(ctx("ret with value in a void function".to_string())),
            (Some(_), 0) => errs.push(ctx("ret without value in a non-void function".to_string())),
            (Some(rt), 1) => {
                if inst.operands[0].ty() != *rt {
                    errs.push(ctx(format!(
                        "ret value type {} differs from return type {}",
                        inst.operands[0].ty(),
                        rt
                    )));
                }
            }
            (Some(_), _) => arity_err(errs, 1),
        },
        _ => {}
    }
}

fn check_labels(
    f: &Function,
    inst: &Instruction,
    ctx: &dyn Fn(String) -> String,
    errs: &mut Vec<String>,
) {
    for label in &inst.labels {
        if f.block_index(label).is_none() {
            errs.push(ctx(format!("reference to unknown label %{label}")));
        }
    }
}

fn reachable_blocks(f: &Function) -> Vec<bool> {
    let mut reachable = vec![false; f.blocks.len()];
    let mut stack = vec![0usize];
    while let Some(b) = stack.pop() {
        if reachable[b] {
            continue;
        }
        reachable[b] = true;
        if let Some(term) = f.blocks[b].terminator() {
            for label in &term.labels {
                if let Some(j) = f.block_index(label) {
                    stack.push(j);
                }
            }
        }
    }
    reachable
}

/// Iterative dominator sets over reachable blocks; `dominators[b]` holds
/// every block that dominates `b`.
fn compute_dominators(f: &Function, preds: &[Vec<usize>], reachable: &[bool]) -> Vec<HashSet<usize>> {
    let n = f.blocks.len();
    let all: HashSet<usize> = (0..n).filter(|&b| reachable[b]).collect();
    let mut dom: Vec<HashSet<usize>> = (0..n)
        .map(|b| {
            if b == 0 {
                std::iter::once(0).collect()
            } else {
                all.clone()
            }
        })
        .collect();
    let mut changed = true;
    while changed {
        changed = false;
        for b in 1..n {
            if !reachable[b] {
                continue;
            }
            let mut new: Option<HashSet<usize>> = None;
            for &p in &preds[b] {
                if !reachable[p] {
                    continue;
                }
                new = Some(match new {
                    None => dom[p].clone(),
                    Some(acc) => acc.intersection(&dom[p]).copied().collect(),
                });
            }
            let mut new = new.unwrap_or_default();
            new.insert(b);
            if new != dom[b] {
                dom[b] = new;
                changed = true;
            }
        }
    }
    dom
}

fn block_dominates(dominators: &[HashSet<usize>], a: usize, b: usize) -> bool {
    dominators.get(b).is_some_and(|d| d.contains(&a))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_function() -> Function {
        Function {
            name: "id".into(),
            params: vec![("x".into(), IrType::I32)],
            return_type: Some(IrType::I32),
            blocks: vec![BasicBlock::new(
                "entry",
                vec![Instruction::ret(Some(Value::Arg {
                    index: 0,
                    name: "x".into(),
                    ty: IrType::I32,
                }))],
            )],
            source_file: None,
        }
    }

    fn module_of(f: Function) -> Module {
        Module {
            functions: vec![f],
            globals: vec![],
            safe_global: None,
        }
    }

    #[test]
    fn valid_identity_function() {
        assert_eq!(validate_module(&module_of(identity_function())), Vec::<String>::new());
    }

    #[test]
    fn missing_terminator_reported_with_block_name() {
        let mut f = identity_function();
        f.blocks[0].instructions = vec![Instruction::binary(
            Opcode::Add,
            IrType::I32,
            "t",
            Value::const_int(IrType::I32, 1),
            Value::const_int(IrType::I32, 2),
        )];
        let errs = validate_module(&module_of(f));
        assert_eq!(errs.len(), 1);
        assert!(errs[0].contains("entry"), "{errs:?}");
        assert!(errs[0].contains("terminator"), "{errs:?}");
    }

    #[test]
    fn use_before_definition_is_a_dominance_violation() {
        let mut f = identity_function();
        f.blocks[0].instructions = vec![
            Instruction::binary(
                Opcode::Add,
                IrType::I32,
                "a",
                Value::reg("b", IrType::I32),
                Value::const_int(IrType::I32, 1),
            ),
            Instruction::binary(
                Opcode::Add,
                IrType::I32,
                "b",
                Value::const_int(IrType::I32, 2),
                Value::const_int(IrType::I32, 3),
            ),
            Instruction::ret(Some(Value::reg("a", IrType::I32))),
        ];
        let errs = validate_module(&module_of(f));
        assert_eq!(errs.len(), 1, "{errs:?}");
        assert!(errs[0].contains("%b"), "{errs:?}");
    }

    #[test]
    fn undefined_register_reported() {
        let mut f = identity_function();
        f.blocks[0].instructions = vec![Instruction::ret(Some(Value::reg("ghost", IrType::I32)))];
        let errs = validate_module(&module_of(f));
        assert!(errs.iter().any(|e| e.contains("undefined register %ghost")), "{errs:?}");
    }

    #[test]
    fn constant_width_checked() {
        let mut f = identity_function();
        f.blocks[0].instructions = vec![
            Instruction::binary(
                Opcode::Add,
                IrType::I8,
                "t",
                Value::Const { ty: IrType::I8, bits: 300 },
                Value::const_int(IrType::I8, 1),
            ),
            Instruction::ret(Some(Value::Arg { index: 0, name: "x".into(), ty: IrType::I32 })),
        ];
        let errs = validate_module(&module_of(f));
        assert!(errs.iter().any(|e| e.contains("does not fit i8")), "{errs:?}");
    }

    #[test]
    fn safe_global_must_be_declared_and_zeroed() {
        let mut m = module_of(identity_function());
        m.safe_global = Some("mem".into());
        let errs = validate_module(&m);
        assert!(errs.iter().any(|e| e.contains("not declared")), "{errs:?}");

        m.globals.push(Global {
            name: "mem".into(),
            size: 8,
            init: vec![1, 0, 0, 0, 0, 0, 0, 0],
        });
        let errs = validate_module(&m);
        assert!(errs.iter().any(|e| e.contains("not zero-initialized")), "{errs:?}");
    }

    #[test]
    fn def_use_dead_definition_has_empty_uses() {
        let mut f = identity_function();
        f.blocks[0].instructions = vec![
            Instruction::binary(
                Opcode::Add,
                IrType::I32,
                "dead",
                Value::const_int(IrType::I32, 1),
                Value::const_int(IrType::I32, 2),
            ),
            Instruction::ret(Some(Value::Arg { index: 0, name: "x".into(), ty: IrType::I32 })),
        ];
        let map = def_use_map(&f);
        assert_eq!(map.len(), 1);
        assert!(map["dead"].uses.is_empty());
    }

    #[test]
    fn def_use_keys_are_exactly_result_registers() {
        let f = identity_function();
        assert!(def_use_map(&f).is_empty());
    }

    #[test]
    fn name_gen_skips_taken_names() {
        let mut f = identity_function();
        f.blocks[0].instructions.insert(
            0,
            Instruction::binary(
                Opcode::Add,
                IrType::I32,
                "m0",
                Value::const_int(IrType::I32, 1),
                Value::const_int(IrType::I32, 2),
            ),
        );
        let mut names = NameGen::for_function(&f);
        assert_eq!(names.fresh("m"), "m1");
        assert_eq!(names.fresh("m"), "m2");
        assert_eq!(names.fresh("ext"), "ext0");
    }
}
