//! Finds structurally valid branches (diamonds and triangles), applies
//! filtering, and canonicalizes triangles to if-then-else form.
//!
//! A diamond is a conditional branch whose two targets are straight-line
//! single-predecessor blocks reconverging at one merge block. A triangle
//! (if-then) has one target equal to the merge; canonicalization inserts a
//! fresh empty block on the missing side so later stages only ever see
//! diamonds.

use crate::ir::*;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

/// A structurally valid branch region. `then_block` is always the
/// `br_cond` true target and `else_block` the false target; for a triangle
/// straight out of [`collect_valid_branches`], one of the two still equals
/// `merge_block` until [`canonicalize_if_then`] has run.
#[derive(Debug, Clone, PartialEq)]
pub struct DiamondRegion {
    pub head_block: String,
    pub condition: Value,
    pub then_block: String,
    pub else_block: String,
    pub merge_block: String,
    /// True once a triangle's missing side has been filled in with a fresh
    /// empty block.
    pub synthesized_else: bool,
}

impl DiamondRegion {
    /// True while one arm still is the merge block itself.
    pub fn is_triangle(&self) -> bool {
        self.then_block == self.merge_block || self.else_block == self.merge_block
    }
}

/// Branch-site filtering, the profile-guided surface of the pipeline.
#[derive(Debug, Clone, Default, Serialize)]
pub struct FilterSpec {
    pub include_funcs: Option<BTreeSet<String>>,
    pub exclude_funcs: BTreeSet<String>,
    pub exclude_files: BTreeSet<String>,
    /// Maps source file names to the line numbers of branches that may be
    /// transformed; when present, everything unlisted is filtered out.
    pub include_lines: Option<BTreeMap<String, BTreeSet<u32>>>,
}

impl FilterSpec {
    /// Include and exclude function lists must be disjoint when both given.
    pub fn check(&self) -> Result<(), String> {
        if let Some(include) = &self.include_funcs {
            let both: Vec<&String> = include.intersection(&self.exclude_funcs).collect();
            if !both.is_empty() {
                return Err(format!(
                    "functions named in both include and exclude lists: {}",
                    both.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
                ));
            }
        }
        Ok(())
    }

    pub fn allows_function(&self, f: &Function) -> bool {
        if self.exclude_funcs.contains(&f.name) {
            return false;
        }
        if let Some(include) = &self.include_funcs {
            if !include.contains(&f.name) {
                return false;
            }
        }
        if let Some(file) = &f.source_file {
            if self.exclude_files.contains(file) {
                return false;
            }
        }
        true
    }

    /// Whether the branch at `line` (the `br_cond`'s source line) may be
    /// transformed. Line filtering matches on the branch instruction.
    pub fn allows_branch(&self, f: &Function, line: Option<u32>) -> bool {
        if !self.allows_function(f) {
            return false;
        }
        match &self.include_lines {
            None => true,
            Some(map) => {
                let Some(file) = &f.source_file else {
                    return false;
                };
                let Some(lines) = map.get(file) else {
                    return false;
                };
                line.is_some_and(|l| lines.contains(&l))
            }
        }
    }
}

/// Opcodes the melding stages know how to handle inside path blocks.
pub fn meldable_opcode(op: Opcode) -> bool {
    op.is_binary_int()
        || matches!(
            op,
            Opcode::Icmp(_) | Opcode::Select | Opcode::Load | Opcode::Store | Opcode::PtrAdd
        )
}

/// True when `label` can serve as a path block hanging off `head`: single
/// predecessor, straight-line body of supported opcodes, unconditional
/// branch out, within the size cap.
fn path_block_target<'a>(
    f: &'a Function,
    preds: &[Vec<usize>],
    head: usize,
    label: &str,
    max_block_size: usize,
) -> Option<(&'a BasicBlock, String)> {
    let bi = f.block_index(label)?;
    if bi == head {
        return None;
    }
    if preds[bi].as_slice() != [head] {
        return None;
    }
    let block = &f.blocks[bi];
    let term = block.terminator()?;
    if term.opcode != Opcode::Br {
        return None;
    }
    if block.body().len() > max_block_size {
        return None;
    }
    for inst in block.body() {
        if inst.opcode == Opcode::Phi || !meldable_opcode(inst.opcode) {
            return None;
        }
    }
    Some((block, term.labels[0].clone()))
}

/// Every phi in the merge block must route exactly the region's two in-edges.
fn merge_phis_ok(f: &Function, merge: &str, in_a: &str, in_b: &str) -> bool {
    let Some(block) = f.block(merge) else {
        return false;
    };
    for inst in &block.instructions {
        if inst.opcode == Opcode::Phi {
            let labels: BTreeSet<&str> = inst.labels.iter().map(|s| s.as_str()).collect();
            if inst.labels.len() != 2 || labels != BTreeSet::from([in_a, in_b]) {
                return false;
            }
        }
    }
    true
}

/// Re-derives the region rooted at block `head`, if a structurally valid one
/// exists there right now. Triangles come back un-canonicalized, with the
/// merge block standing in for the missing side.
pub fn detect_region_at(f: &Function, head: usize, max_block_size: usize) -> Option<DiamondRegion> {
    let head_block = &f.blocks[head];
    let term = head_block.terminator()?;
    if term.opcode != Opcode::BrCond {
        return None;
    }
    let (t_label, f_label) = (term.labels[0].clone(), term.labels[1].clone());
    if t_label == f_label {
        return None;
    }
    let preds = f.predecessors();
    let condition = term.operands[0].clone();
    let region = |then_block: String, else_block: String, merge_block: String| DiamondRegion {
        head_block: head_block.label.clone(),
        condition: condition.clone(),
        then_block,
        else_block,
        merge_block,
        synthesized_else: false,
    };

    let t_path = path_block_target(f, &preds, head, &t_label, max_block_size);
    let f_path = path_block_target(f, &preds, head, &f_label, max_block_size);

    match (t_path, f_path) {
        (Some((_, t_merge)), Some((_, f_merge))) if t_merge == f_merge => {
            let merge = t_merge;
            if merge == head_block.label || merge == t_label || merge == f_label {
                return None;
            }
            if !merge_phis_ok(f, &merge, &t_label, &f_label) {
                return None;
            }
            Some(region(t_label, f_label, merge))
        }
        (Some((_, t_merge)), _) if t_merge == f_label && f_label != head_block.label => {
            // if-then: the false edge goes straight to the merge.
            if !merge_phis_ok(f, &f_label, &t_label, &head_block.label) {
                return None;
            }
            Some(region(t_label, f_label.clone(), f_label))
        }
        (_, Some((_, f_merge))) if f_merge == t_label && t_label != head_block.label => {
            // if-not-then: the true edge goes straight to the merge.
            if !merge_phis_ok(f, &t_label, &f_label, &head_block.label) {
                return None;
            }
            Some(region(t_label.clone(), f_label, t_label))
        }
        _ => None,
    }
}

/// Collects every structurally valid branch of the function whose branch
/// instruction passes the filters, in block order.
pub fn collect_valid_branches(
    f: &Function,
    filters: &FilterSpec,
    max_block_size: usize,
) -> Vec<DiamondRegion> {
    let mut regions = Vec::new();
    for head in 0..f.blocks.len() {
        if let Some(region) = detect_region_at(f, head, max_block_size) {
            let line = f.blocks[head].terminator().and_then(|t| t.source_line);
            if filters.allows_branch(f, line) {
                regions.push(region);
            }
        }
    }
    regions
}

/// Converts an if-then triangle to if-then-else form by inserting a fresh
/// empty block (a lone `br` to the merge) on the missing side, retargeting
/// the head branch, and re-keying merge phis that read from the head edge.
/// Already-diamond regions come back unchanged.
pub fn canonicalize_if_then(f: &mut Function, region: &DiamondRegion) -> DiamondRegion {
    if !region.is_triangle() {
        return region.clone();
    }
    let then_side_missing = region.then_block == region.merge_block;
    let arm_label = if then_side_missing {
        region.else_block.clone()
    } else {
        region.then_block.clone()
    };

    let mut names = NameGen::for_function(f);
    let fresh = names.fresh(if then_side_missing { "then" } else { "else" });

    let empty = BasicBlock::new(fresh.clone(), vec![Instruction::br(region.merge_block.clone())]);
    let arm_index = f.block_index(&arm_label).expect("arm block exists");
    f.blocks.insert(arm_index + 1, empty);

    let head = f.block_mut(&region.head_block).expect("head block exists");
    let term = head.instructions.last_mut().expect("head has terminator");
    let edge = if then_side_missing { 0 } else { 1 };
    term.labels[edge] = fresh.clone();

    let head_label = region.head_block.clone();
    let merge = f.block_mut(&region.merge_block).expect("merge block exists");
    for inst in &mut merge.instructions {
        if inst.opcode == Opcode::Phi {
            for label in &mut inst.labels {
                if *label == head_label {
                    *label = fresh.clone();
                }
            }
        }
    }

    let mut out = region.clone();
    if then_side_missing {
        out.then_block = fresh;
    } else {
        out.else_block = fresh;
    }
    out.synthesized_else = true;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testgen::load_fixture;
    use crate::text::parse_module;

    #[test]
    fn to_upper_has_one_triangle_inside_the_loop() {
        let m = load_fixture("to_upper.mir");
        let f = m.function("to_upper").unwrap();
        let regions = collect_valid_branches(f, &FilterSpec::default(), 64);
        assert_eq!(regions.len(), 1);
        let r = &regions[0];
        assert_eq!(r.head_block, "body");
        assert_eq!(r.then_block, "then");
        assert_eq!(r.else_block, "latch");
        assert_eq!(r.merge_block, "latch");
        assert!(r.is_triangle());
    }

    #[test]
    fn offset_pick_is_one_diamond() {
        let m = load_fixture("offset_pick.mir");
        let f = m.function("offset_pick").unwrap();
        let regions = collect_valid_branches(f, &FilterSpec::default(), 64);
        assert_eq!(regions.len(), 1);
        assert!(!regions[0].is_triangle());
        assert_eq!(regions[0].merge_block, "merge");
    }

    #[test]
    fn excluded_function_yields_no_regions() {
        let m = load_fixture("offset_pick.mir");
        let f = m.function("offset_pick").unwrap();
        let filters = FilterSpec {
            exclude_funcs: ["offset_pick".to_string()].into(),
            ..FilterSpec::default()
        };
        assert!(collect_valid_branches(f, &filters, 64).is_empty());
    }

    #[test]
    fn line_filter_matches_the_branch_instruction() {
        let m = load_fixture("to_upper.mir");
        let f = m.function("to_upper").unwrap();
        let br_line = f
            .block("body")
            .unwrap()
            .terminator()
            .unwrap()
            .source_line
            .unwrap();
        let mut lines = BTreeMap::new();
        lines.insert("to_upper.c".to_string(), BTreeSet::from([br_line]));
        let filters = FilterSpec {
            include_lines: Some(lines),
            ..FilterSpec::default()
        };
        assert_eq!(collect_valid_branches(f, &filters, 64).len(), 1);

        let mut wrong = BTreeMap::new();
        wrong.insert("to_upper.c".to_string(), BTreeSet::from([br_line + 1]));
        let filters = FilterSpec {
            include_lines: Some(wrong),
            ..FilterSpec::default()
        };
        assert!(collect_valid_branches(f, &filters, 64).is_empty());
    }

    #[test]
    fn size_cap_skips_oversized_paths() {
        let m = load_fixture("low_score.mir");
        let f = m.function("low_score").unwrap();
        assert_eq!(collect_valid_branches(f, &FilterSpec::default(), 64).len(), 1);
        assert!(collect_valid_branches(f, &FilterSpec::default(), 4).is_empty());
    }

    #[test]
    fn canonicalize_inserts_empty_else_and_updates_region() {
        let mut m = load_fixture("to_upper.mir");
        let f = m.function_mut("to_upper").unwrap();
        let region = collect_valid_branches(f, &FilterSpec::default(), 64)
            .pop()
            .unwrap();
        let canon = canonicalize_if_then(f, &region);
        assert!(canon.synthesized_else);
        assert_ne!(canon.else_block, canon.merge_block);
        let else_block = f.block(&canon.else_block).unwrap();
        assert_eq!(else_block.instructions.len(), 1);
        assert_eq!(else_block.instructions[0].opcode, Opcode::Br);

        // Re-collection now reports a diamond whose else side is just the
        // terminator.
        let regions = collect_valid_branches(f, &FilterSpec::default(), 64);
        assert_eq!(regions.len(), 1);
        assert!(!regions[0].is_triangle());
        assert_eq!(regions[0].else_block, canon.else_block);
        assert!(crate::ir::validate_module(&m).is_empty());
    }

    #[test]
    fn canonicalize_rekeys_merge_phi_to_new_block() {
        let mut m = load_fixture("count_lower.mir");
        let f = m.function_mut("count_lower").unwrap();
        let region = collect_valid_branches(f, &FilterSpec::default(), 64)
            .pop()
            .unwrap();
        let canon = canonicalize_if_then(f, &region);
        let phi = &f.block("latch").unwrap().instructions[0];
        assert_eq!(phi.opcode, Opcode::Phi);
        assert!(phi.labels.contains(&canon.else_block));
        assert!(!phi.labels.contains(&"body".to_string()));
        assert!(crate::ir::validate_module(&m).is_empty());
    }

    #[test]
    fn canonicalize_is_identity_on_diamonds() {
        let mut m = load_fixture("offset_pick.mir");
        let f = m.function_mut("offset_pick").unwrap();
        let region = collect_valid_branches(f, &FilterSpec::default(), 64)
            .pop()
            .unwrap();
        let before = f.clone();
        let canon = canonicalize_if_then(f, &region);
        assert_eq!(canon, region);
        assert_eq!(*f, before);
    }

    #[test]
    fn merge_with_mismatched_phi_is_not_a_region() {
        // The merge phi also routes a value from outside the region.
        let m = parse_module(
            "func @f(i1 %c, i1 %d, i64 %x) -> i64 {
entry:
  br %d, label %head, label %side
side:
  br label %merge
head:
  br %c, label %then, label %else
then:
  %a = add i64 %x, 1
  br label %merge
else:
  %b = add i64 %x, 2
  br label %merge
merge:
  %r = phi i64 [%a, %then], [%b, %else], [%x, %side]
  ret %r
}",
        )
        .unwrap();
        let f = m.function("f").unwrap();
        assert!(collect_valid_branches(f, &FilterSpec::default(), 64).is_empty());
    }
}
