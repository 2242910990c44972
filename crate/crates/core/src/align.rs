//! Instruction alignment between the two path blocks of a region.
//!
//! The aligner runs a dynamic program shaped like global sequence alignment
//! but scored with only two terms: a bonus per matched pair and a penalty
//! per gap. A pair may only be matched when the two instructions perform
//! the identical operation (same opcode, predicate, and types — operand
//! values are free to differ); incompatible positions have no mismatch
//! transition and must be expressed as two gaps. Every instruction of both
//! sequences appears in the result, so the table is global even though the
//! scoring terms come from local alignment.

use crate::ir::*;
use crate::region::{meldable_opcode, DiamondRegion};
use serde::Serialize;

/// Scoring parameters and the transformation gate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AlignmentParams {
    pub match_bonus: f64,
    pub gap_penalty: f64,
    /// Compared against the normalized score; regions scoring below it are
    /// rejected.
    pub score_threshold: f64,
    /// When true, one-sided (synthesized-else) regions are subject to the
    /// threshold like everything else instead of being exempt.
    pub threshold_one_sided: bool,
}

impl Default for AlignmentParams {
    fn default() -> Self {
        AlignmentParams {
            match_bonus: 1.0,
            gap_penalty: 0.5,
            score_threshold: 0.2,
            threshold_one_sided: false,
        }
    }
}

/// One slot of an alignment: indices into the then/else sequences, at least
/// one of which is present. `None` is the empty marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignmentPair {
    pub left: Option<usize>,
    pub right: Option<usize>,
}

impl AlignmentPair {
    pub fn is_match(&self) -> bool {
        self.left.is_some() && self.right.is_some()
    }
}

/// An ordered pairing of two instruction sequences. Projecting the left
/// entries (skipping gaps) reproduces the then sequence in order, and
/// likewise on the right.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub pairs: Vec<AlignmentPair>,
    pub raw_score: f64,
    /// `raw_score / pairs.len()`, or 0 for the empty alignment.
    pub normalized_score: f64,
    pub num_matches: usize,
    pub num_gaps: usize,
}

/// Whether two instructions perform the identical operation: same opcode
/// (icmp predicates included), same result type, and pairwise-equal operand
/// types. Operand values need not match.
pub fn compatible(a: &Instruction, b: &Instruction) -> bool {
    debug_assert!(!a.is_terminator() && !b.is_terminator());
    a.opcode == b.opcode
        && a.result_type == b.result_type
        && a.operands.len() == b.operands.len()
        && a.operands
            .iter()
            .zip(&b.operands)
            .all(|(x, y)| x.ty() == y.ty())
}

#[derive(Clone, Copy, PartialEq)]
enum Step {
    Start,
    Diag,
    GapThen,
    GapElse,
}

/// Computes the maximum-score alignment of the two (terminator-free)
/// sequences. Ties prefer a match, then consuming the then side, so the
/// result is deterministic.
pub fn compute_alignment(
    then_seq: &[Instruction],
    else_seq: &[Instruction],
    params: &AlignmentParams,
) -> Alignment {
    let n = then_seq.len();
    let m = else_seq.len();
    let mut score = vec![vec![0f64; m + 1]; n + 1];
    let mut step = vec![vec![Step::Start; m + 1]; n + 1];

    for i in 1..=n {
        score[i][0] = -(i as f64) * params.gap_penalty;
        step[i][0] = Step::GapThen;
    }
    for j in 1..=m {
        score[0][j] = -(j as f64) * params.gap_penalty;
        step[0][j] = Step::GapElse;
    }
    for i in 1..=n {
        for j in 1..=m {
            let mut best = f64::NEG_INFINITY;
            let mut chosen = Step::Start;
            if compatible(&then_seq[i - 1], &else_seq[j - 1]) {
                best = score[i - 1][j - 1] + params.match_bonus;
                chosen = Step::Diag;
            }
            let gap_then = score[i - 1][j] - params.gap_penalty;
            if gap_then > best {
                best = gap_then;
                chosen = Step::GapThen;
            }
            let gap_else = score[i][j - 1] - params.gap_penalty;
            if gap_else > best {
                best = gap_else;
                chosen = Step::GapElse;
            }
            score[i][j] = best;
            step[i][j] = chosen;
        }
    }

    let mut pairs = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        match step[i][j] {
            Step::Diag => {
                i -= 1;
                j -= 1;
                pairs.push(AlignmentPair { left: Some(i), right: Some(j) });
            }
            Step::GapThen => {
                i -= 1;
                pairs.push(AlignmentPair { left: Some(i), right: None });
            }
            Step::GapElse => {
                j -= 1;
                pairs.push(AlignmentPair { left: None, right: Some(j) });
            }
            Step::Start => unreachable!("traceback escaped the table"),
        }
    }
    pairs.reverse();

    let num_matches = pairs.iter().filter(|p| p.is_match()).count();
    let num_gaps = pairs.len() - num_matches;
    let raw_score = num_matches as f64 * params.match_bonus - num_gaps as f64 * params.gap_penalty;
    debug_assert_eq!(raw_score, score[n][m]);
    let normalized_score = if pairs.is_empty() {
        0.0
    } else {
        raw_score / pairs.len() as f64
    };
    Alignment {
        pairs,
        raw_score,
        normalized_score,
        num_matches,
        num_gaps,
    }
}

/// The transformation gate: one-sided regions pass outright (unless the
/// params subject them to the threshold too); everything else needs a
/// normalized score at or above the threshold.
pub fn should_transform(
    alignment: &Alignment,
    region: &DiamondRegion,
    params: &AlignmentParams,
) -> bool {
    if region.synthesized_else && !params.threshold_one_sided {
        return true;
    }
    alignment.normalized_score >= params.score_threshold
}

/// Whether every unaligned instruction admits a safe extraneous twin.
/// Arithmetic, logic, icmp, select and ptradd always do (identity or
/// trap-free operands exist); loads and stores do via the safe global. Any
/// unsupported opcode in either path makes the alignment incompletable.
pub fn can_complete_alignment(then_seq: &[Instruction], else_seq: &[Instruction]) -> bool {
    then_seq
        .iter()
        .chain(else_seq)
        .all(|inst| meldable_opcode(inst.opcode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::{canonicalize_if_then, collect_valid_branches, FilterSpec};
    use crate::testgen::load_fixture;

    fn add_i32(result: &str, a: Value, b: Value) -> Instruction {
        Instruction::binary(Opcode::Add, IrType::I32, result, a, b)
    }

    #[test]
    fn compatible_ignores_operand_values() {
        let a = add_i32("r1", Value::reg("a", IrType::I32), Value::const_int(IrType::I32, 1));
        let b = add_i32("r2", Value::reg("b", IrType::I32), Value::const_int(IrType::I32, 7));
        assert!(compatible(&a, &b));
    }

    #[test]
    fn compatible_requires_identical_operation() {
        let a = add_i32("r1", Value::reg("a", IrType::I32), Value::const_int(IrType::I32, 1));
        let s = Instruction::binary(
            Opcode::Sub,
            IrType::I32,
            "r2",
            Value::reg("a", IrType::I32),
            Value::const_int(IrType::I32, 1),
        );
        assert!(!compatible(&a, &s));

        let lt = Instruction::icmp(
            IcmpPred::Slt,
            "c1",
            Value::reg("a", IrType::I32),
            Value::const_int(IrType::I32, 0),
        );
        let le = Instruction::icmp(
            IcmpPred::Sle,
            "c2",
            Value::reg("a", IrType::I32),
            Value::const_int(IrType::I32, 0),
        );
        assert!(!compatible(&lt, &le));
    }

    #[test]
    fn identical_opcode_sequences_fully_match() {
        let m = load_fixture("offset_pick.mir");
        let f = m.function("offset_pick").unwrap();
        let then_seq = f.block("then").unwrap().body();
        let else_seq = f.block("else").unwrap().body();
        let a = compute_alignment(then_seq, else_seq, &AlignmentParams::default());
        assert_eq!(a.num_matches, 1);
        assert_eq!(a.num_gaps, 0);
        assert_eq!(a.normalized_score, 1.0);
    }

    #[test]
    fn empty_else_yields_all_gaps() {
        let mut m = load_fixture("to_upper.mir");
        let f = m.function_mut("to_upper").unwrap();
        let region = collect_valid_branches(f, &FilterSpec::default(), 64).pop().unwrap();
        let region = canonicalize_if_then(f, &region);
        let then_seq = f.block(&region.then_block).unwrap().body().to_vec();
        let else_seq = f.block(&region.else_block).unwrap().body().to_vec();
        let a = compute_alignment(&then_seq, &else_seq, &AlignmentParams::default());
        assert_eq!(a.num_matches, 0);
        assert_eq!(a.num_gaps, 4);
        assert_eq!(a.raw_score, -2.0);
    }

    #[test]
    fn single_add_aligns_against_trailing_add() {
        let x = Value::reg("x", IrType::I32);
        let one = Value::const_int(IrType::I32, 1);
        let then_seq = vec![add_i32("a", x.clone(), one.clone())];
        let else_seq = vec![
            Instruction::binary(Opcode::Mul, IrType::I32, "m", x.clone(), one.clone()),
            add_i32("b", x, one),
        ];
        let a = compute_alignment(&then_seq, &else_seq, &AlignmentParams::default());
        assert_eq!(
            a.pairs,
            vec![
                AlignmentPair { left: None, right: Some(0) },
                AlignmentPair { left: Some(0), right: Some(1) },
            ]
        );
        assert_eq!(a.num_matches, 1);
        assert_eq!(a.num_gaps, 1);
    }

    #[test]
    fn projection_reproduces_both_sequences() {
        let m = load_fixture("low_score.mir");
        let f = m.function("low_score").unwrap();
        let then_seq = f.block("then").unwrap().body();
        let else_seq = f.block("else").unwrap().body();
        let a = compute_alignment(then_seq, else_seq, &AlignmentParams::default());
        let lefts: Vec<usize> = a.pairs.iter().filter_map(|p| p.left).collect();
        let rights: Vec<usize> = a.pairs.iter().filter_map(|p| p.right).collect();
        assert_eq!(lefts, (0..then_seq.len()).collect::<Vec<_>>());
        assert_eq!(rights, (0..else_seq.len()).collect::<Vec<_>>());
        assert!(a.pairs.len() >= then_seq.len().max(else_seq.len()));
        assert!(a.pairs.len() <= then_seq.len() + else_seq.len());
    }

    #[test]
    fn one_match_four_gaps_scores_minus_point_two_and_is_rejected() {
        let m = load_fixture("low_score.mir");
        let f = m.function("low_score").unwrap();
        let region = collect_valid_branches(f, &FilterSpec::default(), 64).pop().unwrap();
        let then_seq = f.block("then").unwrap().body();
        let else_seq = f.block("else").unwrap().body();
        let params = AlignmentParams::default();
        let a = compute_alignment(then_seq, else_seq, &params);
        assert_eq!(a.num_matches, 1);
        assert_eq!(a.num_gaps, 4);
        assert_eq!(a.normalized_score, -0.2);
        assert!(!should_transform(&a, &region, &params));
    }

    #[test]
    fn one_sided_region_is_exempt_from_threshold_by_default() {
        let mut m = load_fixture("to_upper.mir");
        let f = m.function_mut("to_upper").unwrap();
        let region = collect_valid_branches(f, &FilterSpec::default(), 64).pop().unwrap();
        let region = canonicalize_if_then(f, &region);
        let then_seq = f.block(&region.then_block).unwrap().body().to_vec();
        let params = AlignmentParams::default();
        let a = compute_alignment(&then_seq, &[], &params);
        assert!(should_transform(&a, &region, &params));

        let strict = AlignmentParams { threshold_one_sided: true, ..params };
        assert!(!should_transform(&a, &region, &strict));
    }

    #[test]
    fn completion_is_possible_for_memory_and_arithmetic() {
        let m = load_fixture("to_upper.mir");
        let f = m.function("to_upper").unwrap();
        assert!(can_complete_alignment(f.block("then").unwrap().body(), &[]));
    }

    #[test]
    fn unsupported_opcode_blocks_completion() {
        let phi = Instruction::phi(
            IrType::I32,
            "p",
            vec![(Value::const_int(IrType::I32, 0), "a".to_string())],
        );
        assert!(!can_complete_alignment(&[phi], &[]));
    }

    #[test]
    fn score_identity_holds() {
        let m = load_fixture("nested.mir");
        let f = m.function("nested").unwrap();
        let params = AlignmentParams::default();
        for (a_label, b_label) in [("ithen", "ielse"), ("othen", "oelse")] {
            let a_seq = f.block(a_label).unwrap().body();
            let b_seq = f.block(b_label).unwrap().body();
            let a = compute_alignment(a_seq, b_seq, &params);
            assert_eq!(a.num_matches + a.num_gaps, a.pairs.len());
            assert_eq!(
                a.raw_score,
                a.num_matches as f64 * params.match_bonus - a.num_gaps as f64 * params.gap_penalty
            );
        }
    }
}
