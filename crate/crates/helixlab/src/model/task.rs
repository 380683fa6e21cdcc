//! Single-token arithmetic tasks and their tokenization.
//!
//! Every prompt is five tokens: `[BOS, a, op, b, =]`. Unary tasks carry
//! their constant in the `b` slot, so one prompt layout serves the whole
//! registry. Number tokens use their own value as the id; the operator,
//! `=`, and BOS follow.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Position of each prompt element.
pub const BOS_POS: usize = 0;
pub const A_POS: usize = 1;
pub const OP_POS: usize = 2;
pub const B_POS: usize = 3;
pub const EQ_POS: usize = 4;
/// All prompts have this length.
pub const SEQ_LEN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TaskKind {
    /// (a + b) mod p, operands in [0, p).
    AddMod { p: i64 },
    /// a + b, operands in [0, n).
    Add { n: i64 },
    /// a − c for a in [c, max].
    SubConst { c: i64, max: i64 },
    /// a // k for a in [0, max].
    DivFloor { k: i64, max: i64 },
    /// a mod k for a in [0, max].
    ModConst { k: i64, max: i64 },
    /// answer = a, for a in [0, max]. Sanity task.
    Identity { max: i64 },
}

/// A registered task: operand domain, answer function, prompt layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    name: String,
    #[serde(flatten)]
    kind: TaskKind,
}

impl TaskSpec {
    pub fn add_mod(p: i64) -> Self {
        assert!(p >= 2, "modulus must be at least 2");
        TaskSpec { name: format!("addmod{p}"), kind: TaskKind::AddMod { p } }
    }

    pub fn add(n: i64) -> Self {
        assert!(n >= 2);
        TaskSpec { name: format!("add{n}"), kind: TaskKind::Add { n } }
    }

    pub fn sub_const(c: i64, max: i64) -> Self {
        assert!(c >= 0 && max > c);
        TaskSpec { name: format!("sub{c}"), kind: TaskKind::SubConst { c, max } }
    }

    pub fn div_floor(k: i64, max: i64) -> Self {
        assert!(k >= 1 && max >= 1);
        TaskSpec { name: format!("div{k}"), kind: TaskKind::DivFloor { k, max } }
    }

    pub fn mod_const(k: i64, max: i64) -> Self {
        assert!(k >= 1 && max >= 1);
        TaskSpec { name: format!("mod{k}"), kind: TaskKind::ModConst { k, max } }
    }

    pub fn identity(max: i64) -> Self {
        assert!(max >= 1);
        TaskSpec { name: "identity".into(), kind: TaskKind::Identity { max } }
    }

    /// Parse a registry name like `addmod113`, `add100`, `sub23`, `div5`,
    /// `mod2`, or `identity`. Unary tasks default to operands up to 99.
    pub fn by_name(name: &str) -> Result<Self> {
        let num = |prefix: &str| -> Option<i64> { name.strip_prefix(prefix)?.parse().ok() };
        if let Some(p) = num("addmod") {
            if p >= 2 {
                return Ok(TaskSpec::add_mod(p));
            }
        } else if let Some(n) = num("add") {
            if n >= 2 {
                return Ok(TaskSpec::add(n));
            }
        } else if let Some(c) = num("sub") {
            if c >= 0 && c < 99 {
                return Ok(TaskSpec::sub_const(c, 99));
            }
        } else if let Some(k) = num("div") {
            if k >= 1 {
                return Ok(TaskSpec::div_floor(k, 99));
            }
        } else if let Some(k) = num("mod") {
            if k >= 1 {
                return Ok(TaskSpec::mod_const(k, 99));
            }
        } else if name == "identity" {
            return Ok(TaskSpec::identity(99));
        }
        Err(Error::invalid(format!(
            "unknown task {name:?}; expected addmod<p>, add<n>, sub<c>, div<k>, mod<k>, or identity"
        )))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Largest integer that must have its own token.
    fn num_max(&self) -> i64 {
        match self.kind {
            TaskKind::AddMod { p } => p - 1,
            TaskKind::Add { n } => 2 * (n - 1),
            TaskKind::SubConst { max, .. } => max,
            TaskKind::DivFloor { max, .. } => max,
            TaskKind::ModConst { k, max } => max.max(k),
            TaskKind::Identity { max } => max,
        }
    }

    /// Number tokens occupy ids `0..number_count()`.
    pub fn number_count(&self) -> usize {
        (self.num_max() + 1) as usize
    }

    pub fn vocab_size(&self) -> usize {
        self.number_count() + 3
    }

    pub fn op_token(&self) -> usize {
        self.number_count()
    }

    pub fn eq_token(&self) -> usize {
        self.number_count() + 1
    }

    pub fn bos_token(&self) -> usize {
        self.number_count() + 2
    }

    /// Operator glyph for display.
    pub fn op_glyph(&self) -> &'static str {
        match self.kind {
            TaskKind::AddMod { .. } | TaskKind::Add { .. } => "+",
            TaskKind::SubConst { .. } => "-",
            TaskKind::DivFloor { .. } => "//",
            TaskKind::ModConst { .. } => "%",
            TaskKind::Identity { .. } => "id",
        }
    }

    /// Valid first operands, ascending.
    pub fn a_values(&self) -> Vec<i64> {
        match self.kind {
            TaskKind::AddMod { p } => (0..p).collect(),
            TaskKind::Add { n } => (0..n).collect(),
            TaskKind::SubConst { c, max } => (c..=max).collect(),
            TaskKind::DivFloor { max, .. } => (0..=max).collect(),
            TaskKind::ModConst { max, .. } => (0..=max).collect(),
            TaskKind::Identity { max } => (0..=max).collect(),
        }
    }

    /// Valid second operands. Unary tasks have a single fixed constant here.
    pub fn b_values(&self) -> Vec<i64> {
        match self.kind {
            TaskKind::AddMod { p } => (0..p).collect(),
            TaskKind::Add { n } => (0..n).collect(),
            TaskKind::SubConst { c, .. } => vec![c],
            TaskKind::DivFloor { k, .. } => vec![k],
            TaskKind::ModConst { k, .. } => vec![k],
            TaskKind::Identity { .. } => vec![0],
        }
    }

    /// True when the task's second operand actually varies.
    pub fn is_binary(&self) -> bool {
        self.b_values().len() > 1
    }

    /// Every valid (a, b) pair in row-major (a-major) order.
    pub fn valid_pairs(&self) -> Vec<(i64, i64)> {
        let bs = self.b_values();
        self.a_values()
            .into_iter()
            .flat_map(|a| bs.iter().map(move |&b| (a, b)))
            .collect()
    }

    fn check_operands(&self, a: i64, b: i64) -> Result<()> {
        let a_ok = self.a_values().contains(&a);
        let b_ok = self.b_values().contains(&b);
        if !a_ok {
            let vals = self.a_values();
            return Err(Error::OperandOutOfRange { value: a, lo: vals[0], hi: *vals.last().unwrap() });
        }
        if !b_ok {
            let vals = self.b_values();
            return Err(Error::OperandOutOfRange { value: b, lo: vals[0], hi: *vals.last().unwrap() });
        }
        Ok(())
    }

    /// The correct answer for a valid pair.
    pub fn answer(&self, a: i64, b: i64) -> Result<i64> {
        self.check_operands(a, b)?;
        Ok(match self.kind {
            TaskKind::AddMod { p } => (a + b).rem_euclid(p),
            TaskKind::Add { .. } => a + b,
            TaskKind::SubConst { c, .. } => a - c,
            TaskKind::DivFloor { k, .. } => a / k,
            TaskKind::ModConst { k, .. } => a % k,
            TaskKind::Identity { .. } => a,
        })
    }

    /// Token sequence `[BOS, a, op, b, =]`.
    pub fn tokenize(&self, a: i64, b: i64) -> Result<Vec<usize>> {
        self.check_operands(a, b)?;
        Ok(vec![
            self.bos_token(),
            a as usize,
            self.op_token(),
            b as usize,
            self.eq_token(),
        ])
    }

    pub fn answer_token(&self, a: i64, b: i64) -> Result<usize> {
        Ok(self.answer(a, b)? as usize)
    }

    /// Recover (a, b) from a prompt produced by `tokenize`.
    pub fn detokenize(&self, tokens: &[usize]) -> Result<(i64, i64)> {
        if tokens.len() != SEQ_LEN
            || tokens[BOS_POS] != self.bos_token()
            || tokens[OP_POS] != self.op_token()
            || tokens[EQ_POS] != self.eq_token()
        {
            return Err(Error::invalid(format!("not a {} prompt: {tokens:?}", self.name)));
        }
        let a = tokens[A_POS] as i64;
        let b = tokens[B_POS] as i64;
        self.check_operands(a, b)?;
        Ok((a, b))
    }

    /// The value whose representation lives at a given operand position.
    pub fn operand_at(&self, pos: usize, a: i64, b: i64) -> Option<i64> {
        match pos {
            A_POS => Some(a),
            B_POS => Some(b),
            _ => {
                let _ = (a, b);
                None
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_answers() {
        let t = TaskSpec::add(10);
        assert_eq!(t.answer(0, 0).unwrap(), 0);
        assert_eq!(t.answer_token(0, 0).unwrap(), 0);
        assert_eq!(t.answer(9, 9).unwrap(), 18);
        assert_eq!(t.vocab_size(), 19 + 3);
    }

    #[test]
    fn mod_wraparound() {
        let t = TaskSpec::add_mod(113);
        assert_eq!(t.answer_token(112, 1).unwrap(), 0);
        assert_eq!(t.answer_token(112, 112).unwrap(), 111);
    }

    #[test]
    fn tokenize_round_trip_all_pairs() {
        for task in [TaskSpec::add_mod(7), TaskSpec::add(5), TaskSpec::sub_const(3, 9), TaskSpec::identity(6)] {
            for (a, b) in task.valid_pairs() {
                let toks = task.tokenize(a, b).unwrap();
                assert!(toks.iter().all(|&t| t < task.vocab_size()));
                assert_eq!(task.detokenize(&toks).unwrap(), (a, b));
            }
        }
    }

    #[test]
    fn out_of_range_rejected() {
        let t = TaskSpec::add_mod(7);
        assert!(matches!(t.tokenize(7, 0), Err(Error::OperandOutOfRange { .. })));
        assert!(matches!(t.answer(0, -1), Err(Error::OperandOutOfRange { .. })));
        let s = TaskSpec::sub_const(23, 99);
        assert!(s.tokenize(22, 23).is_err());
        assert_eq!(s.answer(23, 23).unwrap(), 0);
    }

    #[test]
    fn by_name_round_trip() {
        for name in ["addmod113", "add100", "sub23", "div5", "mod2", "identity"] {
            let t = TaskSpec::by_name(name).unwrap();
            assert_eq!(t.name(), name);
        }
        assert!(TaskSpec::by_name("frobnicate").is_err());
    }

    #[test]
    fn answers_are_single_tokens() {
        for task in [
            TaskSpec::add_mod(13),
            TaskSpec::add(20),
            TaskSpec::sub_const(23, 99),
            TaskSpec::div_floor(5, 99),
            TaskSpec::mod_const(2, 99),
            TaskSpec::identity(99),
        ] {
            for (a, b) in task.valid_pairs() {
                let tok = task.answer_token(a, b).unwrap();
                assert!(tok < task.number_count(), "{}: answer {tok} has no token", task.name());
            }
        }
    }
}
