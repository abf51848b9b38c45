//! Synthetic modular-arithmetic chains with a binary exact-match verifier.
//!
//! A task prompt reads `BOS a op b op c ... MOD m EQ`. Operators apply left
//! to right with no precedence; every running value is reduced mod `m`.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Token ids of the toy vocabulary. Digits map to themselves.
pub mod vocab {
    pub const PLUS: usize = 10;
    pub const MINUS: usize = 11;
    pub const TIMES: usize = 12;
    pub const EQ: usize = 13;
    pub const MOD: usize = 14;
    pub const BOS: usize = 15;
    /// End-of-latent marker.
    pub const MARK: usize = 16;
    pub const EOS: usize = 17;
    /// Smallest vocabulary that holds every reserved id.
    pub const MIN_SIZE: usize = 18;

    pub fn name(id: usize) -> String {
        match id {
            0..=9 => id.to_string(),
            PLUS => "+".into(),
            MINUS => "-".into(),
            TIMES => "*".into(),
            EQ => "=".into(),
            MOD => " mod ".into(),
            BOS => "<bos>".into(),
            MARK => "<mark>".into(),
            EOS => "<eos>".into(),
            other => format!("<u{other}>"),
        }
    }

    pub fn render(ids: &[usize]) -> String {
        ids.iter().map(|&i| name(i)).collect()
    }
}

pub const DEFAULT_MODULUS: u32 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operator {
    Add,
    Sub,
    Mul,
}

impl Operator {
    pub fn token(self) -> usize {
        match self {
            Operator::Add => vocab::PLUS,
            Operator::Sub => vocab::MINUS,
            Operator::Mul => vocab::TIMES,
        }
    }

    pub fn apply(self, x: u32, y: u32, modulus: u32) -> u32 {
        let (x, y, m) = (x as i64, y as i64, modulus as i64);
        let v = match self {
            Operator::Add => x + y,
            Operator::Sub => x - y,
            Operator::Mul => x * y,
        };
        v.rem_euclid(m) as u32
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub seed: u64,
    pub difficulty: usize,
    pub modulus: u32,
    pub operands: Vec<u32>,
    pub operators: Vec<Operator>,
    pub prompt_tokens: Vec<usize>,
    pub gold_answer_tokens: Vec<usize>,
}

pub fn digits(mut v: u32) -> Vec<usize> {
    let mut out = vec![(v % 10) as usize];
    v /= 10;
    while v > 0 {
        out.push((v % 10) as usize);
        v /= 10;
    }
    out.reverse();
    out
}

impl TaskInstance {
    /// Builds an instance from an explicit expression.
    pub fn from_expression(
        seed: u64,
        operands: Vec<u32>,
        operators: Vec<Operator>,
        modulus: u32,
    ) -> Result<Self> {
        if operators.is_empty() || operands.len() != operators.len() + 1 {
            return Err(Error::Invalid(format!(
                "{} operands do not fit {} operators",
                operands.len(),
                operators.len()
            )));
        }
        if modulus < 2 {
            return Err(Error::Invalid(format!("modulus {modulus} < 2")));
        }
        let mut prompt = vec![vocab::BOS];
        prompt.extend(digits(operands[0]));
        for (op, &x) in operators.iter().zip(&operands[1..]) {
            prompt.push(op.token());
            prompt.extend(digits(x));
        }
        prompt.push(vocab::MOD);
        prompt.extend(digits(modulus));
        prompt.push(vocab::EQ);
        let mut inst = Self {
            seed,
            difficulty: operators.len(),
            modulus,
            operands,
            operators,
            prompt_tokens: prompt,
            gold_answer_tokens: vec![],
        };
        inst.gold_answer_tokens = digits(*inst.running_values().last().expect("non-empty"));
        Ok(inst)
    }

    /// Value after each operator, evaluated left to right.
    pub fn running_values(&self) -> Vec<u32> {
        let mut acc = self.operands[0] % self.modulus;
        self.operators
            .iter()
            .zip(&self.operands[1..])
            .map(|(op, &x)| {
                acc = op.apply(acc, x, self.modulus);
                acc
            })
            .collect()
    }

    /// Running values as tokens: the explicit reasoning chain.
    pub fn chain_tokens(&self) -> Vec<usize> {
        self.running_values().into_iter().flat_map(digits).collect()
    }

    /// Full explicit response: chain, end-of-latent marker, answer, EOS.
    pub fn explicit_response(&self) -> Vec<usize> {
        let mut r = self.chain_tokens();
        r.push(vocab::MARK);
        r.extend(&self.gold_answer_tokens);
        r.push(vocab::EOS);
        r
    }

    pub fn expression(&self) -> String {
        vocab::render(&self.prompt_tokens[1..])
    }
}

pub fn generate_task(seed: u64, difficulty: usize) -> Result<TaskInstance> {
    generate_task_with_modulus(seed, difficulty, DEFAULT_MODULUS)
}

pub fn generate_task_with_modulus(seed: u64, difficulty: usize, modulus: u32) -> Result<TaskInstance> {
    if difficulty == 0 {
        return Err(Error::Invalid("difficulty must be at least 1".into()));
    }
    let mut r = rng::stream(seed, &[difficulty as u64, 0x7a5c]);
    let operands = (0..=difficulty).map(|_| r.random_range(0..10u32)).collect();
    let operators = (0..difficulty)
        .map(|_| match r.random_range(0..3u8) {
            0 => Operator::Add,
            1 => Operator::Sub,
            _ => Operator::Mul,
        })
        .collect();
    TaskInstance::from_expression(seed, operands, operators, modulus)
}

/// Reward 1.0 iff `answer` (EOS stripped) equals the gold answer exactly.
pub fn verify(answer: &[usize], instance: &TaskInstance) -> f64 {
    let stripped = match answer.last() {
        Some(&vocab::EOS) => &answer[..answer.len() - 1],
        _ => answer,
    };
    if !stripped.is_empty() && stripped == instance.gold_answer_tokens.as_slice() {
        1.0
    } else {
        0.0
    }
}

/// Answer segment of an explicit response: tokens after the last marker
/// (or all tokens when there is none), truncated at the first EOS.
pub fn extract_answer(explicit: &[usize]) -> &[usize] {
    let start = explicit.iter().rposition(|&t| t == vocab::MARK).map_or(0, |p| p + 1);
    let tail = &explicit[start..];
    match tail.iter().position(|&t| t == vocab::EOS) {
        Some(p) => &tail[..p],
        None => tail,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Task seed for item `index` of a split. Train seeds are even and eval
/// seeds odd, so the splits never share a (seed, difficulty) pair.
pub fn split_seed(split: Split, base: u64, index: u64) -> u64 {
    let bit = match split {
        Split::Train => 0,
        Split::Eval => 1,
    };
    (rng::derive_seed(base, &[index, 0x5eed]) << 1) | bit
}

pub fn split_of(seed: u64) -> Split {
    if seed & 1 == 0 {
        Split::Train
    } else {
        Split::Eval
    }
}

/// `n` tasks of one split, difficulties drawn uniformly from `range`.
pub fn task_set(split: Split, n: usize, range: (usize, usize), base: u64) -> Result<Vec<TaskInstance>> {
    let (lo, hi) = range;
    if lo == 0 || hi < lo {
        return Err(Error::Invalid(format!("difficulty range {lo}..={hi}")));
    }
    let mut r = rng::stream(base, &[0xd1ff, split as u64]);
    (0..n as u64)
        .map(|i| generate_task(split_seed(split, base, i), r.random_range(lo..=hi)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupExample {
    pub instance: TaskInstance,
    pub chain: Vec<usize>,
    pub answer: Vec<usize>,
}

impl WarmupExample {
    pub fn response(&self) -> Vec<usize> {
        let mut r = self.chain.clone();
        r.push(vocab::MARK);
        r.extend(&self.answer);
        r.push(vocab::EOS);
        r
    }
}

/// Supervised warmup data from the train split.
pub fn make_warmup_corpus(n: usize, range: (usize, usize), seed: u64) -> Result<Vec<WarmupExample>> {
    if n == 0 {
        return Err(Error::Invalid("warmup corpus needs n >= 1".into()));
    }
    Ok(task_set(Split::Train, n, range, seed)?
        .into_iter()
        .map(|instance| WarmupExample {
            chain: instance.chain_tokens(),
            answer: instance.gold_answer_tokens.clone(),
            instance,
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    seed: u64,
    difficulty: usize,
    tokens: Vec<usize>,
    gold: Vec<usize>,
    #[serde(default)]
    modulus: Option<u32>,
}

pub fn write_corpus(path: &Path, tasks: &[TaskInstance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in tasks {
        let line = CorpusLine {
            seed: t.seed,
            difficulty: t.difficulty,
            tokens: t.prompt_tokens.clone(),
            gold: t.gold_answer_tokens.clone(),
            modulus: Some(t.modulus),
        };
        serde_json::to_writer(&mut f, &line)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a corpus and regenerates each instance from its seed, rejecting
/// lines whose tokens or gold answer disagree with the regenerated task.
pub fn read_corpus(path: &Path) -> Result<Vec<TaskInstance>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = vec![];
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusLine = serde_json::from_str(&line)?;
        let inst = generate_task_with_modulus(
            rec.seed,
            rec.difficulty,
            rec.modulus.unwrap_or(DEFAULT_MODULUS),
        )?;
        if inst.prompt_tokens != rec.tokens || inst.gold_answer_tokens != rec.gold {
            return Err(Error::Invalid(format!("corpus line {} does not match its seed", n + 1)));
        }
        out.push(inst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_plus_five() {
        let t = TaskInstance::from_expression(1, vec![7, 5], vec![Operator::Add], 10).unwrap();
        assert_eq!(t.gold_answer_tokens, vec![2]);
        assert_eq!(t.expression(), "7+5 mod 10=");
    }

    #[test]
    fn left_to_right_chain() {
        let t = TaskInstance::from_expression(1, vec![3, 4, 2], vec![Operator::Add, Operator::Mul], 10)
            .unwrap();
        assert_eq!(t.chain_tokens(), vec![7, 4]);
        assert_eq!(t.explicit_response(), vec![7, 4, vocab::MARK, 4, vocab::EOS]);
    }

    #[test]
    fn subtraction_wraps() {
        assert_eq!(Operator::Sub.apply(2, 7, 10), 5);
    }

    #[test]
    fn difficulty_zero_rejected() {
        assert!(generate_task(3, 0).is_err());
    }

    #[test]
    fn deterministic_generation() {
        assert_eq!(generate_task(42, 3).unwrap(), generate_task(42, 3).unwrap());
    }

    #[test]
    fn verify_rules() {
        let t = TaskInstance::from_expression(1, vec![7, 5], vec![Operator::Add], 10).unwrap();
        assert_eq!(verify(&[2], &t), 1.0);
        assert_eq!(verify(&[2, vocab::EOS], &t), 1.0);
        assert_eq!(verify(&[2, 2], &t), 0.0);
        assert_eq!(verify(&[], &t), 0.0);
        assert_eq!(verify(&[3], &t), 0.0);
    }

    #[test]
    fn answer_extraction() {
        assert_eq!(extract_answer(&[7, 4, vocab::MARK, 4, vocab::EOS]), &[4]);
        assert_eq!(extract_answer(&[vocab::MARK, 3, vocab::EOS, 5]), &[3]);
        assert_eq!(extract_answer(&[5, vocab::EOS]), &[5]);
    }

    #[test]
    fn single_example_corpus() {
        let c = make_warmup_corpus(1, (1, 1), 9).unwrap();
        assert_eq!(c.len(), 1);
        assert!(make_warmup_corpus(0, (1, 1), 9).is_err());
    }

    #[test]
    fn corpus_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let tasks = task_set(Split::Eval, 5, (1, 3), 4).unwrap();
        write_corpus(&p, &tasks).unwrap();
        assert_eq!(read_corpus(&p).unwrap(), tasks);
    }
}
