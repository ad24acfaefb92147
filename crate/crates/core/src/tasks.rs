//! Synthetic verifiable reasoning tasks: modular-arithmetic chains.
//!
//! A problem is a start value and a list of single-digit operations, all
//! mod 100. The model must emit the worked chain step by step and the final
//! answer inside `[` `]` markers:
//!
//! ```text
//! prompt:      57+8-3*4;
//! completion:  57+8=65;65-3=62;62*4=48;[48]
//! ```
//!
//! Difficulty is the number of operations. Values are always rendered as two
//! zero-padded digits, so every chain has an identical local structure and
//! the only genuinely uncertain tokens are result digits.
//!
//! ## Corpus noise
//!
//! The pretraining corpus mixes gold chains with corrupted ones. Corruption
//! is *systematic*, not uniform: a fixed subset of arithmetic contexts —
//! keyed by `(op, operand, units digit of the current value)`, chosen by a
//! seed-independent hash — is "fragile". A corrupted chain writes a
//! deterministic wrong result at each fragile step (then continues
//! consistently from the wrong value, so exactly the `=` transitions lie).
//! Corrupted chains are drawn preferentially from chains that visit fragile
//! contexts, so within a fragile context the wrong continuation holds the
//! majority of the corpus mass while the correct one keeps a solid minority.
//!
//! A base model trained on this stream behaves like a capable-but-flawed
//! reasoner: confidently correct at most positions, genuinely split at a
//! sparse set of high-entropy decision points where its argmax is wrong but
//! the right token is close behind. That is precisely the regime the rest of
//! the pipeline studies.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

// ── tokenizer ────────────────────────────────────────────────────────────

/// Fixed vocabulary size. The task alphabet is small; the rest of the table
/// is filler symbols so the softmax operates over a realistic width.
pub const VOCAB_SIZE: usize = 64;

pub const BOS: u16 = 0;
pub const EOS: u16 = 1;

/// id -> byte table. Ids 0 and 1 render as '^' and '$' for debugging only
/// and never appear inside chain text.
const ID_TO_CHAR: [u8; VOCAB_SIZE] = {
    let mut t = [b'_'; VOCAB_SIZE];
    t[0] = b'^';
    t[1] = b'$';
    let mut i = 0;
    while i < 10 {
        t[2 + i] = b'0' + i as u8;
        i += 1;
    }
    t[12] = b'+';
    t[13] = b'-';
    t[14] = b'*';
    t[15] = b'=';
    t[16] = b';';
    t[17] = b'[';
    t[18] = b']';
    // Filler: lowercase a..z, then uppercase A..R, then '_' at 63.
    let mut j = 0;
    while j < 26 {
        t[19 + j] = b'a' + j as u8;
        j += 1;
    }
    let mut k = 0;
    while k < 18 {
        t[45 + k] = b'A' + k as u8;
        k += 1;
    }
    t
};

/// Encode one byte of chain text.
pub fn encode_char(b: u8) -> Result<u16> {
    // Linear scan is fine: the alphabet is tiny and encoding is not hot.
    ID_TO_CHAR
        .iter()
        .position(|&c| c == b)
        .map(|i| i as u16)
        .filter(|&i| i != 63 || b == b'_')
        .ok_or(Error::UnknownSymbol { byte: b })
}

pub fn decode_char(id: u16) -> u8 {
    ID_TO_CHAR[id as usize % VOCAB_SIZE]
}

pub fn encode_text(text: &str) -> Result<Vec<u16>> {
    text.bytes().map(encode_char).collect()
}

pub fn decode_tokens(tokens: &[u16]) -> String {
    tokens
        .iter()
        .filter(|&&t| t != BOS && t != EOS)
        .map(|&t| decode_char(t) as char)
        .collect()
}

// ── problems ─────────────────────────────────────────────────────────────

pub const MODULUS: i64 = 100;
/// Longest chain the generator accepts; keeps every sequence well inside
/// the model's context window.
pub const MAX_DIFFICULTY: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
}

impl OpKind {
    pub fn apply(self, cur: i64, operand: i64) -> i64 {
        let raw = match self {
            OpKind::Add => cur + operand,
            OpKind::Sub => cur - operand,
            OpKind::Mul => cur * operand,
        };
        raw.rem_euclid(MODULUS)
    }

    pub fn ch(self) -> char {
        match self {
            OpKind::Add => '+',
            OpKind::Sub => '-',
            OpKind::Mul => '*',
        }
    }

    fn index(self) -> u64 {
        match self {
            OpKind::Add => 0,
            OpKind::Sub => 1,
            OpKind::Mul => 2,
        }
    }
}

/// One verifiable task instance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Problem {
    pub id: u64,
    /// E.g. `57+8-3*4;` — start value, operations, closing `;`.
    pub prompt: String,
    /// Canonical final answer, two zero-padded digits.
    pub answer: String,
    /// Number of operations in the chain.
    pub difficulty: u32,
    #[serde(skip)]
    pub spec: Option<ChainSpec>,
}

/// The underlying start value and operation list of a problem. Present on
/// generated problems; parsed back from the prompt when loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec {
    pub start: i64,
    pub ops: Vec<(OpKind, i64)>,
}

impl ChainSpec {
    /// Gold intermediate values, one per step.
    pub fn values(&self) -> Vec<i64> {
        let mut cur = self.start;
        self.ops
            .iter()
            .map(|&(op, operand)| {
                cur = op.apply(cur, operand);
                cur
            })
            .collect()
    }

    pub fn answer(&self) -> i64 {
        self.values().last().copied().unwrap_or(self.start)
    }

    pub fn prompt_text(&self) -> String {
        let mut out = format!("{:02}", self.start);
        for &(op, operand) in &self.ops {
            out.push(op.ch());
            out.push_str(&operand.to_string());
        }
        out.push(';');
        out
    }

    /// Gold completion: every worked step, then the bracketed answer.
    pub fn completion_text(&self) -> String {
        let mut out = String::new();
        let mut cur = self.start;
        for &(op, operand) in &self.ops {
            let next = op.apply(cur, operand);
            out.push_str(&format!("{:02}{}{}={:02};", cur, op.ch(), operand, next));
            cur = next;
        }
        out.push_str(&format!("[{:02}]", cur));
        out
    }

    /// Parse a prompt like `57+8-3*4;` back into a spec.
    pub fn parse_prompt(prompt: &str) -> Result<ChainSpec> {
        let body = prompt.strip_suffix(';').ok_or_else(|| {
            Error::InvalidConfig(format!("prompt `{prompt}` does not end with ';'"))
        })?;
        let bytes = body.as_bytes();
        if bytes.len() < 2 || !bytes[0].is_ascii_digit() || !bytes[1].is_ascii_digit() {
            return Err(Error::InvalidConfig(format!("prompt `{prompt}` lacks a two-digit start value")));
        }
        let start = ((bytes[0] - b'0') as i64) * 10 + (bytes[1] - b'0') as i64;
        let mut ops = Vec::new();
        let mut i = 2;
        while i < bytes.len() {
            let op = match bytes[i] {
                b'+' => OpKind::Add,
                b'-' => OpKind::Sub,
                b'*' => OpKind::Mul,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "prompt `{prompt}` has unexpected operator byte {:#04x}",
                        other
                    )))
                }
            };
            i += 1;
            if i >= bytes.len() || !bytes[i].is_ascii_digit() {
                return Err(Error::InvalidConfig(format!("prompt `{prompt}` truncated after operator")));
            }
            let operand = (bytes[i] - b'0') as i64;
            i += 1;
            ops.push((op, operand));
        }
        if ops.is_empty() {
            return Err(Error::InvalidConfig(format!("prompt `{prompt}` has no operations")));
        }
        Ok(ChainSpec { start, ops })
    }
}

impl Problem {
    /// The chain spec, parsing the prompt if it was not carried in memory.
    pub fn chain(&self) -> Result<ChainSpec> {
        match &self.spec {
            Some(s) => Ok(s.clone()),
            None => ChainSpec::parse_prompt(&self.prompt),
        }
    }

    /// Prompt as token ids, including the leading BOS.
    pub fn prompt_tokens(&self) -> Result<Vec<u16>> {
        let mut t = vec![BOS];
        t.extend(encode_text(&self.prompt)?);
        Ok(t)
    }
}

// ── difficulty distributions ─────────────────────────────────────────────

/// Weighted mix of chain lengths, e.g. `[(2, 1.0), (3, 1.0), (4, 2.0)]`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DifficultyDistribution(pub Vec<(u32, f64)>);

impl DifficultyDistribution {
    pub fn uniform(range: std::ops::RangeInclusive<u32>) -> Self {
        DifficultyDistribution(range.map(|d| (d, 1.0)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidConfig("empty difficulty distribution".into()));
        }
        for &(d, w) in &self.0 {
            if d == 0 {
                return Err(Error::InvalidConfig("difficulty 0 is not a task".into()));
            }
            if d > MAX_DIFFICULTY {
                return Err(Error::InvalidConfig(format!(
                    "difficulty {d} exceeds maximum {MAX_DIFFICULTY}"
                )));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidConfig(format!("non-positive weight {w} for difficulty {d}")));
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> u32 {
        let total: f64 = self.0.iter().map(|&(_, w)| w).sum();
        let mut x = rng.gen_range(0.0..total);
        for &(d, w) in &self.0 {
            if x < w {
                return d;
            }
            x -= w;
        }
        self.0.last().unwrap().0
    }

    pub fn levels(&self) -> Vec<u32> {
        self.0.iter().map(|&(d, _)| d).collect()
    }
}

fn sample_spec(rng: &mut impl Rng, difficulty: u32) -> ChainSpec {
    let start = rng.gen_range(0..MODULUS);
    let ops = (0..difficulty)
        .map(|_| {
            let op = match rng.gen_range(0..3u32) {
                0 => OpKind::Add,
                1 => OpKind::Sub,
                _ => OpKind::Mul,
            };
            (op, rng.gen_range(2..=9i64))
        })
        .collect();
    ChainSpec { start, ops }
}

/// Generate `count` problems. Deterministic in `seed`; each problem draws
/// from its own RNG stream, so the set is stable under any processing order.
pub fn gen_problems(seed: u64, count: usize, dist: &DifficultyDistribution) -> Result<Vec<Problem>> {
    let splits = gen_problem_splits(seed, &[("problems", count, dist.clone())])?;
    Ok(splits.into_iter().next().unwrap())
}

/// Generate several named splits at once, guaranteeing that no prompt text
/// repeats anywhere across the splits. Ids are unique across the whole call.
pub fn gen_problem_splits(
    seed: u64,
    specs: &[(&str, usize, DifficultyDistribution)],
) -> Result<Vec<Vec<Problem>>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    let mut id = 0u64;
    for &(name, count, ref dist) in specs {
        dist.validate()?;
        let mut split = Vec::with_capacity(count);
        for i in 0..count {
            // Rejection-sample until this problem's prompt is globally fresh.
            let mut attempt = 0u64;
            let problem = loop {
                let mut r = rng::stream(seed, "problem", &[name.len() as u64, id, i as u64, attempt]);
                let difficulty = dist.sample(&mut r);
                let spec = sample_spec(&mut r, difficulty);
                let prompt = spec.prompt_text();
                if seen.insert(prompt.clone()) {
                    break Problem {
                        id,
                        answer: format!("{:02}", spec.answer()),
                        prompt,
                        difficulty,
                        spec: Some(spec),
                    };
                }
                attempt += 1;
                if attempt > 10_000 {
                    return Err(Error::InvalidConfig(format!(
                        "cannot draw {count} distinct problems for split `{name}`; task space too constrained"
                    )));
                }
            };
            split.push(problem);
            id += 1;
        }
        out.push(split);
    }
    Ok(out)
}

// ── verification ─────────────────────────────────────────────────────────

/// Extract the text between the first `[` and the following `]`.
pub fn extract_answer(completion: &str) -> Option<&str> {
    let open = completion.find('[')?;
    let rest = &completion[open + 1..];
    let close = rest.find(']')?;
    Some(rest[..close].trim())
}

/// Binary reward: does the completion's bracketed answer match exactly?
/// A missing or malformed marker scores zero.
pub fn verify(completion: &str, problem: &Problem) -> bool {
    extract_answer(completion) == Some(problem.answer.as_str())
}

/// [`verify`] over token ids (decodes, then checks the marker).
pub fn verify_tokens(tokens: &[u16], problem: &Problem) -> bool {
    verify(&decode_tokens(tokens), problem)
}

// ── systematic corpus noise ──────────────────────────────────────────────

// World-level constants: which contexts are fragile is a property of the
// task family, independent of any run seed, so every corpus, problem set,
// and trained model agrees on where the weak spots are.
const FRAGILE_SALT: u64 = 0x6d6f_6431_3030; // "mod100"
const DELTA_SALT: u64 = 0x7772_6f6e_67; // "wrong"

fn class_key(op: OpKind, operand: i64, cur: i64) -> u64 {
    op.index() * 1000 + (operand as u64) * 10 + (cur.rem_euclid(10) as u64)
}

/// Is `(op, operand, units digit)` one of the contexts the corpus lies about?
fn is_fragile(op: OpKind, operand: i64, cur: i64, permille: u32) -> bool {
    rng::mix64(class_key(op, operand, cur) ^ FRAGILE_SALT) % 1000 < permille as u64
}

/// The deterministic wrong result taught at a fragile context.
fn wrong_value(op: OpKind, operand: i64, cur: i64) -> i64 {
    let correct = op.apply(cur, operand);
    let delta = 1 + (rng::mix64(class_key(op, operand, cur) ^ DELTA_SALT) % 99) as i64;
    (correct + delta).rem_euclid(MODULUS)
}

/// Pretraining corpus parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Number of chains in the stream.
    pub chains: usize,
    /// Fraction of chains rendered with corrupted arithmetic, in [0, 0.5].
    pub noise_rate: f64,
    pub difficulty: DifficultyDistribution,
    /// Per-mille of arithmetic context classes that are fragile.
    pub fragile_permille: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 42,
            chains: 30_000,
            noise_rate: 0.35,
            difficulty: DifficultyDistribution::uniform(1..=8),
            fragile_permille: 110,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.noise_rate) {
            return Err(Error::InvalidConfig(format!(
                "noise_rate {} outside [0, 0.5]",
                self.noise_rate
            )));
        }
        if self.fragile_permille > 1000 {
            return Err(Error::InvalidConfig("fragile_permille above 1000".into()));
        }
        self.difficulty.validate()
    }
}

/// Render one chain, corrupting every fragile step if `corrupt` is set.
/// `fallback_step` is used only when `corrupt` is set and the chain visits
/// no fragile context at all (so it still fails verification somewhere).
/// Returns the full token sequence `BOS prompt completion EOS`.
fn render_chain_tokens(
    spec: &ChainSpec,
    corrupt: bool,
    use_fallback: bool,
    permille: u32,
    fallback_step: usize,
) -> Vec<u16> {
    let mut text = spec.prompt_text();
    let mut cur = spec.start;
    for (si, &(op, operand)) in spec.ops.iter().enumerate() {
        let honest = op.apply(cur, operand);
        let next = if corrupt && is_fragile(op, operand, cur, permille) {
            wrong_value(op, operand, cur)
        } else if corrupt && use_fallback && si == fallback_step {
            wrong_value(op, operand, cur)
        } else {
            honest
        };
        text.push_str(&format!("{:02}{}{}={:02};", cur, op.ch(), operand, next));
        cur = next;
    }
    text.push_str(&format!("[{:02}]", cur));
    let mut tokens = vec![BOS];
    tokens.extend(encode_text(&text).expect("chain text is always in-alphabet"));
    tokens.push(EOS);
    tokens
}

/// Generate the pretraining token stream: `chains` rendered chains, each
/// `BOS ... EOS`, concatenated. Exactly `round(noise_rate * chains)` of them
/// carry corrupted arithmetic and therefore fail verification. Corrupted
/// chains are drawn preferentially from chains visiting fragile contexts.
/// Deterministic in the config.
pub fn gen_pretrain_corpus(cfg: &CorpusConfig) -> Result<Vec<u16>> {
    cfg.validate()?;
    // Draw all chain specs first.
    let mut specs = Vec::with_capacity(cfg.chains);
    for i in 0..cfg.chains {
        let mut r = rng::stream(cfg.seed, "corpus-chain", &[i as u64]);
        let difficulty = cfg.difficulty.sample(&mut r);
        specs.push(sample_spec(&mut r, difficulty));
    }

    // Partition by whether the gold path visits a fragile context.
    let visits_fragile = |spec: &ChainSpec| -> bool {
        let mut cur = spec.start;
        spec.ops.iter().any(|&(op, operand)| {
            let hit = is_fragile(op, operand, cur, cfg.fragile_permille);
            cur = op.apply(cur, operand);
            hit
        })
    };
    let visits: Vec<bool> = specs.iter().map(visits_fragile).collect();
    let mut fragile_ix: Vec<usize> = (0..specs.len()).filter(|&i| visits[i]).collect();
    let mut clean_ix: Vec<usize> = (0..specs.len()).filter(|&i| !visits[i]).collect();
    let mut order_rng = rng::stream(cfg.seed, "corpus-corrupt-order", &[]);
    fragile_ix.shuffle(&mut order_rng);
    clean_ix.shuffle(&mut order_rng);

    let n_corrupt = (cfg.noise_rate * cfg.chains as f64).round() as usize;
    let mut corrupt = vec![false; specs.len()];
    for &i in fragile_ix.iter().chain(clean_ix.iter()).take(n_corrupt) {
        corrupt[i] = true;
    }

    let mut stream = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let mut r = rng::stream(cfg.seed, "corpus-fallback", &[i as u64]);
        let fallback_step = r.gen_range(0..spec.ops.len().max(1));
        stream.extend(render_chain_tokens(
            spec,
            corrupt[i],
            !visits[i],
            cfg.fragile_permille,
            fallback_step,
        ));
    }
    Ok(stream)
}

/// Split a corpus stream back into chains (each `BOS ... EOS`).
pub fn corpus_chains(stream: &[u16]) -> Vec<&[u16]> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &t) in stream.iter().enumerate() {
        if t == EOS {
            out.push(&stream[start..=i]);
            start = i + 1;
        }
    }
    out
}

// ── artifact files ───────────────────────────────────────────────────────

pub const PROBLEMS_FORMAT: &str = "problems";
pub const PROBLEMS_VERSION: u32 = 1;

/// First line of a problems file: format tag, version, free-form metadata.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProblemsHeader {
    pub format: String,
    pub version: u32,
    pub meta: serde_json::Value,
}

/// Write a problem split as JSONL: one header line, then one problem per
/// line. The chain spec is not stored; [`Problem::chain`] re-parses it from
/// the prompt on load.
pub fn save_problems(path: &Path, meta: serde_json::Value, problems: &[Problem]) -> Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let header = ProblemsHeader { format: PROBLEMS_FORMAT.into(), version: PROBLEMS_VERSION, meta };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &header)?;
    f.write_all(b"\n")?;
    for p in problems {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_problems(path: &Path, produced_by: &str) -> Result<(ProblemsHeader, Vec<Problem>)> {
    use std::io::BufRead;
    let f = crate::checkpoint::open_artifact(path, produced_by)?;
    let mut lines = std::io::BufReader::new(f).lines();
    let bad = |detail: String| Error::MalformedArtifact {
        path: path.display().to_string(),
        detail,
    };
    let head_line = lines.next().ok_or_else(|| bad("empty problems file".into()))??;
    let header: ProblemsHeader =
        serde_json::from_str(&head_line).map_err(|e| bad(format!("unreadable header line: {e}")))?;
    if header.format != PROBLEMS_FORMAT {
        return Err(bad(format!("format `{}` is not a problems file", header.format)));
    }
    if header.version != PROBLEMS_VERSION {
        return Err(Error::FormatVersion {
            path: path.display().to_string(),
            found: header.version,
            expected: PROBLEMS_VERSION,
        });
    }
    let mut problems = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let p: Problem = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        // Fail loudly now rather than deep inside a later stage.
        p.chain().map_err(|e| bad(format!("problem {}: {e}", p.id)))?;
        problems.push(p);
    }
    Ok((header, problems))
}

pub const CORPUS_MAGIC: &[u8; 4] = b"RLCP";
pub const CORPUS_VERSION: u32 = 1;

/// Write a token stream as a little-endian binary file:
/// magic, version, token count, then each token as a `u16`.
pub fn save_corpus(path: &Path, stream: &[u16]) -> Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CORPUS_MAGIC)?;
    f.write_all(&CORPUS_VERSION.to_le_bytes())?;
    f.write_all(&(stream.len() as u64).to_le_bytes())?;
    for &t in stream {
        f.write_all(&t.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path, produced_by: &str) -> Result<Vec<u16>> {
    use std::io::Read;
    let mut f = crate::checkpoint::open_artifact(path, produced_by)?;
    let bad = |detail: &str| Error::MalformedArtifact {
        path: path.display().to_string(),
        detail: detail.into(),
    };
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|_| bad("file too short for magic"))?;
    if &magic != CORPUS_MAGIC {
        return Err(bad("not a corpus file (bad magic)"));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word).map_err(|_| bad("file too short for version"))?;
    let version = u32::from_le_bytes(word);
    if version != CORPUS_VERSION {
        return Err(Error::FormatVersion {
            path: path.display().to_string(),
            found: version,
            expected: CORPUS_VERSION,
        });
    }
    let mut len_word = [0u8; 8];
    f.read_exact(&mut len_word).map_err(|_| bad("file too short for length"))?;
    let len = u64::from_le_bytes(len_word) as usize;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() != len * 2 {
        return Err(bad("token payload does not match declared length"));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

// ── tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alphabet_is_sixty_four_distinct_symbols() {
        let mut seen = std::collections::HashSet::new();
        for id in 0..VOCAB_SIZE as u16 {
            seen.insert(decode_char(id));
        }
        assert_eq!(seen.len(), VOCAB_SIZE);
    }

    #[test]
    fn text_round_trips_through_tokens() {
        let text = "57+8-3*4;57+8=65;[48]";
        let tokens = encode_text(text).unwrap();
        assert_eq!(decode_tokens(&tokens), text);
    }

    #[test]
    fn unknown_byte_is_an_error() {
        assert!(matches!(encode_char(b'?'), Err(Error::UnknownSymbol { byte: b'?' })));
    }

    #[test]
    fn answers_match_independent_evaluator() {
        // Brute-force oracle: fold the ops over i64, reducing mod 100 at
        // the end of each step exactly as the task defines.
        let dist = DifficultyDistribution::uniform(1..=8);
        let problems = gen_problems(7, 50, &dist).unwrap();
        for p in &problems {
            let spec = p.chain().unwrap();
            let mut cur = spec.start;
            for &(op, operand) in &spec.ops {
                cur = match op {
                    OpKind::Add => (cur + operand).rem_euclid(100),
                    OpKind::Sub => (cur - operand).rem_euclid(100),
                    OpKind::Mul => (cur * operand).rem_euclid(100),
                };
            }
            assert_eq!(p.answer, format!("{:02}", cur), "problem {}", p.prompt);
        }
    }

    #[test]
    fn gold_completion_verifies_and_corrupt_does_not() {
        let p = &gen_problems(3, 5, &DifficultyDistribution::uniform(2..=4)).unwrap()[2];
        let spec = p.chain().unwrap();
        let gold = spec.completion_text();
        assert!(verify(&gold, p));
        // Perturb the final answer.
        let bad = gold.replace(&format!("[{}]", p.answer), "[99]");
        if bad != gold {
            assert!(!verify(&bad, p));
        }
        assert!(!verify("no marker here", p));
        assert!(verify(&format!("[ {} ]", p.answer), p), "whitespace inside the marker is trimmed");
    }

    #[test]
    fn difficulty_zero_is_rejected() {
        let dist = DifficultyDistribution(vec![(0, 1.0)]);
        assert!(gen_problems(1, 1, &dist).is_err());
    }

    #[test]
    fn problems_are_deterministic_and_unique() {
        let dist = DifficultyDistribution::uniform(2..=6);
        let a = gen_problems(11, 200, &dist).unwrap();
        let b = gen_problems(11, 200, &dist).unwrap();
        assert_eq!(a, b);
        let prompts: std::collections::HashSet<_> = a.iter().map(|p| p.prompt.clone()).collect();
        assert_eq!(prompts.len(), a.len(), "every prompt distinct");
        let ids: std::collections::HashSet<_> = a.iter().map(|p| p.id).collect();
        assert_eq!(ids.len(), a.len());
    }

    #[test]
    fn splits_share_no_prompts_and_no_ids() {
        let dist = DifficultyDistribution::uniform(2..=4);
        let splits = gen_problem_splits(
            5,
            &[("train", 150, dist.clone()), ("val", 50, dist.clone()), ("eval", 100, dist)],
        )
        .unwrap();
        let mut prompts = std::collections::HashSet::new();
        let mut ids = std::collections::HashSet::new();
        for split in &splits {
            for p in split {
                assert!(prompts.insert(p.prompt.clone()), "duplicate prompt {}", p.prompt);
                assert!(ids.insert(p.id));
            }
        }
        assert_eq!(splits[0].len(), 150);
        assert_eq!(splits[1].len(), 50);
        assert_eq!(splits[2].len(), 100);
    }

    #[test]
    fn prompt_parsing_round_trips() {
        let dist = DifficultyDistribution::uniform(1..=8);
        for p in gen_problems(13, 30, &dist).unwrap() {
            let reparsed = ChainSpec::parse_prompt(&p.prompt).unwrap();
            assert_eq!(Some(reparsed), p.spec);
        }
    }

    #[test]
    fn corpus_is_deterministic() {
        let cfg = CorpusConfig { chains: 500, ..CorpusConfig::default() };
        assert_eq!(gen_pretrain_corpus(&cfg).unwrap(), gen_pretrain_corpus(&cfg).unwrap());
    }

    #[test]
    fn corpus_noise_rate_controls_verification_failures() {
        let cfg = CorpusConfig {
            seed: 9,
            chains: 2_000,
            noise_rate: 0.3,
            difficulty: DifficultyDistribution::uniform(1..=8),
            fragile_permille: 110,
        };
        let stream = gen_pretrain_corpus(&cfg).unwrap();
        let chains = corpus_chains(&stream);
        assert_eq!(chains.len(), 2_000);
        let mut failures = 0usize;
        for chain in &chains {
            let text = decode_tokens(chain);
            let prompt_end = text.find(';').unwrap();
            let (prompt, completion) = text.split_at(prompt_end + 1);
            let spec = ChainSpec::parse_prompt(prompt).unwrap();
            let gold = format!("{:02}", spec.answer());
            let ok = extract_answer(completion) == Some(gold.as_str());
            if !ok {
                failures += 1;
            }
        }
        let frac = failures as f64 / chains.len() as f64;
        assert!((frac - 0.3).abs() <= 0.02, "corrupted fraction {frac} not within 30% ± 2%");
    }

    #[test]
    fn zero_noise_corpus_is_all_gold() {
        let cfg = CorpusConfig { chains: 300, noise_rate: 0.0, ..CorpusConfig::default() };
        let stream = gen_pretrain_corpus(&cfg).unwrap();
        for chain in corpus_chains(&stream) {
            let text = decode_tokens(chain);
            let prompt_end = text.find(';').unwrap();
            let (prompt, completion) = text.split_at(prompt_end + 1);
            let spec = ChainSpec::parse_prompt(prompt).unwrap();
            assert_eq!(extract_answer(completion), Some(format!("{:02}", spec.answer()).as_str()));
        }
    }

    #[test]
    fn empty_corpus_is_empty() {
        let cfg = CorpusConfig { chains: 0, ..CorpusConfig::default() };
        assert!(gen_pretrain_corpus(&cfg).unwrap().is_empty());
    }

    #[test]
    fn corrupted_chains_stay_locally_consistent() {
        // In a corrupted chain only `=` transitions lie; each step's left
        // operand must still equal the previous step's result, and the
        // bracketed answer must equal the last result.
        let cfg = CorpusConfig { chains: 400, noise_rate: 0.5, ..CorpusConfig::default() };
        let stream = gen_pretrain_corpus(&cfg).unwrap();
        for chain in corpus_chains(&stream) {
            let text = decode_tokens(chain);
            let prompt_end = text.find(';').unwrap();
            let completion = &text[prompt_end + 1..];
            let steps: Vec<&str> = completion.split(';').collect();
            let mut prev: Option<&str> = None;
            for step in &steps[..steps.len() - 1] {
                let (lhs, rhs) = step.split_at(step.find('=').unwrap());
                if let Some(p) = prev {
                    assert_eq!(&lhs[..2], p, "chain drifts in {text}");
                }
                prev = Some(&rhs[1..]);
            }
            let marker = steps.last().unwrap();
            assert_eq!(extract_answer(marker), prev.map(str::trim));
        }
    }

    #[test]
    fn fragile_classes_exist_at_default_rate() {
        let mut fragile = 0;
        let mut total = 0;
        for op in [OpKind::Add, OpKind::Sub, OpKind::Mul] {
            for operand in 2..=9 {
                for units in 0..10 {
                    total += 1;
                    if is_fragile(op, operand, units, 110) {
                        fragile += 1;
                    }
                }
            }
        }
        // 240 classes at 110 per mille: expect a couple dozen.
        assert!(fragile > 10 && fragile < 60, "{fragile}/{total} fragile classes");
        // And the wrong value never equals the right one.
        for op in [OpKind::Add, OpKind::Sub, OpKind::Mul] {
            for operand in 2..=9 {
                for cur in 0..100 {
                    assert_ne!(wrong_value(op, operand, cur), op.apply(cur, operand));
                }
            }
        }
    }

    #[test]
    fn problems_file_round_trips_and_reparses_specs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.jsonl");
        let problems =
            gen_problems(9, 12, &DifficultyDistribution::uniform(1..=3)).unwrap();
        save_problems(&path, serde_json::json!({"split": "split"}), &problems).unwrap();
        let (header, back) = load_problems(&path, "gen-tasks").unwrap();
        assert_eq!(header.meta["split"], "split");
        assert_eq!(back.len(), problems.len());
        for (a, b) in problems.iter().zip(&back) {
            assert_eq!((a.id, &a.prompt, &a.answer, a.difficulty), (b.id, &b.prompt, &b.answer, b.difficulty));
            // The spec is reconstructed from the prompt, not stored.
            assert_eq!(format!("{:02}", b.chain().unwrap().answer()), b.answer);
        }

        // Saving twice produces byte-identical files.
        let path2 = dir.path().join("again.jsonl");
        save_problems(&path2, serde_json::json!({"split": "split"}), &problems).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corpus_file_round_trips_and_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.bin");
        let cfg = CorpusConfig { chains: 40, ..CorpusConfig::default() };
        let stream = gen_pretrain_corpus(&cfg).unwrap();
        save_corpus(&path, &stream).unwrap();
        assert_eq!(load_corpus(&path, "gen-tasks").unwrap(), stream);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            load_corpus(&path, "gen-tasks"),
            Err(Error::MalformedArtifact { .. })
        ));

        let missing = dir.path().join("nope.bin");
        assert!(matches!(
            load_corpus(&missing, "gen-tasks"),
            Err(Error::MissingArtifact { produced_by, .. }) if produced_by == "gen-tasks"
        ));
    }
}
