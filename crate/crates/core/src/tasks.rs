//! Synthetic next-token tasks and the line-delimited dataset format.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::seeded_rng;

/// Reserved ids at the top of the vocabulary.
pub fn eos(vocab: usize) -> usize {
    vocab - 1
}

pub fn sep(vocab: usize) -> usize {
    vocab - 2
}

pub fn mark(vocab: usize) -> usize {
    vocab - 3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// `c SEP c EOS`
    Copy,
    /// `c SEP reverse(c) EOS`
    Reverse,
    /// `x_t = (x_{t-1} + x_{t-2}) mod M` from two random seeds
    Modsum,
    /// haystack with one `MARK v` pair; a final `MARK` must be followed by `v EOS`
    Needle,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Copy, TaskKind::Reverse, TaskKind::Modsum, TaskKind::Needle];
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Modsum => "modsum",
            TaskKind::Needle => "needle",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "modsum" => Ok(TaskKind::Modsum),
            "needle" => Ok(TaskKind::Needle),
            other => Err(Error::Config(format!("unknown task '{other}' (copy, reverse, modsum, needle)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Content length bounds (payload for copy/reverse, sequence for modsum, haystack for needle).
    pub min_len: usize,
    pub max_len: usize,
    pub vocab: usize,
    /// Modulus for modsum; ignored elsewhere.
    pub modulus: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec { kind: TaskKind::Copy, min_len: 3, max_len: 6, vocab: 16, modulus: 7, samples: 512, seed: 1 }
    }
}

impl TaskSpec {
    /// Longest model input this task can produce.
    pub fn max_input_len(&self) -> usize {
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => 2 * self.max_len + 1,
            TaskKind::Modsum => self.max_len - 1,
            TaskKind::Needle => self.max_len + 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab < 5 {
            return bad(format!("vocab {} leaves no content tokens after 3 reserved ids", self.vocab));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("length bounds {}..{} are empty", self.min_len, self.max_len));
        }
        if self.samples == 0 {
            return bad("sample count must be positive".into());
        }
        match self.kind {
            TaskKind::Modsum => {
                if self.modulus < 2 || self.modulus > self.vocab - 3 {
                    return bad(format!("modulus {} must lie in 2..={}", self.modulus, self.vocab - 3));
                }
                if self.min_len < 3 {
                    return bad("modsum needs sequences of at least 3 tokens".into());
                }
            }
            TaskKind::Needle if self.min_len < 2 => return bad("needle haystack needs at least 2 tokens".into()),
            _ => {}
        }
        Ok(())
    }
}

/// One training sequence. `gold[t]` is the supervised next token after `input[..=t]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<usize>,
    pub gold: Vec<Option<usize>>,
}

impl Example {
    /// Next-token example from a full sequence, supervising positions `from..`.
    fn from_sequence(seq: &[usize], from: usize) -> Self {
        let input = seq[..seq.len() - 1].to_vec();
        let gold = (0..input.len()).map(|t| (t >= from).then_some(seq[t + 1])).collect();
        Example { input, gold }
    }

    pub fn supervised(&self) -> usize {
        self.gold.iter().flatten().count()
    }
}

pub fn gen_dataset(task: &TaskSpec) -> Result<Vec<Example>> {
    task.validate()?;
    let mut rng = seeded_rng(task.seed);
    let content = task.vocab - 3;
    let v = task.vocab;
    let mut out = Vec::with_capacity(task.samples);
    for _ in 0..task.samples {
        let n = rng.random_range(task.min_len..=task.max_len);
        let ex = match task.kind {
            TaskKind::Copy | TaskKind::Reverse => {
                let c: Vec<usize> = (0..n).map(|_| rng.random_range(0..content)).collect();
                let mut seq = c.clone();
                seq.push(sep(v));
                if task.kind == TaskKind::Copy {
                    seq.extend(&c);
                } else {
                    seq.extend(c.iter().rev());
                }
                seq.push(eos(v));
                Example::from_sequence(&seq, n)
            }
            TaskKind::Modsum => {
                let m = task.modulus;
                let mut seq = vec![rng.random_range(0..m), rng.random_range(0..m)];
                while seq.len() < n {
                    let k = seq.len();
                    seq.push((seq[k - 1] + seq[k - 2]) % m);
                }
                Example::from_sequence(&seq, 1)
            }
            TaskKind::Needle => {
                let mut seq: Vec<usize> = (0..n).map(|_| rng.random_range(0..content)).collect();
                let at = rng.random_range(0..n);
                let needle = seq[at];
                seq.insert(at, mark(v));
                seq.push(mark(v));
                seq.push(needle);
                seq.push(eos(v));
                let from = seq.len() - 3;
                Example::from_sequence(&seq, from)
            }
        };
        out.push(ex);
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, data: &[Example]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for ex in data {
        serde_json::to_writer(&mut buf, ex).map_err(|e| Error::Parse(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if ex.input.len() != ex.gold.len() {
            return Err(Error::Parse(format!(
                "{}:{}: input has {} tokens but gold has {}",
                path.display(),
                i + 1,
                ex.input.len(),
                ex.gold.len()
            )));
        }
        out.push(ex);
    }
    Ok(out)
}
