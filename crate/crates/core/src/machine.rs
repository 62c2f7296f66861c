//! BSP accelerator parameters.
//!
//! A machine is described by the pack `(p, r, g, l, e, L, E)`: core count,
//! compute rate in FLOP/s, inter-core inverse bandwidth and barrier latency
//! (both in FLOP units), inverse bandwidth to external memory (FLOP per word),
//! scratchpad size per core and external pool size (both in words).

use std::fmt;

use thiserror::Error;

/// Names accepted by [`MachineParams::from_preset`].
pub const PRESETS: &[&str] = &["epiphany3", "uniform_unit"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MachineError {
    #[error("unknown machine preset `{0}` (known: {})", PRESETS.join(", "))]
    UnknownPreset(String),
    #[error("missing parameter {0}")]
    MissingKey(&'static str),
    #[error("unknown parameter `{0}`")]
    UnknownKey(String),
    #[error("parameter {key} given more than once")]
    DuplicateKey { key: String },
    #[error("parameter {key}: `{value}` is not a valid number")]
    NotNumeric { key: String, value: String },
    #[error("malformed entry `{0}`, expected `key = value`")]
    Malformed(String),
    #[error("{0}")]
    Invalid(String),
}

/// The accelerator parameter pack. All sizes are in words.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MachineParams {
    /// Number of cores.
    pub p: usize,
    /// Compute rate, FLOP per second.
    pub r: f64,
    /// Inverse inter-core bandwidth, FLOP per word.
    pub g: f64,
    /// Barrier latency, FLOP.
    pub l: f64,
    /// Inverse bandwidth to external memory, FLOP per word.
    pub e: f64,
    /// Scratchpad capacity per core, words.
    pub local_words: usize,
    /// External memory capacity, words.
    pub external_words: usize,
    /// Bytes per data word.
    pub word_bytes: usize,
}

const CONFIG_KEYS: [&str; 8] = ["p", "r", "g", "l", "e", "L", "E", "word_bytes"];

impl MachineParams {
    /// The 16-core Epiphany-III as a BSP accelerator.
    ///
    /// 600 MHz at one FLOP per five cycles gives `r`; `L` is 32 kB of SRAM in
    /// 4-byte words; `E` is a 32 MB shared DRAM segment.
    pub fn epiphany3() -> Self {
        MachineParams {
            p: 16,
            r: 120e6,
            g: 5.59,
            l: 136.0,
            e: 43.4,
            local_words: 8192,
            external_words: 8_388_608,
            word_bytes: 4,
        }
    }

    /// Unit-cost test machine.
    pub fn uniform_unit() -> Self {
        MachineParams {
            p: 4,
            r: 1.0,
            g: 1.0,
            l: 0.0,
            e: 1.0,
            local_words: 1024,
            external_words: 65536,
            word_bytes: 4,
        }
    }

    pub fn from_preset(name: &str) -> Result<Self, MachineError> {
        match name {
            "epiphany3" => Ok(Self::epiphany3()),
            "uniform_unit" => Ok(Self::uniform_unit()),
            other => Err(MachineError::UnknownPreset(other.to_string())),
        }
    }

    /// Parses a flat `key = value` document.
    ///
    /// Entries may sit one per line or several per line separated by
    /// whitespace (`p=2 r=1 ...`). `#` starts a comment that runs to the end
    /// of the line. Keys are case-sensitive (`l` is latency, `L` is local
    /// memory).
    pub fn from_config(text: &str) -> Result<Self, MachineError> {
        let mut values: [Option<String>; 8] = Default::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("");
            for (key, value) in config_entries(line)? {
                let idx = CONFIG_KEYS
                    .iter()
                    .position(|k| *k == key)
                    .ok_or_else(|| MachineError::UnknownKey(key.clone()))?;
                if values[idx].is_some() {
                    return Err(MachineError::DuplicateKey { key });
                }
                values[idx] = Some(value);
            }
        }

        fn take(values: &[Option<String>; 8], idx: usize) -> Result<&str, MachineError> {
            values[idx]
                .as_deref()
                .ok_or(MachineError::MissingKey(CONFIG_KEYS[idx]))
        }
        fn real(key: &str, raw: &str) -> Result<f64, MachineError> {
            raw.parse::<f64>().map_err(|_| MachineError::NotNumeric {
                key: key.to_string(),
                value: raw.to_string(),
            })
        }
        fn count(key: &str, raw: &str) -> Result<usize, MachineError> {
            raw.parse::<usize>().map_err(|_| MachineError::NotNumeric {
                key: key.to_string(),
                value: raw.to_string(),
            })
        }

        // Report the first missing key in canonical order before parsing.
        for idx in 0..7 {
            take(&values, idx)?;
        }
        let word_bytes = match values[7].as_deref() {
            Some(raw) => count("word_bytes", raw)?,
            None => 4,
        };
        let m = MachineParams {
            p: count("p", take(&values, 0)?)?,
            r: real("r", take(&values, 1)?)?,
            g: real("g", take(&values, 2)?)?,
            l: real("l", take(&values, 3)?)?,
            e: real("e", take(&values, 4)?)?,
            local_words: count("L", take(&values, 5)?)?,
            external_words: count("E", take(&values, 6)?)?,
            word_bytes,
        };
        m.validate()?;
        Ok(m)
    }

    /// Serializes to the format read by [`MachineParams::from_config`].
    /// Floats use shortest round-trip formatting so re-parsing is lossless.
    pub fn to_config(&self) -> String {
        format!(
            "p = {}\nr = {:?}\ng = {:?}\nl = {:?}\ne = {:?}\nL = {}\nE = {}\nword_bytes = {}\n",
            self.p,
            self.r,
            self.g,
            self.l,
            self.e,
            self.local_words,
            self.external_words,
            self.word_bytes
        )
    }

    pub fn validate(&self) -> Result<(), MachineError> {
        let invalid = |msg: &str| Err(MachineError::Invalid(msg.to_string()));
        if self.p < 1 {
            return invalid("p must be ≥ 1");
        }
        if self.local_words < 1 {
            return invalid("L must be ≥ 1");
        }
        if self.external_words < self.local_words {
            return invalid("E must be ≥ L");
        }
        if self.word_bytes < 1 {
            return invalid("word_bytes must be ≥ 1");
        }
        if !(self.r.is_finite() && self.r > 0.0) {
            return invalid("r must be finite and > 0");
        }
        for (name, v) in [("g", self.g), ("l", self.l), ("e", self.e)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(MachineError::Invalid(format!(
                    "{name} must be finite and ≥ 0"
                )));
            }
        }
        Ok(())
    }

    /// Same machine with a different core count.
    pub fn with_cores(mut self, p: usize) -> Self {
        self.p = p;
        self
    }

    pub fn flops_to_seconds(&self, cost: f64) -> f64 {
        cost / self.r
    }

    /// External-memory bandwidth implied by `e`, in MB/s (10^6 bytes).
    pub fn external_bandwidth_mb_s(&self) -> f64 {
        self.r / self.e * self.word_bytes as f64 / 1e6
    }

    /// Inter-core bandwidth implied by `g`, in MB/s.
    pub fn intercore_bandwidth_mb_s(&self) -> f64 {
        self.r / self.g * self.word_bytes as f64 / 1e6
    }

    pub fn latency_us(&self) -> f64 {
        self.flops_to_seconds(self.l) * 1e6
    }
}

/// Splits one comment-free line into `(key, value)` pairs, tolerating
/// whitespace on either side of `=`.
fn config_entries(line: &str) -> Result<Vec<(String, String)>, MachineError> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let tok = tokens[i];
        let (key, value, used) = match tok.split_once('=') {
            Some((k, v)) if !k.is_empty() && !v.is_empty() => (k, v.to_string(), 1),
            Some((k, "")) if !k.is_empty() => match tokens.get(i + 1) {
                Some(v) if !v.contains('=') => (k, v.to_string(), 2),
                _ => return Err(MachineError::Malformed(tok.to_string())),
            },
            Some(_) => return Err(MachineError::Malformed(tok.to_string())),
            None => match (tokens.get(i + 1), tokens.get(i + 2)) {
                (Some(&"="), Some(v)) => (tok, v.to_string(), 3),
                (Some(eq_v), _) if eq_v.starts_with('=') && eq_v.len() > 1 => {
                    (tok, eq_v[1..].to_string(), 2)
                }
                _ => return Err(MachineError::Malformed(tok.to_string())),
            },
        };
        out.push((key.to_string(), value));
        i += used;
    }
    Ok(out)
}

impl fmt::Display for MachineParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "p={} r={} g={} l={} e={} L={} E={} word_bytes={}",
            self.p,
            self.r,
            self.g,
            self.l,
            self.e,
            self.local_words,
            self.external_words,
            self.word_bytes
        )
    }
}
