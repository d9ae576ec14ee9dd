use std::fmt;
use std::str::FromStr;

use crate::config::KeyValues;
use crate::error::{invalid, Error, Result};

/// Output mapping from the last feature map to phase in `[-pi, 0]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Head {
    /// `-pi * clamp(1/2 + x/4, 0, 1)`; gradients that point back into the
    /// linear zone pass through the clamp.
    #[default]
    HardLogistic,
    /// `-pi * sigma(x)`.
    Logistic,
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::HardLogistic => "hard-logistic",
            Head::Logistic => "logistic",
        })
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "hard-logistic" => Ok(Head::HardLogistic),
            "logistic" | "sigmoid" => Ok(Head::Logistic),
            other => Err(invalid!("unknown head {other:?}; expected hard-logistic or logistic")),
        }
    }
}

/// Shape of the residual encoder-decoder.
///
/// Blocks run in the order down, up, tail. `dilations` applies to the last
/// `dilations.len()` blocks in that order; earlier blocks use dilation 1.
/// A skip pair `(level, block)` concatenates encoder level `level` (0 is the
/// stem, `l` the output of down block `l - 1`) onto the output of up block
/// `block`, followed by a 1x1 projection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_size: usize,
    pub down_blocks: usize,
    pub up_blocks: usize,
    pub tail_blocks: usize,
    pub base_channels: usize,
    pub channel_growth: usize,
    pub dilations: Vec<usize>,
    pub skip_pairs: Vec<(usize, usize)>,
    pub head: Head,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            input_size: 64,
            down_blocks: 3,
            up_blocks: 3,
            tail_blocks: 2,
            base_channels: 16,
            channel_growth: 2,
            dilations: vec![1, 2, 4],
            skip_pairs: vec![(2, 0), (1, 1), (0, 2)],
            head: Head::HardLogistic,
        }
    }
}

const KEYS: [&str; 9] = [
    "input_size",
    "down_blocks",
    "up_blocks",
    "tail_blocks",
    "base_channels",
    "channel_growth",
    "dilations",
    "skip_pairs",
    "head",
];

impl NetworkSpec {
    /// Seven down, six up and two tail blocks.
    pub fn paper_scale(input_size: usize, base_channels: usize) -> Self {
        Self {
            input_size,
            down_blocks: 7,
            up_blocks: 6,
            tail_blocks: 2,
            base_channels,
            channel_growth: 2,
            dilations: vec![1, 2, 4],
            skip_pairs: (0..6).map(|j| (6 - j, j)).collect(),
            head: Head::HardLogistic,
        }
    }

    pub fn block_count(&self) -> usize {
        self.down_blocks + self.up_blocks + self.tail_blocks
    }

    /// Dilation of block `index` in down, up, tail order.
    pub fn dilation_of(&self, index: usize) -> usize {
        let first = self.block_count().saturating_sub(self.dilations.len());
        if index >= first {
            self.dilations[index - first]
        } else {
            1
        }
    }

    /// Channels at encoder level `level`.
    pub fn channels_at(&self, level: usize) -> Result<usize> {
        u32::try_from(level)
            .ok()
            .and_then(|l| self.channel_growth.checked_pow(l))
            .and_then(|g| g.checked_mul(self.base_channels))
            .ok_or_else(|| invalid!("channel count overflows at encoder level {level}"))
    }

    /// Spatial extent at encoder level `level`.
    pub fn extent_at(&self, level: usize) -> usize {
        self.input_size >> level
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 {
            return Err(invalid!("input_size must be positive"));
        }
        if self.base_channels == 0 || self.channel_growth == 0 {
            return Err(invalid!("base_channels and channel_growth must be positive"));
        }
        if self.down_blocks >= usize::BITS as usize || self.input_size >> self.down_blocks == 0 {
            return Err(invalid!(
                "spatial extent vanishes: {} down blocks halve input_size {} below 1",
                self.down_blocks,
                self.input_size
            ));
        }
        if !self.input_size.is_multiple_of(1 << self.down_blocks) {
            return Err(invalid!(
                "input_size {} is not divisible by 2^{} so up blocks cannot restore it",
                self.input_size,
                self.down_blocks
            ));
        }
        if self.up_blocks > self.down_blocks {
            return Err(invalid!(
                "up_blocks ({}) exceeds down_blocks ({}): output would outgrow the input",
                self.up_blocks,
                self.down_blocks
            ));
        }
        if self.dilations.len() > self.block_count() {
            return Err(invalid!(
                "{} dilations given for {} blocks",
                self.dilations.len(),
                self.block_count()
            ));
        }
        if let Some(d) = self.dilations.iter().find(|&&d| d == 0) {
            return Err(invalid!("dilation must be at least 1, got {d}"));
        }
        self.channels_at(self.down_blocks)?;
        let mut seen = vec![false; self.up_blocks];
        for &(level, block) in &self.skip_pairs {
            if block >= self.up_blocks {
                return Err(invalid!("skip pair ({level}, {block}): there are only {} up blocks", self.up_blocks));
            }
            if level > self.down_blocks {
                return Err(invalid!("skip pair ({level}, {block}): there are only {} encoder levels", self.down_blocks + 1));
            }
            let out_level = self.down_blocks - block - 1;
            if level != out_level {
                return Err(invalid!(
                    "skip pair ({level}, {block}): encoder level {level} is {0}x{0} but up block {block} emits {1}x{1}",
                    self.extent_at(level),
                    self.extent_at(out_level)
                ));
            }
            if std::mem::replace(&mut seen[block], true) {
                return Err(invalid!("skip pair ({level}, {block}): up block {block} already has a skip"));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("input_size", self.input_size);
        kv.set("down_blocks", self.down_blocks);
        kv.set("up_blocks", self.up_blocks);
        kv.set("tail_blocks", self.tail_blocks);
        kv.set("base_channels", self.base_channels);
        kv.set("channel_growth", self.channel_growth);
        kv.set("dilations", join(self.dilations.iter().map(|d| d.to_string())));
        kv.set("skip_pairs", join(self.skip_pairs.iter().map(|(l, b)| format!("{l}:{b}"))));
        kv.set("head", self.head);
        kv
    }

    /// Read from un-prefixed keys; missing keys take the desk defaults and
    /// unknown keys are rejected.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        if let Some((k, _)) = kv.iter().find(|(k, _)| !KEYS.contains(k)) {
            return Err(invalid!("unknown network key {k:?}"));
        }
        let d = Self::default();
        let spec = Self {
            input_size: kv.get_or("input_size", d.input_size)?,
            down_blocks: kv.get_or("down_blocks", d.down_blocks)?,
            up_blocks: kv.get_or("up_blocks", d.up_blocks)?,
            tail_blocks: kv.get_or("tail_blocks", d.tail_blocks)?,
            base_channels: kv.get_or("base_channels", d.base_channels)?,
            channel_growth: kv.get_or("channel_growth", d.channel_growth)?,
            dilations: match kv.get("dilations") {
                Some(s) => parse_list(s, |t| t.parse::<usize>().map_err(|e| invalid!("dilations: {t:?}: {e}")))?,
                None => d.dilations,
            },
            skip_pairs: match kv.get("skip_pairs") {
                Some(s) => parse_list(s, parse_pair)?,
                None => d.skip_pairs,
            },
            head: match kv.get("head") {
                Some(s) => s.parse()?,
                None => d.head,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }
}

fn join(items: impl Iterator<Item = String>) -> String {
    items.collect::<Vec<_>>().join(",")
}

fn parse_list<T>(s: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(item).collect()
}

fn parse_pair(t: &str) -> Result<(usize, usize)> {
    let (a, b) = t.split_once(':').ok_or_else(|| invalid!("skip pair {t:?} is not level:block"))?;
    let num = |x: &str| x.trim().parse::<usize>().map_err(|e| invalid!("skip pair {t:?}: {e}"));
    Ok((num(a)?, num(b)?))
}
