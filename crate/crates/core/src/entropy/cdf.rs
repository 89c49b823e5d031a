use crate::error::{Error, Result};

pub const DEFAULT_PRECISION: u32 = 16;

/// Quantized cumulative frequency table over the integer interval `lo..=hi`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    lo: i32,
    precision: u32,
    /// `cum[0] = 0`, `cum[len] = 1 << precision`.
    cum: Vec<u32>,
}

impl CdfTable {
    /// Quantizes `pmf` (indexed from symbol `lo`) to integer counts totalling
    /// `2^precision`, giving every symbol at least one count.
    pub fn from_pmf(lo: i32, pmf: &[f64], precision: u32) -> Result<Self> {
        if !(1..=16).contains(&precision) {
            return Err(Error::range("table precision", precision, "[1, 16]"));
        }
        let total = 1u64 << precision;
        if pmf.is_empty() || pmf.len() as u64 > total {
            return Err(Error::Entropy(format!(
                "support of {} symbols does not fit {precision}-bit precision",
                pmf.len()
            )));
        }
        let mass: f64 = pmf.iter().sum();
        if !((mass - 1.0).abs() <= 1e-9) || pmf.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Entropy(format!("pmf is not normalised (sum {mass})")));
        }
        let mut counts: Vec<u64> = pmf
            .iter()
            .map(|&p| ((p * total as f64).round() as u64).max(1))
            .collect();
        let sum: u64 = counts.iter().sum();
        if sum != total {
            let mut order: Vec<usize> = (0..counts.len()).collect();
            order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
            if sum < total {
                counts[order[0]] += total - sum;
            } else {
                let mut excess = sum - total;
                for &i in &order {
                    let take = excess.min(counts[i] - 1);
                    counts[i] -= take;
                    excess -= take;
                    if excess == 0 {
                        break;
                    }
                }
            }
        }
        let mut cum = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0u64;
        cum.push(0);
        for c in counts {
            acc += c;
            cum.push(acc as u32);
        }
        Ok(Self { lo, precision, cum })
    }

    pub fn lo(&self) -> i32 {
        self.lo
    }

    pub fn hi(&self) -> i32 {
        self.lo + self.cum.len() as i32 - 2
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }

    pub fn count(&self, symbol: i32) -> Option<u32> {
        self.interval(symbol).map(|(a, b)| b - a)
    }

    /// `[cum(s), cum(s + 1))` for an in-support symbol.
    pub fn interval(&self, symbol: i32) -> Option<(u32, u32)> {
        if symbol < self.lo || symbol > self.hi() {
            return None;
        }
        let i = (symbol - self.lo) as usize;
        Some((self.cum[i], self.cum[i + 1]))
    }

    /// Symbol whose interval contains the scaled target `t`.
    pub(crate) fn lookup(&self, t: u32) -> (i32, u32, u32) {
        // last index with cum[i] <= t
        let i = self.cum.partition_point(|&c| c <= t) - 1;
        (self.lo + i as i32, self.cum[i], self.cum[i + 1])
    }

    /// Ideal code length of `symbol` under the quantized table.
    pub fn bits(&self, symbol: i32) -> Option<f64> {
        self.count(symbol)
            .map(|c| self.precision as f64 - (c as f64).log2())
    }
}
