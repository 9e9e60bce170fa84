use std::str::FromStr;

use anyhow::bail;

/// `lo:hi:n`, n equally spaced points including both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let [lo, hi, n] = parts.as_slice() else {
            return Err(format!("expected lo:hi:n, got '{s}'"));
        };
        let lo: f64 = lo.trim().parse().map_err(|e| format!("bad lower bound '{lo}': {e}"))?;
        let hi: f64 = hi.trim().parse().map_err(|e| format!("bad upper bound '{hi}': {e}"))?;
        let n: usize = n.trim().parse().map_err(|e| format!("bad point count '{n}': {e}"))?;
        if !lo.is_finite() || !hi.is_finite() {
            return Err("grid bounds must be finite".into());
        }
        if n == 0 {
            return Err("grid is empty".into());
        }
        if n > 1 && !(lo < hi) {
            return Err(format!("grid must be strictly increasing, got {lo} >= {hi}"));
        }
        Ok(Grid { lo, hi, n })
    }
}

impl Grid {
    pub fn points(&self) -> anyhow::Result<Vec<f64>> {
        if self.n == 0 {
            bail!("grid is empty");
        }
        if self.n == 1 {
            return Ok(vec![self.lo]);
        }
        let step = (self.hi - self.lo) / (self.n - 1) as f64;
        let mut v: Vec<f64> = (0..self.n).map(|i| self.lo + step * i as f64).collect();
        v[self.n - 1] = self.hi;
        Ok(v)
    }
}
