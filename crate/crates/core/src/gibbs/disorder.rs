use std::io::{Read, Write};

use rand_distr::{Distribution, StandardNormal};

use super::GibbsError;
use crate::seeding::{rng_for, Stream};

const MAGIC: &[u8; 4] = b"GSDS";
/// Current on-disk format version.
pub const FORMAT_VERSION: u32 = 1;

/// Gaussian couplings `g_ij`, `i < j`, stored as the row-major upper triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct DisorderSample {
    n: usize,
    seed: u64,
    couplings: Vec<f64>,
}

impl DisorderSample {
    /// Draws `n(n-1)/2` standard normals from the couplings stream of `seed`.
    pub fn generate(n: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, Stream::Couplings);
        let couplings = (0..n * n.saturating_sub(1) / 2).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { n, seed, couplings }
    }

    pub fn from_couplings(n: usize, seed: u64, couplings: Vec<f64>) -> Result<Self, GibbsError> {
        let expected = n * n.saturating_sub(1) / 2;
        if couplings.len() != expected {
            return Err(GibbsError::SizeMismatch { expected, got: couplings.len() });
        }
        if let Some(bad) = couplings.iter().find(|g| !g.is_finite()) {
            return Err(GibbsError::Format(format!("non-finite coupling {bad}")));
        }
        Ok(Self { n, seed, couplings })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn couplings(&self) -> &[f64] {
        &self.couplings
    }

    fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.n);
        i * (2 * self.n - i - 1) / 2 + (j - i - 1)
    }

    /// `g_ij` for `i != j` (symmetric); zero on the diagonal.
    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Less => self.couplings[self.index(i, j)],
            std::cmp::Ordering::Greater => self.couplings[self.index(j, i)],
            std::cmp::Ordering::Equal => 0.0,
        }
    }

    /// Full symmetric `n × n` matrix with zero diagonal, row-major.
    pub fn dense(&self) -> Vec<f64> {
        let n = self.n;
        let mut m = vec![0.0; n * n];
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                m[i * n + j] = self.couplings[k];
                m[j * n + i] = self.couplings[k];
                k += 1;
            }
        }
        m
    }

    /// Binary layout, little endian: `b"GSDS"`, `u32` version, `u64` n,
    /// `u64` seed, then the upper-triangle couplings as `f64`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), GibbsError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for g in &self.couplings {
            w.write_all(&g.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, GibbsError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(GibbsError::Format("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(GibbsError::Format(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n = usize::try_from(u64::from_le_bytes(b8)).map_err(|_| GibbsError::Format("n too large".into()))?;
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        let count = n
            .checked_mul(n.saturating_sub(1))
            .map(|c| c / 2)
            .ok_or_else(|| GibbsError::Format("n too large".into()))?;
        let mut couplings = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            r.read_exact(&mut b8)?;
            couplings.push(f64::from_le_bytes(b8));
        }
        Self::from_couplings(n, seed, couplings)
    }
}
