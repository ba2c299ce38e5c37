//! Condensed (upper-triangular) pairwise distance matrices.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pairwise distances over `n` items stored as the `n(n-1)/2` entries above
/// the diagonal, row by row. The diagonal is implicitly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedMatrix<T> {
    n: usize,
    values: Vec<T>,
    ids: Vec<String>,
}

#[inline]
pub fn condensed_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    n * i - i * (i + 1) / 2 + (j - i - 1)
}

impl<T: Scalar> CondensedMatrix<T> {
    pub fn new(ids: Vec<String>, values: Vec<T>) -> Result<Self> {
        let n = ids.len();
        if values.len() != n * n.saturating_sub(1) / 2 {
            return Err(Error::Param(format!(
                "{} condensed values do not fit {n} items",
                values.len()
            )));
        }
        Ok(CondensedMatrix { n, values, ids })
    }

    /// Anonymous items, named by their position.
    pub fn from_values(n: usize, values: Vec<T>) -> Result<Self> {
        Self::new((0..n).map(|i| i.to_string()).collect(), values)
    }

    /// Fill from `f(i, j)` for `i < j`, rows computed in parallel.
    pub fn from_fn<F>(ids: Vec<String>, f: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> Result<T> + Sync,
    {
        let n = ids.len();
        let rows: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|i| ((i + 1)..n).map(|j| f(i, j)).collect::<Result<Vec<T>>>())
            .collect::<Result<_>>()?;
        Ok(CondensedMatrix {
            n,
            values: rows.into_iter().flatten().collect(),
            ids,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => T::zero(),
            std::cmp::Ordering::Less => self.values[condensed_index(self.n, i, j)],
            std::cmp::Ordering::Greater => self.values[condensed_index(self.n, j, i)],
        }
    }

    pub fn has_unordered(&self) -> bool {
        self.values.iter().any(Scalar::is_unordered)
    }

    /// Same distances restricted to (and reordered by) `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let ids = order.iter().map(|&i| self.ids[i].clone()).collect();
        let mut values = Vec::with_capacity(order.len() * order.len().saturating_sub(1) / 2);
        for a in 0..order.len() {
            for b in (a + 1)..order.len() {
                values.push(self.get(order[a], order[b]));
            }
        }
        CondensedMatrix {
            n: order.len(),
            values,
            ids,
        }
    }
}

const MAGIC: &[u8; 8] = b"WPNDIST1";

impl CondensedMatrix<f64> {
    /// Binary layout, little-endian: magic `WPNDIST1`, `n: u64`, then `n`
    /// ids as `len: u32` + UTF-8 bytes, then the condensed values as `f64`.
    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&(self.n as u64).to_le_bytes())?;
        for id in &self.ids {
            out.write_all(&(id.len() as u32).to_le_bytes())?;
            out.write_all(id.as_bytes())?;
        }
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        const WHAT: &str = "distance matrix file";
        let err = |e: std::io::Error| Error::artifact(WHAT, e);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(err)?;
        if &magic != MAGIC {
            return Err(Error::artifact(WHAT, "bad magic"));
        }
        let mut u64buf = [0u8; 8];
        input.read_exact(&mut u64buf).map_err(err)?;
        let n = u64::from_le_bytes(u64buf) as usize;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let mut len = [0u8; 4];
            input.read_exact(&mut len).map_err(err)?;
            let mut bytes = vec![0u8; u32::from_le_bytes(len) as usize];
            input.read_exact(&mut bytes).map_err(err)?;
            ids.push(String::from_utf8(bytes).map_err(|e| Error::artifact(WHAT, e))?);
        }
        let count = n * n.saturating_sub(1) / 2;
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            input.read_exact(&mut u64buf).map_err(err)?;
            values.push(f64::from_le_bytes(u64buf));
        }
        Self::new(ids, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut f).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
        Self::read_from(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_layout_matches_row_major_upper_triangle() {
        let n = 5;
        let mut k = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                assert_eq!(condensed_index(n, i, j), k);
                k += 1;
            }
        }
    }

    #[test]
    fn get_is_symmetric_with_zero_diagonal() {
        let m = CondensedMatrix::from_values(3, vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(m.get(0, 1), 0.1);
        assert_eq!(m.get(2, 0), 0.2);
        assert_eq!(m.get(2, 1), 0.3);
        assert_eq!(m.get(1, 1), 0.0);
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert!(CondensedMatrix::from_values(3, vec![0.1, 0.2]).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let m = CondensedMatrix::new(
            vec!["a".into(), "bé".into(), "c".into()],
            vec![0.1, 1.0 / 3.0, 0.0],
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(CondensedMatrix::read_from(&mut buf.as_slice()).unwrap(), m);
        assert!(CondensedMatrix::read_from(&mut &buf[..buf.len() - 1]).is_err());
    }
}
