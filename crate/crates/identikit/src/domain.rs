use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box, the concrete realization of every parameter, state and
/// experiment space in the toolkit. Lower bounds may be open (positivity
/// constraints); upper bounds may be infinite for membership checks, but
/// sampling requires a finite box.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Domain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub open_lo: Vec<bool>,
}

impl Domain {
    pub fn closed(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        let n = lo.len();
        assert_eq!(n, hi.len());
        Domain { lo, hi, open_lo: vec![false; n] }
    }

    /// Box with all lower bounds open (strict positivity style constraints).
    pub fn open_below(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        let n = lo.len();
        assert_eq!(n, hi.len());
        Domain { lo, hi, open_lo: vec![true; n] }
    }

    /// Zero-dimensional box (systems with no experiment coordinates).
    pub fn empty() -> Self {
        Domain { lo: vec![], hi: vec![], open_lo: vec![] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().enumerate().all(|(i, &v)| {
                let lower_ok = if self.open_lo[i] { v > self.lo[i] } else { v >= self.lo[i] };
                lower_ok && v <= self.hi[i] && v.is_finite()
            })
    }

    /// Error on the first coordinate that violates the box.
    pub fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Validation(format!(
                "expected {} coordinates, got {}",
                self.dim(),
                x.len()
            )));
        }
        for (i, &v) in x.iter().enumerate() {
            let lower_ok = if self.open_lo[i] { v > self.lo[i] } else { v >= self.lo[i] };
            if !lower_ok || v > self.hi[i] || !v.is_finite() {
                return Err(Error::OutOfDomain { index: i, value: v });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.lo.iter().chain(self.hi.iter()).all(|v| v.is_finite())
    }

    pub fn diameter(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| (h - l) * (h - l))
            .sum::<f64>()
            .sqrt()
    }

    /// Uniform draw. Open lower bounds are handled by rejection of exact
    /// boundary hits, which have probability zero anyway.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        assert!(self.is_finite(), "cannot sample an unbounded domain");
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| if l == h { l } else { rng.gen_range(l..h) })
            .collect()
    }

    /// Log-uniform draw, valid only for strictly positive boxes.
    pub fn sample_log<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        assert!(self.is_finite(), "cannot sample an unbounded domain");
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| {
                assert!(l > 0.0, "log-uniform sampling needs positive bounds");
                if l == h {
                    l
                } else {
                    rng.gen_range(l.ln()..h.ln()).exp()
                }
            })
            .collect()
    }

    /// Cartesian grid with `ppd` points per dimension, inset from open lower
    /// bounds by half a cell.
    pub fn grid(&self, ppd: usize) -> Vec<Vec<f64>> {
        assert!(ppd >= 1);
        if self.dim() == 0 {
            return vec![vec![]];
        }
        let axes: Vec<Vec<f64>> = (0..self.dim())
            .map(|i| {
                let (l, h) = (self.lo[i], self.hi[i]);
                if ppd == 1 {
                    return vec![0.5 * (l + h)];
                }
                let step = (h - l) / (ppd as f64 - 1.0);
                (0..ppd)
                    .map(|j| {
                        let v = l + step * j as f64;
                        if j == 0 && self.open_lo[i] {
                            l + 0.5 * step
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect();
        let mut out = Vec::with_capacity(ppd.pow(self.dim() as u32));
        let mut idx = vec![0usize; self.dim()];
        loop {
            out.push(idx.iter().enumerate().map(|(i, &j)| axes[i][j]).collect());
            let mut d = 0;
            loop {
                idx[d] += 1;
                if idx[d] < ppd {
                    break;
                }
                idx[d] = 0;
                d += 1;
                if d == self.dim() {
                    return out;
                }
            }
        }
    }

    /// Sub-box of one cell radius around `center`, clipped to the domain.
    pub fn cell_around(&self, center: &[f64], ppd: usize) -> Domain {
        let mut lo = Vec::with_capacity(self.dim());
        let mut hi = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let w = (self.hi[i] - self.lo[i]) / (ppd.max(2) as f64 - 1.0);
            lo.push((center[i] - w).max(self.lo[i]));
            hi.push((center[i] + w).min(self.hi[i]));
        }
        Domain { lo, hi, open_lo: self.open_lo.clone() }
    }

    /// Append one more coordinate (used by the time reparametrization).
    pub fn append(&self, lo: f64, hi: f64, open_lo: bool) -> Domain {
        let mut d = self.clone();
        d.lo.push(lo);
        d.hi.push(hi);
        d.open_lo.push(open_lo);
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn membership_open_lower() {
        let d = Domain::open_below(vec![0.0], vec![1.0]);
        assert!(!d.contains(&[0.0]));
        assert!(d.contains(&[1e-12]));
        assert!(d.contains(&[1.0]));
        assert!(!d.contains(&[1.5]));
    }

    #[test]
    fn check_reports_coordinate() {
        let d = Domain::closed(vec![0.0, 0.0], vec![1.0, 1.0]);
        match d.check(&[0.5, 2.0]) {
            Err(Error::OutOfDomain { index: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sampling_stays_inside() {
        let d = Domain::open_below(vec![0.1, 1.0], vec![2.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            assert!(d.contains(&d.sample(&mut rng)));
            assert!(d.contains(&d.sample_log(&mut rng)));
        }
    }

    #[test]
    fn grid_covers_box() {
        let d = Domain::closed(vec![0.0, -1.0], vec![1.0, 1.0]);
        let g = d.grid(3);
        assert_eq!(g.len(), 9);
        assert!(g.contains(&vec![0.0, -1.0]));
        assert!(g.contains(&vec![1.0, 1.0]));
    }

    #[test]
    fn empty_grid_is_single_point() {
        assert_eq!(Domain::empty().grid(5), vec![Vec::<f64>::new()]);
    }
}
