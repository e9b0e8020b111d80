//! Tensor collocation grid on the truncated torus `T^M × T`.
//!
//! Every φ axis carries `2·os·m_i + 1` points where `m_i` is the largest
//! `|ℓ_i|` in the lattice, and the x axis `2·os·jmax + 1` points. Transforms are
//! plain separable DFTs; grids here are small.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;

use crate::lattice::Lattice;

type C = Complex64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridOptions {
    /// Oversampling factor `os ≥ 1`.
    pub oversample: usize,
    /// Relative ℓ¹ tail energy (outside the truncation) tolerated after a
    /// nonlinear grid operation.
    pub alias_tol: f64,
    /// Absolute tail below which nothing is reported (rounding level).
    pub alias_floor: f64,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            oversample: 2,
            alias_tol: 1e-6,
            alias_floor: 1e-12,
        }
    }
}

impl GridOptions {
    pub fn lenient() -> Self {
        Self {
            oversample: 2,
            alias_tol: f64::INFINITY,
            alias_floor: f64::INFINITY,
        }
    }
}

/// Result of projecting grid values back onto the truncation.
pub struct Analysis {
    pub coeffs: Vec<C>,
    /// ℓ¹ mass of resolved modes outside the truncation.
    pub tail: f64,
    pub total: f64,
}

pub struct Grid {
    lattice: Arc<Lattice>,
    jmax: usize,
    /// Per φ axis band half-width and point count.
    bands: Vec<usize>,
    npts: Vec<usize>,
    xband: usize,
    nx: usize,
    nphi: usize,
    /// forward[axis][t*n + p] = e^{−i(t−B)θ_p}/n, inverse[axis][p*n + t] = e^{i(t−B)θ_p}
    forward: Vec<Vec<C>>,
    inverse: Vec<Vec<C>>,
}

fn cis_frac(m: i64, p: usize, n: usize) -> C {
    let r = (m * p as i64).rem_euclid(n as i64);
    C::from_polar(1.0, 2.0 * PI * r as f64 / n as f64)
}

fn tables(band: usize) -> (Vec<C>, Vec<C>) {
    let n = 2 * band + 1;
    let mut f = vec![C::new(0.0, 0.0); n * n];
    let mut inv = vec![C::new(0.0, 0.0); n * n];
    for t in 0..n {
        let m = t as i64 - band as i64;
        for p in 0..n {
            let e = cis_frac(m, p, n);
            f[t * n + p] = e.conj() / n as f64;
            inv[p * n + t] = e;
        }
    }
    (f, inv)
}

/// Apply an n×n table along `axis` of a row-major array with `shape`.
fn transform_axis(data: &mut [C], shape: &[usize], axis: usize, table: &[C]) {
    let n = shape[axis];
    if n == 1 {
        return;
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut line = vec![C::new(0.0, 0.0); n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (p, slot) in line.iter_mut().enumerate() {
                *slot = data[base + p * inner];
            }
            for t in 0..n {
                let row = &table[t * n..(t + 1) * n];
                let mut acc = C::new(0.0, 0.0);
                for (a, b) in row.iter().zip(&line) {
                    acc += a * b;
                }
                data[base + t * inner] = acc;
            }
        }
    }
}

impl Grid {
    pub fn new(lattice: Arc<Lattice>, jmax: usize, opts: &GridOptions) -> Self {
        let os = opts.oversample.max(1);
        let bands: Vec<usize> = lattice.box_max().iter().map(|&m| os * m as usize).collect();
        let npts: Vec<usize> = bands.iter().map(|b| 2 * b + 1).collect();
        let xband = os * jmax;
        let nx = 2 * xband + 1;
        let nphi = npts.iter().product();
        let mut forward = Vec::new();
        let mut inverse = Vec::new();
        for &b in bands.iter().chain(std::iter::once(&xband)) {
            let (f, i) = tables(b);
            forward.push(f);
            inverse.push(i);
        }
        Self {
            lattice,
            jmax,
            bands,
            npts,
            xband,
            nx,
            nphi,
            forward,
            inverse,
        }
    }

    pub fn lattice(&self) -> &Arc<Lattice> {
        &self.lattice
    }

    pub fn jmax(&self) -> usize {
        self.jmax
    }

    pub fn nphi(&self) -> usize {
        self.nphi
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn len(&self) -> usize {
        self.nphi * self.nx
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sites(&self) -> usize {
        self.bands.len()
    }

    fn shape(&self) -> Vec<usize> {
        let mut s = self.npts.clone();
        s.push(self.nx);
        s
    }

    /// Angles of φ grid point `P` (row-major over axes, site 1 slowest).
    pub fn phi_point(&self, mut pidx: usize) -> Vec<f64> {
        let m = self.npts.len();
        let mut out = vec![0.0; m];
        for a in (0..m).rev() {
            let n = self.npts[a];
            out[a] = 2.0 * PI * (pidx % n) as f64 / n as f64;
            pidx /= n;
        }
        out
    }

    /// All φ grid points, flattened `nphi × M`.
    pub fn phi_points(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.nphi * self.sites());
        for p in 0..self.nphi {
            v.extend(self.phi_point(p));
        }
        v
    }

    pub fn x_point(&self, q: usize) -> f64 {
        2.0 * PI * q as f64 / self.nx as f64
    }

    fn box_offset(&self, l: &crate::lattice::MultiIndex, k: i64) -> usize {
        let mut off = 0usize;
        for (a, &b) in self.bands.iter().enumerate() {
            let t = (l.get(a + 1) + b as i64) as usize;
            off = off * self.npts[a] + t;
        }
        off * self.nx + (k + self.xband as i64) as usize
    }

    /// Values of the truncated series on the grid.
    pub fn synthesize(&self, coeffs: &[C]) -> Vec<C> {
        let w = 2 * self.jmax + 1;
        let mut data = vec![C::new(0.0, 0.0); self.len()];
        for (kk, l) in self.lattice.indices().iter().enumerate() {
            for jj in 0..w {
                let c = coeffs[kk * w + jj];
                if c != C::new(0.0, 0.0) {
                    let j = jj as i64 - self.jmax as i64;
                    data[self.box_offset(l, j)] = c;
                }
            }
        }
        let shape = self.shape();
        for a in 0..shape.len() {
            transform_axis(&mut data, &shape, a, &self.inverse[a]);
        }
        data
    }

    /// Project grid values onto the truncation, measuring the resolved tail.
    pub fn analyze(&self, values: &[C]) -> Analysis {
        assert_eq!(values.len(), self.len());
        let mut data = values.to_vec();
        let shape = self.shape();
        for a in 0..shape.len() {
            transform_axis(&mut data, &shape, a, &self.forward[a]);
        }
        let w = 2 * self.jmax + 1;
        let mut coeffs = vec![C::new(0.0, 0.0); self.lattice.len() * w];
        let total: f64 = data.iter().map(|c| c.norm()).sum();
        let mut kept = 0.0;
        for (kk, l) in self.lattice.indices().iter().enumerate() {
            for jj in 0..w {
                let j = jj as i64 - self.jmax as i64;
                let c = data[self.box_offset(l, j)];
                coeffs[kk * w + jj] = c;
                kept += c.norm();
            }
        }
        Analysis {
            coeffs,
            tail: (total - kept).max(0.0),
            total,
        }
    }

    /// Evaluate a truncated series at arbitrary points.
    ///
    /// `thetas` holds one φ point per grid φ index (flattened `nphi × M`) and
    /// `ys` one x value per grid point. Either may be `None` to use the grid
    /// coordinates themselves.
    pub fn evaluate(&self, coeffs: &[C], thetas: Option<&[f64]>, ys: Option<&[f64]>) -> Vec<C> {
        let w = 2 * self.jmax + 1;
        let m = self.sites();
        let lat = &self.lattice;
        let rows: Vec<usize> = (0..lat.len())
            .filter(|&k| coeffs[k * w..(k + 1) * w].iter().any(|c| c.re != 0.0 || c.im != 0.0))
            .collect();
        let mut out = vec![C::new(0.0, 0.0); self.len()];
        let mut v = vec![C::new(0.0, 0.0); w];
        let mut pw: Vec<Vec<C>> = self.bands.iter().map(|&b| vec![C::new(0.0, 0.0); 2 * b + 1]).collect();
        let mut ej = vec![C::new(0.0, 0.0); w];
        for p in 0..self.nphi {
            let theta: Vec<f64> = match thetas {
                Some(t) => t[p * m..(p + 1) * m].to_vec(),
                None => self.phi_point(p),
            };
            for a in 0..m {
                let b = self.bands[a];
                let e = C::from_polar(1.0, theta[a]);
                powers(e, b, &mut pw[a]);
            }
            v.iter_mut().for_each(|z| *z = C::new(0.0, 0.0));
            for &k in &rows {
                let l = lat.index(k);
                let mut ph = C::new(1.0, 0.0);
                for (site, val) in l.support() {
                    ph *= pw[site - 1][(val + self.bands[site - 1] as i64) as usize];
                }
                for (jj, z) in v.iter_mut().enumerate() {
                    *z += coeffs[k * w + jj] * ph;
                }
            }
            for q in 0..self.nx {
                let y = match ys {
                    Some(ys) => ys[p * self.nx + q],
                    None => self.x_point(q),
                };
                powers(C::from_polar(1.0, y), self.jmax, &mut ej);
                let mut acc = C::new(0.0, 0.0);
                for (a, b) in v.iter().zip(&ej) {
                    acc += a * b;
                }
                out[p * self.nx + q] = acc;
            }
        }
        out
    }

    /// Evaluate the `j = 0` column (a function of φ) at one φ point per grid
    /// φ index.
    pub fn evaluate_phi(&self, coeffs: &[C], thetas: Option<&[f64]>) -> Vec<C> {
        let w = 2 * self.jmax + 1;
        let m = self.sites();
        let lat = &self.lattice;
        let mut pw: Vec<Vec<C>> = self.bands.iter().map(|&b| vec![C::new(0.0, 0.0); 2 * b + 1]).collect();
        let rows: Vec<usize> = (0..lat.len())
            .filter(|&k| coeffs[k * w + self.jmax] != C::new(0.0, 0.0))
            .collect();
        (0..self.nphi)
            .map(|p| {
                let theta: Vec<f64> = match thetas {
                    Some(t) => t[p * m..(p + 1) * m].to_vec(),
                    None => self.phi_point(p),
                };
                for a in 0..m {
                    powers(C::from_polar(1.0, theta[a]), self.bands[a], &mut pw[a]);
                }
                let mut acc = C::new(0.0, 0.0);
                for &k in &rows {
                    let mut ph = C::new(1.0, 0.0);
                    for (site, val) in lat.index(k).support() {
                        ph *= pw[site - 1][(val + self.bands[site - 1] as i64) as usize];
                    }
                    acc += coeffs[k * w + self.jmax] * ph;
                }
                acc
            })
            .collect()
    }
}

/// `out[t] = e^{(t−b)}` for `t = 0..=2b`, given `e` on the unit circle.
fn powers(e: C, b: usize, out: &mut [C]) {
    out[b] = C::new(1.0, 0.0);
    let mut z = C::new(1.0, 0.0);
    for t in 1..=b {
        z *= e;
        out[b + t] = z;
        out[b - t] = z.conj();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeParams;

    #[test]
    fn synthesize_analyze_round_trip() {
        let lat = Lattice::new(LatticeParams::new(1.0, 2, 3.0)).unwrap();
        let jmax = 4;
        let g = Grid::new(lat.clone(), jmax, &GridOptions::default());
        let w = 2 * jmax + 1;
        let coeffs: Vec<C> = (0..lat.len() * w)
            .map(|i| C::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        let vals = g.synthesize(&coeffs);
        let back = g.analyze(&vals);
        for (a, b) in coeffs.iter().zip(&back.coeffs) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!(back.tail < 1e-10);
        let direct = g.evaluate(&coeffs, None, None);
        for (a, b) in vals.iter().zip(&direct) {
            assert!((a - b).norm() < 1e-11);
        }
    }
}
