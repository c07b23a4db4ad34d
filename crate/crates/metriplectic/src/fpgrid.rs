//! Finite-difference realization of the generator on box grids.
//!
//! The operator splits as `L = L_a + L_s`. The symmetric part
//! `L_s = Delta_{H,S}` is discretized in divergence form
//! `(1/w) sum_jk D_j(w K_jk D_k .)` with `w = e^S m`: same-axis terms use
//! compact face averages, mixed terms centered differences, which makes
//! the weighted matrix `W L_s` symmetric to the bit. The advective part
//! `L_a f = (J grad E) . grad f` uses the skew form
//! `(1/2)[b . grad f + (1/w) div(w b f)] - (f/2w) div_h(w b)`; its
//! weighted matrix is antisymmetric up to the diagonal consistency
//! correction, which is O(h^2) wherever `div(w J grad E) = 0` holds.
//! Stencils reference only in-range neighbors (zero-flux closure at the
//! box faces); certificates are therefore evaluated on interior nodes
//! several cells from every face.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expr::{DerivOrder, ExprAst};
use crate::fields::Point;
use crate::quad::pairwise_sum;
use crate::system::GenericSystem;

/// Per-axis node counts over a box; nodes sit at cell centers.
#[derive(Clone, Debug)]
pub struct GridSpec {
    pub bounds: Vec<(f64, f64)>,
    pub nodes: Vec<usize>,
}

impl GridSpec {
    pub fn uniform(bounds: Vec<(f64, f64)>, nodes_per_axis: usize) -> Self {
        let nodes = vec![nodes_per_axis; bounds.len()];
        GridSpec { bounds, nodes }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn total_nodes(&self) -> usize {
        self.nodes.iter().product()
    }
}

const MAX_NODES: usize = 4_000_000;

/// Compressed sparse rows.
#[derive(Clone, Debug)]
struct Csr {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Csr {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for (c, v) in row {
                match merged.last_mut() {
                    Some(last) if last.0 == c => last.1 += v,
                    _ => merged.push((c, v)),
                }
            }
            for (c, v) in merged {
                cols.push(c);
                vals.push(v);
            }
            offsets.push(cols.len());
        }
        Csr {
            offsets,
            cols,
            vals,
        }
    }

    fn n_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.offsets[i]..self.offsets[i + 1]).map(move |k| (self.cols[k], self.vals[k]))
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        let lo = self.offsets[i];
        let hi = self.offsets[i + 1];
        match self.cols[lo..hi].binary_search(&j) {
            Ok(k) => self.vals[lo + k],
            Err(_) => 0.0,
        }
    }

    fn apply(&self, f: &[f64], out: &mut [f64]) {
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let mut acc = 0.0;
            for (c, v) in self.row(i) {
                acc += v * f[c];
            }
            *o = acc;
        });
    }

    fn apply_transpose(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows()];
        for i in 0..self.n_rows() {
            let fi = f[i];
            if fi == 0.0 {
                continue;
            }
            for (c, v) in self.row(i) {
                out[c] += v * fi;
            }
        }
        out
    }

    #[cfg_attr(not(test), allow(dead_code))]
    fn frobenius(&self) -> f64 {
        self.vals.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius norm over the masked block, and the same norm of
    /// `self - sign * self^T` there.
    fn masked_norm_and_transpose_defect(&self, sign: f64, mask: &[bool]) -> (f64, f64) {
        let mut norm = 0.0;
        let mut defect = 0.0;
        for i in 0..self.n_rows() {
            if !mask[i] {
                continue;
            }
            for (j, v) in self.row(i) {
                if !mask[j] {
                    continue;
                }
                norm += v * v;
                let d = v - sign * self.get(j, i);
                defect += d * d;
            }
        }
        (norm.sqrt(), defect.sqrt())
    }

    fn add(&self, other: &Csr) -> Csr {
        let rows: Vec<Vec<(usize, f64)>> = (0..self.n_rows())
            .map(|i| self.row(i).chain(other.row(i)).collect())
            .collect();
        Csr::from_rows(rows)
    }
}

/// Sparse realization of `L` (and its weighted adjoints) on the grid.
pub struct GridOperator {
    spec: GridSpec,
    h: Vec<f64>,
    cell_volume: f64,
    /// `W L_s` (symmetric) and `W L_a` (antisymmetric up to the diagonal
    /// consistency term), with `W = diag(e^S m V)`.
    sym: Csr,
    anti: Csr,
    full: Csr,
    /// e^S m per node.
    w: Vec<f64>,
    /// m per node.
    m: Vec<f64>,
    /// S and E samples per node.
    s: Vec<f64>,
    e: Vec<f64>,
}

fn flat_to_multi(mut flat: usize, nodes: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; nodes.len()];
    for a in (0..nodes.len()).rev() {
        idx[a] = flat % nodes[a];
        flat /= nodes[a];
    }
    idx
}

fn multi_to_flat(idx: &[usize], nodes: &[usize]) -> usize {
    let mut flat = 0;
    for a in 0..nodes.len() {
        flat = flat * nodes[a] + idx[a];
    }
    flat
}

fn neighbor(flat: usize, axis: usize, step: isize, nodes: &[usize]) -> Option<usize> {
    let mut idx = flat_to_multi(flat, nodes);
    let v = idx[axis] as isize + step;
    if v < 0 || v >= nodes[axis] as isize {
        return None;
    }
    idx[axis] = v as usize;
    Some(multi_to_flat(&idx, nodes))
}

/// Assemble the grid generator for `sys` on `spec`.
pub fn build_grid_generator(sys: &GenericSystem, spec: &GridSpec) -> Result<GridOperator> {
    let dim = spec.dim();
    if dim != sys.dim() {
        return Err(Error::Config(format!(
            "grid dimension {dim} does not match system dimension {}",
            sys.dim()
        )));
    }
    if dim > 3 {
        return Err(Error::GridRefused {
            message: format!("dimension {dim} exceeds the d <= 3 limit"),
        });
    }
    if spec.nodes.iter().any(|&n| n < 16) {
        return Err(Error::GridRefused {
            message: "need at least 16 nodes per axis".into(),
        });
    }
    let total = spec.total_nodes();
    if total > MAX_NODES {
        return Err(Error::GridRefused {
            message: format!("{total} nodes exceed the limit of {MAX_NODES}"),
        });
    }

    let h: Vec<f64> = (0..dim)
        .map(|a| (spec.bounds[a].1 - spec.bounds[a].0) / spec.nodes[a] as f64)
        .collect();
    let cell_volume: f64 = h.iter().product();

    let point_of = |flat: usize| -> Point {
        let idx = flat_to_multi(flat, &spec.nodes);
        DVector::from_iterator(
            dim,
            (0..dim).map(|a| spec.bounds[a].0 + (idx[a] as f64 + 0.5) * h[a]),
        )
    };

    struct NodeSample {
        w: f64,
        m: f64,
        s: f64,
        e: f64,
        /// w K_jk for j <= k, packed row-major upper triangle.
        wk: Vec<f64>,
        /// w b_k with b = J grad E.
        wb: Vec<f64>,
    }

    let samples: Vec<NodeSample> = (0..total)
        .into_par_iter()
        .map(|flat| -> Result<NodeSample> {
            let x = point_of(flat);
            let m = sys.nu().density(&x)?;
            let s = sys.entropy().value(&x)?;
            let e = sys.energy().value(&x)?;
            let w = m * s.exp();
            let k = sys.k().value(&x)?;
            let b = sys.j().value(&x)? * sys.energy().gradient(&x)?;
            let mut wk = Vec::with_capacity(dim * (dim + 1) / 2);
            for j in 0..dim {
                for kk in j..dim {
                    wk.push(w * k[(j, kk)]);
                }
            }
            let wb = (0..dim).map(|kk| w * b[kk]).collect();
            Ok(NodeSample { w, m, s, e, wk, wb })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let tri_index = |j: usize, k: usize| -> usize {
        // j <= k
        j * dim - j * (j + 1) / 2 + k
    };

    let mut sym_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); total];
    let mut anti_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); total];

    for i in 0..total {
        // Same-axis divergence terms: faces to the positive side (the
        // negative side is written by the lower neighbor's iteration).
        for a in 0..dim {
            if let Some(up) = neighbor(i, a, 1, &spec.nodes) {
                let coeff = 0.5 * (samples[i].wk[tri_index(a, a)] + samples[up].wk[tri_index(a, a)])
                    / (h[a] * h[a])
                    * cell_volume;
                sym_rows[i].push((up, coeff));
                sym_rows[i].push((i, -coeff));
                sym_rows[up].push((i, coeff));
                sym_rows[up].push((up, -coeff));
            }
        }
        // Mixed second-derivative terms, centered and symmetric per pair.
        for j in 0..dim {
            for k in (j + 1)..dim {
                let scale = cell_volume / (4.0 * h[j] * h[k]);
                // Neighbor i + ej + ek
                if let Some(t) = neighbor(i, j, 1, &spec.nodes)
                    .and_then(|n| neighbor(n, k, 1, &spec.nodes))
                {
                    let nj = neighbor(i, j, 1, &spec.nodes).unwrap();
                    let nk = neighbor(i, k, 1, &spec.nodes).unwrap();
                    let coeff =
                        (samples[nj].wk[tri_index(j, k)] + samples[nk].wk[tri_index(j, k)]) * scale;
                    sym_rows[i].push((t, coeff));
                    sym_rows[t].push((i, coeff));
                }
                // Neighbor i + ej - ek
                if let Some(t) = neighbor(i, j, 1, &spec.nodes)
                    .and_then(|n| neighbor(n, k, -1, &spec.nodes))
                {
                    let nj = neighbor(i, j, 1, &spec.nodes).unwrap();
                    let nk = neighbor(i, k, -1, &spec.nodes).unwrap();
                    let coeff =
                        (samples[nj].wk[tri_index(j, k)] + samples[nk].wk[tri_index(j, k)]) * scale;
                    sym_rows[i].push((t, -coeff));
                    sym_rows[t].push((i, -coeff));
                }
            }
        }
        // Skew-form advection plus the diagonal consistency correction.
        for a in 0..dim {
            let quarter = cell_volume / (4.0 * h[a]);
            let here = samples[i].wb[a];
            if let Some(up) = neighbor(i, a, 1, &spec.nodes) {
                let coeff = (here + samples[up].wb[a]) * quarter;
                anti_rows[i].push((up, coeff));
                anti_rows[up].push((i, -coeff));
            }
            // Diagonal: -(1/2) D_a(w b_a) with ghost-zero closure.
            let upv = neighbor(i, a, 1, &spec.nodes)
                .map(|n| samples[n].wb[a])
                .unwrap_or(0.0);
            let downv = neighbor(i, a, -1, &spec.nodes)
                .map(|n| samples[n].wb[a])
                .unwrap_or(0.0);
            anti_rows[i].push((i, -(upv - downv) / (2.0 * h[a]) * 0.5 * cell_volume));
        }
    }

    let sym = Csr::from_rows(sym_rows);
    let anti = Csr::from_rows(anti_rows);
    let full = sym.add(&anti);

    Ok(GridOperator {
        spec: spec.clone(),
        h,
        cell_volume,
        sym,
        anti,
        full,
        w: samples.iter().map(|s| s.w).collect(),
        m: samples.iter().map(|s| s.m).collect(),
        s: samples.iter().map(|s| s.s).collect(),
        e: samples.iter().map(|s| s.e).collect(),
    })
}

impl GridOperator {
    pub fn n_nodes(&self) -> usize {
        self.spec.total_nodes()
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn point(&self, flat: usize) -> Point {
        let idx = flat_to_multi(flat, &self.spec.nodes);
        DVector::from_iterator(
            self.spec.dim(),
            (0..self.spec.dim())
                .map(|a| self.spec.bounds[a].0 + (idx[a] as f64 + 0.5) * self.h[a]),
        )
    }

    /// Flat index of the node nearest to `x`.
    pub fn nearest_node(&self, x: &Point) -> usize {
        let idx: Vec<usize> = (0..self.spec.dim())
            .map(|a| {
                let t = ((x[a] - self.spec.bounds[a].0) / self.h[a] - 0.5).round();
                (t.max(0.0) as usize).min(self.spec.nodes[a] - 1)
            })
            .collect();
        multi_to_flat(&idx, &self.spec.nodes)
    }

    pub fn sample(&self, f: impl Fn(&Point) -> f64 + Sync) -> Vec<f64> {
        (0..self.n_nodes())
            .into_par_iter()
            .map(|i| f(&self.point(i)))
            .collect()
    }

    /// Samples of `e^S m` (the weight of `L^2(e^S nu)`).
    pub fn weight(&self) -> &[f64] {
        &self.w
    }

    pub fn density_samples(&self) -> &[f64] {
        &self.m
    }

    pub fn entropy_samples(&self) -> &[f64] {
        &self.s
    }

    pub fn energy_samples(&self) -> &[f64] {
        &self.e
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }

    /// `L f` at every node.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; f.len()];
        self.full.apply(f, &mut out);
        for i in 0..out.len() {
            out[i] /= self.w[i] * self.cell_volume;
        }
        out
    }

    /// `L_a f` and `L_s f` separately.
    pub fn apply_split(&self, f: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut a = vec![0.0; f.len()];
        self.anti.apply(f, &mut a);
        let mut s = vec![0.0; f.len()];
        self.sym.apply(f, &mut s);
        for i in 0..f.len() {
            let d = self.w[i] * self.cell_volume;
            a[i] /= d;
            s[i] /= d;
        }
        (a, s)
    }

    /// Adjoint of `L` in the inner product weighted by `u` (per-node
    /// weights, volume element applied internally):
    /// `L*_u = U^-1 L^T U`. Computed from the exact transpose, so the
    /// discrete duality `<f, L g>_u = <L*_u f, g>_u` holds to rounding.
    pub fn apply_adjoint(&self, f: &[f64], u: &[f64]) -> Vec<f64> {
        // L = W^-1 M with M = full, W = diag(w V).
        // L*_u[j] = (1/u_j) sum_i u_i M_ij f_i / (w_i V)
        let scaled: Vec<f64> = (0..f.len())
            .map(|i| f[i] * u[i] / (self.w[i] * self.cell_volume))
            .collect();
        let mut out = self.full.apply_transpose(&scaled);
        for j in 0..out.len() {
            out[j] /= u[j];
        }
        out
    }

    /// Fokker-Planck right-hand side for densities w.r.t. `nu = m dx`:
    /// the adjoint in `L^2(nu)`.
    pub fn apply_fokker_planck(&self, rho: &[f64]) -> Vec<f64> {
        self.apply_adjoint(rho, &self.m)
    }

    /// Weighted inner product `sum f g u V`.
    pub fn inner(&self, f: &[f64], g: &[f64], u: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..f.len())
            .map(|i| f[i] * g[i] * u[i] * self.cell_volume)
            .collect();
        pairwise_sum(&terms)
    }

    /// True for nodes at least `margin` cells from every face.
    pub fn interior_mask(&self, margin: usize) -> Vec<bool> {
        (0..self.n_nodes())
            .map(|flat| {
                let idx = flat_to_multi(flat, &self.spec.nodes);
                idx.iter()
                    .zip(self.spec.nodes.iter())
                    .all(|(&i, &n)| i >= margin && i + margin < n)
            })
            .collect()
    }

    /// `(sym_defect, antisym_defect)`: relative Frobenius defects of
    /// `W L_s` from symmetry and `W L_a` from antisymmetry, measured on
    /// the interior block (boundary closure rows/columns excluded, like
    /// every other grid certificate).
    pub fn symmetry_split_defects(&self) -> (f64, f64) {
        let mask = self.interior_mask(INTERIOR_MARGIN);
        let (sym_norm, sym_defect) = self.sym.masked_norm_and_transpose_defect(1.0, &mask);
        let (anti_norm, anti_defect) = self.anti.masked_norm_and_transpose_defect(-1.0, &mask);
        (
            sym_defect / sym_norm.max(f64::MIN_POSITIVE),
            anti_defect / anti_norm.max(f64::MIN_POSITIVE),
        )
    }
}

/// Interior margin (in cells) excluded from grid certificates.
pub const INTERIOR_MARGIN: usize = 3;

/// `|L*(g)|_2 / |g|_2` over interior nodes, with `g = h(E) e^S` the
/// stationary density w.r.t. `nu` and `L*` the `L^2(nu)` adjoint.
pub fn stationary_residual_grid(
    sys: &GenericSystem,
    spec: &GridSpec,
    h_of_e: Option<&ExprAst>,
) -> Result<f64> {
    let grid = build_grid_generator(sys, spec)?;
    stationary_residual_on(&grid, h_of_e)
}

/// Same certificate on an already-built operator.
pub fn stationary_residual_on(grid: &GridOperator, h_of_e: Option<&ExprAst>) -> Result<f64> {
    let n = grid.n_nodes();
    let mut g = vec![0.0; n];
    for i in 0..n {
        let h = match h_of_e {
            None => 1.0,
            Some(ast) => {
                ast.eval_dual(
                    &DVector::from_element(1, grid.e[i]),
                    DerivOrder::First,
                )?
                .value
            }
        };
        g[i] = h * grid.s[i].exp();
    }
    let residual = grid.apply_fokker_planck(&g);
    let mask = grid.interior_mask(INTERIOR_MARGIN);
    let num: Vec<f64> = (0..n)
        .filter(|&i| mask[i])
        .map(|i| residual[i] * residual[i])
        .collect();
    let den: Vec<f64> = (0..n).filter(|&i| mask[i]).map(|i| g[i] * g[i]).collect();
    let den_sum = pairwise_sum(&den);
    if den_sum == 0.0 {
        return Err(Error::Config(
            "stationary density vanishes on the interior".into(),
        ));
    }
    Ok((pairwise_sum(&num) / den_sum).sqrt())
}

/// Relative symmetry/antisymmetry defects of the split operator.
pub fn symmetry_split_check(sys: &GenericSystem, spec: &GridSpec) -> Result<(f64, f64)> {
    Ok(build_grid_generator(sys, spec)?.symmetry_split_defects())
}

/// Non-negative density on the grid.
#[derive(Clone, Debug)]
pub struct GridDensity {
    pub values: Vec<f64>,
}

impl GridDensity {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Config("grid density must be finite and >= 0".into()));
        }
        Ok(GridDensity { values })
    }

    /// Quadrature of `rho m` over the grid.
    pub fn mass(&self, grid: &GridOperator) -> f64 {
        let terms: Vec<f64> = (0..self.values.len())
            .map(|i| self.values[i] * grid.m[i] * grid.cell_volume)
            .collect();
        pairwise_sum(&terms)
    }
}

/// Relative-entropy observable `int (S - log rho) rho m dx`; nodes with
/// `rho = 0` contribute 0.
pub fn relative_entropy(rho: &GridDensity, grid: &GridOperator) -> f64 {
    let terms: Vec<f64> = (0..rho.values.len())
        .map(|i| {
            let r = rho.values[i];
            if r <= 0.0 {
                0.0
            } else {
                (grid.s[i] - r.ln()) * r * grid.m[i] * grid.cell_volume
            }
        })
        .collect();
    pairwise_sum(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expression;
    use crate::rng::KeyedStream;
    use crate::system;
    use approx::assert_relative_eq;

    #[test]
    fn interior_stencil_is_five_point_laplacian() {
        // K = I, m = 1, J = 0, S = 0 on [-1, 1]^2.
        let spec = system::SystemSpec::Custom(system::CustomSystemSpec {
            dim: 2,
            energy: "0".into(),
            entropy: "0".into(),
            density: None,
            j_entries: vec![],
            k_entries: vec![(1, 1, "1".into()), (2, 2, "1".into())],
            bounds: Some(vec![(-1.0, 1.0), (-1.0, 1.0)]),
            frames: None,
            label: Some("flat laplacian".into()),
        });
        let sys = system::load_system(&spec).unwrap();
        let grid_spec = GridSpec::uniform(vec![(-1.0, 1.0); 2], 20);
        let grid = build_grid_generator(&sys, &grid_spec).unwrap();
        let h = grid.h()[0];
        // Pick an interior node and apply to the coordinate delta functions.
        let center = grid.nearest_node(&DVector::from_row_slice(&[0.05, 0.05]));
        let n = grid.n_nodes();
        let mut f = vec![0.0; n];
        f[center] = 1.0;
        let lf = grid.apply(&f);
        assert_relative_eq!(lf[center], -4.0 / (h * h), epsilon = 1e-9);
        let up = neighbor(center, 0, 1, &grid.spec().nodes).unwrap();
        assert_relative_eq!(lf[up], 1.0 / (h * h), epsilon = 1e-9);
        // Row support: 5 nonzeros on the interior.
        let nnz = grid
            .full
            .row(center)
            .filter(|(_, v)| v.abs() > 1e-14)
            .count();
        assert_eq!(nnz, 5);
    }

    #[test]
    fn grid_generator_matches_pointwise_generator() {
        // L(x1^2) on the OU system at an interior node, O(h^2) accurate,
        // and the rate check under refinement.
        let sys = system::make_ou_gradient(2).unwrap();
        let probe = DVector::from_row_slice(&[1.0, 0.0]);
        let f = |x: &Point| x[0] * x[0];
        let mut errors = Vec::new();
        for n in [32, 64, 128] {
            let grid =
                build_grid_generator(&sys, &GridSpec::uniform(vec![(-4.0, 4.0); 2], n)).unwrap();
            let lf = grid.apply(&grid.sample(f));
            let node = grid.nearest_node(&probe);
            let x = grid.point(node);
            // Continuous value: -2 x1^2 + 2 at the actual node position.
            let exact = -2.0 * x[0] * x[0] + 2.0;
            errors.push((lf[node] - exact).abs());
        }
        assert!(errors[0] / errors[1] > 3.0, "rate: {errors:?}");
        assert!(errors[1] / errors[2] > 3.0, "rate: {errors:?}");
        assert!(errors[2] < 1e-2, "absolute error {:.3e}", errors[2]);
    }

    #[test]
    fn rigid_body_rows_within_stencil_bound() {
        let entropy = parse_expression("-x1", 1).unwrap();
        let sys = system::make_rigid_body(0.5, &entropy).unwrap();
        let grid =
            build_grid_generator(&sys, &GridSpec::uniform(vec![(-2.0, 2.0); 3], 20)).unwrap();
        for i in 0..grid.n_nodes() {
            let nnz = grid.full.row(i).count();
            assert!(nnz <= 19, "row {i} has {nnz} entries");
        }
    }

    #[test]
    fn grid_refusals() {
        let sys = system::make_ou_gradient(2).unwrap();
        assert!(matches!(
            build_grid_generator(&sys, &GridSpec::uniform(vec![(-1.0, 1.0); 2], 8)),
            Err(Error::GridRefused { .. })
        ));
        assert!(matches!(
            build_grid_generator(&sys, &GridSpec::uniform(vec![(-1.0, 1.0); 2], 2100)),
            Err(Error::GridRefused { .. })
        ));
    }

    #[test]
    fn divergence_form_is_exactly_stationary_on_ou() {
        // For g = e^S the weighted-transpose adjoint satisfies
        // L* g = (1/m V) M^T 1 = 0 to rounding, because every
        // divergence-form row sums to zero. The discrete operator is
        // exactly stationary, not merely O(h^2).
        let sys = system::make_ou_gradient(2).unwrap();
        for n in [64, 128] {
            let r =
                stationary_residual_grid(&sys, &GridSpec::uniform(vec![(-4.0, 4.0); 2], n), None)
                    .unwrap();
            assert!(r <= 1e-11, "residual {r:.3e} at n = {n}");
        }
    }

    #[test]
    fn stationary_residual_with_energy_window() {
        // Canonical Hamiltonian with a smooth energy window h(E).
        let potential = parse_expression("x1^2/2", 1).unwrap();
        let sys = system::make_canonical_hamiltonian(&potential).unwrap();
        let h = parse_expression("exp(-x1)", 1).unwrap();
        let coarse = stationary_residual_grid(
            &sys,
            &GridSpec::uniform(vec![(-3.0, 3.0); 2], 64),
            Some(&h),
        )
        .unwrap();
        let fine = stationary_residual_grid(
            &sys,
            &GridSpec::uniform(vec![(-3.0, 3.0); 2], 128),
            Some(&h),
        )
        .unwrap();
        let ratio = coarse / fine;
        assert!(
            (2.8..5.5).contains(&ratio),
            "refinement ratio {ratio} ({coarse:.3e} -> {fine:.3e})"
        );
    }

    #[test]
    fn broken_unimodularity_residual_does_not_refine() {
        // J12 = x1, m = 1 violates div(mJ) = 0; with E = x1 + x2 the
        // advection is inconsistent with stationarity of e^S.
        let spec = system::SystemSpec::Custom(system::CustomSystemSpec {
            dim: 2,
            energy: "x1 + x2".into(),
            entropy: "-(x1^2 + x2^2)/2".into(),
            density: None,
            j_entries: vec![(1, 2, "x1".into())],
            k_entries: vec![(1, 1, "1".into()), (2, 2, "1".into())],
            bounds: Some(vec![(-4.0, 4.0), (-4.0, 4.0)]),
            frames: None,
            label: Some("broken unimodularity".into()),
        });
        let sys = system::load_system(&spec).unwrap();
        let coarse =
            stationary_residual_grid(&sys, &GridSpec::uniform(vec![(-4.0, 4.0); 2], 64), None)
                .unwrap();
        let fine =
            stationary_residual_grid(&sys, &GridSpec::uniform(vec![(-4.0, 4.0); 2], 128), None)
                .unwrap();
        assert!(coarse > 1e-2, "coarse residual {coarse:.3e}");
        assert!(fine > 1e-2, "fine residual {fine:.3e}");
        let ratio = coarse / fine;
        assert!(ratio < 2.0, "broken residual should not refine: {ratio}");
    }

    #[test]
    fn discrete_duality_holds_to_rounding() {
        let sys = system::make_ou_gradient(2).unwrap();
        let grid =
            build_grid_generator(&sys, &GridSpec::uniform(vec![(-4.0, 4.0); 2], 32)).unwrap();
        let n = grid.n_nodes();
        let mut stream = KeyedStream::new(55, crate::rng::stream::AUX);
        for _ in 0..5 {
            let f: Vec<f64> = (0..n).map(|_| stream.next_in(-1.0, 1.0)).collect();
            let g: Vec<f64> = (0..n).map(|_| stream.next_in(-1.0, 1.0)).collect();
            let lg = grid.apply(&g);
            let lstar_f = grid.apply_adjoint(&f, grid.weight());
            let a = grid.inner(&f, &lg, grid.weight());
            let b = grid.inner(&lstar_f, &g, grid.weight());
            let fn2 = grid.inner(&f, &f, grid.weight()).sqrt();
            let gn2 = grid.inner(&g, &g, grid.weight()).sqrt();
            assert!(
                (a - b).abs() <= 1e-12 * fn2 * gn2 * grid.full.frobenius().max(1.0),
                "duality defect {:.3e}",
                (a - b).abs()
            );
        }
    }

    #[test]
    fn symmetry_split_defects_behave() {
        // L_s is symmetric by construction; L_a = 0 for the OU system.
        let sys = system::make_ou_gradient(2).unwrap();
        let (sym_defect, anti_defect) =
            symmetry_split_check(&sys, &GridSpec::uniform(vec![(-4.0, 4.0); 2], 32)).unwrap();
        assert!(sym_defect <= 1e-12, "sym defect {sym_defect:.3e}");
        assert!(anti_defect <= 1e-12, "anti defect {anti_defect:.3e}");

        // Rigid body with anisotropic inertia (so J grad E != 0): the
        // antisymmetry defect is the O(h^2) diagonal correction,
        // decreasing under refinement.
        let entropy = parse_expression("-x1", 1).unwrap();
        let sys = system::make_rigid_body_with_inertia(0.5, &entropy, [1.0, 2.0, 4.0]).unwrap();
        let (s1, a1) =
            symmetry_split_check(&sys, &GridSpec::uniform(vec![(-2.0, 2.0); 3], 24)).unwrap();
        let (s2, a2) =
            symmetry_split_check(&sys, &GridSpec::uniform(vec![(-2.0, 2.0); 3], 48)).unwrap();
        assert!(s1 <= 1e-12 && s2 <= 1e-12);
        assert!(a1 > 0.0 && a2 > 0.0);
        assert!(a1 / a2 > 3.0, "antisym defect rate {a1:.3e} -> {a2:.3e}");
    }

    #[test]
    fn relative_entropy_identities() {
        let sys = system::make_ou_gradient(2).unwrap();
        let grid =
            build_grid_generator(&sys, &GridSpec::uniform(vec![(-5.0, 5.0); 2], 64)).unwrap();
        // rho = e^S / Z: entropy observable equals log Z.
        let es: Vec<f64> = grid.entropy_samples().iter().map(|s| s.exp()).collect();
        let z = GridDensity::new(es.clone()).unwrap().mass(&grid);
        let rho = GridDensity::new(es.iter().map(|v| v / z).collect()).unwrap();
        assert_relative_eq!(relative_entropy(&rho, &grid), z.ln(), epsilon = 1e-10);
        // rho = e^S unnormalized: observable is 0.
        let rho = GridDensity::new(es).unwrap();
        assert!(relative_entropy(&rho, &grid).abs() < 1e-10);
        // Point-mass-like density: large negative.
        let mut spike = vec![0.0; grid.n_nodes()];
        spike[grid.nearest_node(&DVector::from_row_slice(&[0.0, 0.0]))] = 1e6;
        let rho = GridDensity::new(spike).unwrap();
        assert!(relative_entropy(&rho, &grid) < -1.0);
    }

    #[test]
    fn fokker_planck_euler_keeps_entropy_observable_non_decreasing() {
        let sys = system::make_ou_gradient(2).unwrap();
        let grid =
            build_grid_generator(&sys, &GridSpec::uniform(vec![(-4.0, 4.0); 2], 48)).unwrap();
        // Positive initial density away from stationarity.
        let mut rho: Vec<f64> = grid.sample(|x| {
            (-0.5 * ((x[0] - 0.6) * (x[0] - 0.6) + (x[1] + 0.4) * (x[1] + 0.4)) / 0.6).exp()
        });
        let h = grid.h()[0];
        let dt = 0.2 * h * h / 4.0;
        let mut prev = relative_entropy(&GridDensity::new(rho.clone()).unwrap(), &grid);
        for _ in 0..100 {
            let rhs = grid.apply_fokker_planck(&rho);
            for i in 0..rho.len() {
                rho[i] = (rho[i] + dt * rhs[i]).max(0.0);
            }
            let s = relative_entropy(&GridDensity::new(rho.clone()).unwrap(), &grid);
            assert!(
                s >= prev - 1e-10,
                "entropy observable decreased: {prev} -> {s}"
            );
            prev = s;
        }
    }
}
