//! The SPH difference operators, the discrete inner product and the discrete Sobolev
//! (semi-)norms, all restricted to an index set `Λ`.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Mul, Sub};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{IsphError, Result};
use crate::linalg::{conjugate_gradient, CsrMatrix, IterativeSettings};
use crate::neighbors::Interactions;
use crate::state::{ParticleState, Role};
use crate::Vector;

const PARALLEL_THRESHOLD: usize = 512;

/// Components of `Mφ` along the null space of the Gram form larger than this (relative)
/// make the H⁻¹ seminorm infinite. The same cut is applied to normalized eigenvalues.
pub const NULL_SPACE_TOL: f64 = 1e-10;

/// Largest connected block handled by dense factorizations in the H⁻¹ seminorm.
const DENSE_LIMIT: usize = 500;

/// A sorted subset of `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSet {
    n: usize,
    members: Vec<usize>,
    mask: Vec<bool>,
}

impl IndexSet {
    pub fn new(n: usize, mut members: Vec<usize>) -> Result<Self> {
        members.sort_unstable();
        members.dedup();
        if members.last().is_some_and(|&m| m >= n) {
            return Err(IsphError::Usage(format!("index out of range for {n} particles")));
        }
        let mut mask = vec![false; n];
        for &m in &members {
            mask[m] = true;
        }
        Ok(Self { n, members, mask })
    }

    pub fn all(n: usize) -> Self {
        Self {
            n,
            members: (0..n).collect(),
            mask: vec![true; n],
        }
    }

    pub fn from_mask(mask: Vec<bool>) -> Self {
        let members = (0..mask.len()).filter(|&i| mask[i]).collect();
        Self {
            n: mask.len(),
            members,
            mask,
        }
    }

    /// Size of the ambient particle set.
    pub fn universe(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    #[inline]
    pub fn contains(&self, i: usize) -> bool {
        i < self.n && self.mask[i]
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
}

/// Values a discrete field can take: scalars or vectors.
pub trait FieldValue:
    Copy
    + Debug
    + PartialEq
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<f64, Output = Self>
    + AddAssign
    + 'static
{
    const COMPONENTS: usize;
    fn zero() -> Self;
    fn dot(&self, other: &Self) -> f64;
    fn component(&self, c: usize) -> f64;
    fn norm_squared(&self) -> f64 {
        self.dot(self)
    }
}

impl FieldValue for f64 {
    const COMPONENTS: usize = 1;
    fn zero() -> Self {
        0.0
    }
    fn dot(&self, other: &Self) -> f64 {
        self * other
    }
    fn component(&self, _: usize) -> f64 {
        *self
    }
}

impl FieldValue for Vector {
    const COMPONENTS: usize = 3;
    fn zero() -> Self {
        Vector::zeros()
    }
    fn dot(&self, other: &Self) -> f64 {
        nalgebra::Matrix::dot(self, other)
    }
    fn component(&self, c: usize) -> f64 {
        self[c]
    }
}

/// A field defined on the indices of `Λ`. Values are stored densely over all particles;
/// entries outside `Λ` are zero and never read.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldOnIndices<T: FieldValue> {
    index: IndexSet,
    values: Vec<T>,
}

pub type ScalarField = FieldOnIndices<f64>;
pub type VectorField = FieldOnIndices<Vector>;

impl<T: FieldValue> FieldOnIndices<T> {
    /// Values listed in the order of `index.members()`.
    pub fn from_local(index: IndexSet, local: &[T]) -> Result<Self> {
        if local.len() != index.len() {
            return Err(IsphError::Usage(format!(
                "{} values for an index set of size {}",
                local.len(),
                index.len()
            )));
        }
        let mut values = vec![T::zero(); index.universe()];
        for (&m, v) in index.members().iter().zip(local) {
            values[m] = *v;
        }
        Ok(Self { index, values })
    }

    /// Values indexed by particle; entries outside `index` are ignored.
    pub fn from_global(index: IndexSet, global: &[T]) -> Result<Self> {
        if global.len() != index.universe() {
            return Err(IsphError::Usage(format!(
                "{} values for {} particles",
                global.len(),
                index.universe()
            )));
        }
        let values = (0..global.len())
            .map(|i| if index.contains(i) { global[i] } else { T::zero() })
            .collect();
        Ok(Self { index, values })
    }

    pub fn constant(index: IndexSet, value: T) -> Self {
        let values = (0..index.universe())
            .map(|i| if index.contains(i) { value } else { T::zero() })
            .collect();
        Self { index, values }
    }

    pub fn zeros(index: IndexSet) -> Self {
        Self::constant(index, T::zero())
    }

    pub fn index(&self) -> &IndexSet {
        &self.index
    }

    pub fn get(&self, i: usize) -> Result<T> {
        if !self.index.contains(i) {
            return Err(IsphError::Usage(format!("index {i} is not in the field's index set")));
        }
        Ok(self.values[i])
    }

    /// Dense per-particle view; zero outside the index set.
    pub fn global(&self) -> &[T] {
        &self.values
    }

    pub fn local(&self) -> Vec<T> {
        self.index.members().iter().map(|&i| self.values[i]).collect()
    }

    /// Same values seen through a sub-index set (or any set, reading zero outside).
    pub fn restrict(&self, index: &IndexSet) -> Result<Self> {
        if index.universe() != self.index.universe() {
            return Err(IsphError::Usage("index sets refer to different particle counts".into()));
        }
        let values = (0..self.values.len())
            .map(|i| if index.contains(i) { self.values[i] } else { T::zero() })
            .collect();
        Ok(Self {
            index: index.clone(),
            values,
        })
    }

    pub fn map<U: FieldValue>(&self, f: impl Fn(T) -> U) -> FieldOnIndices<U> {
        let values = (0..self.values.len())
            .map(|i| if self.index.contains(i) { f(self.values[i]) } else { U::zero() })
            .collect();
        FieldOnIndices {
            index: self.index.clone(),
            values,
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.index != other.index {
            return Err(IsphError::Usage("fields live on different index sets".into()));
        }
        let values = (0..self.values.len())
            .map(|i| {
                if self.index.contains(i) {
                    f(self.values[i], other.values[i])
                } else {
                    T::zero()
                }
            })
            .collect();
        Ok(Self {
            index: self.index.clone(),
            values,
        })
    }
}

/// The space of trial functions in the H⁻¹ supremum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialSpace {
    /// Trial functions vanish on the wall indices of `Λ`, as velocities do.
    WallPinned,
    /// Every function on `Λ`.
    Unconstrained,
}

/// Operator context: pair table, volumes and roles of one particle state.
#[derive(Debug, Clone, Copy)]
pub struct Operators<'a> {
    inter: &'a Interactions,
    volumes: &'a [f64],
    roles: &'a [Role],
}

fn map_indices<R: Send>(members: &[usize], f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    if members.len() >= PARALLEL_THRESHOLD {
        members.par_iter().map(|&i| f(i)).collect()
    } else {
        members.iter().map(|&i| f(i)).collect()
    }
}

impl<'a> Operators<'a> {
    pub fn new(state: &'a ParticleState, inter: &'a Interactions) -> Result<Self> {
        Self::from_parts(inter, state.volumes(), state.roles())
    }

    pub fn from_parts(inter: &'a Interactions, volumes: &'a [f64], roles: &'a [Role]) -> Result<Self> {
        if inter.len() != volumes.len() || roles.len() != volumes.len() {
            return Err(IsphError::Usage(
                "pair table, volumes and roles disagree in size".into(),
            ));
        }
        Ok(Self { inter, volumes, roles })
    }

    pub fn interactions(&self) -> &Interactions {
        self.inter
    }

    pub fn volumes(&self) -> &[f64] {
        self.volumes
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    fn check_field<T: FieldValue>(&self, f: &FieldOnIndices<T>) -> Result<()> {
        if f.index.universe() != self.len() {
            return Err(IsphError::Usage(format!(
                "field over {} particles used with a {}-particle state",
                f.index.universe(),
                self.len()
            )));
        }
        Ok(())
    }

    fn check_member<T: FieldValue>(&self, f: &FieldOnIndices<T>, i: usize) -> Result<()> {
        self.check_field(f)?;
        if !f.index.contains(i) {
            return Err(IsphError::Usage(format!("index {i} is not in the field's index set")));
        }
        Ok(())
    }

    #[inline]
    fn laplacian_unchecked<T: FieldValue>(&self, f: &FieldOnIndices<T>, i: usize) -> T {
        let phi = &f.values;
        let mut acc = T::zero();
        for p in self.inter.neighbors(i) {
            if f.index.mask[p.j] {
                acc += (phi[i] - phi[p.j]) * (self.volumes[p.j] * p.b);
            }
        }
        acc * -1.0
    }

    /// `2 Σ_{j∈Λ, j≠i} V_j (φ_i - φ_j) / r_ij · e_ij · ∇w_h(r_ij) = -Σ V_j B_ij (φ_i - φ_j)`.
    pub fn laplacian_at<T: FieldValue>(&self, f: &FieldOnIndices<T>, i: usize) -> Result<T> {
        self.check_member(f, i)?;
        Ok(self.laplacian_unchecked(f, i))
    }

    pub fn laplacian<T: FieldValue>(&self, f: &FieldOnIndices<T>) -> Result<FieldOnIndices<T>> {
        self.check_field(f)?;
        let local = map_indices(f.index.members(), |i| self.laplacian_unchecked(f, i));
        FieldOnIndices::from_local(f.index.clone(), &local)
    }

    #[inline]
    fn divergence_unchecked(&self, f: &VectorField, i: usize) -> f64 {
        let u = &f.values;
        let mut acc = 0.0;
        for p in self.inter.neighbors(i) {
            if f.index.mask[p.j] {
                acc += self.volumes[p.j] * (u[p.j] + u[i]).dot(&p.grad);
            }
        }
        acc
    }

    /// `D⁺φ_i = Σ_{j∈Λ} V_j (φ_j + φ_i) · ∇w_h(x_i - x_j)`.
    pub fn divergence_plus_at(&self, f: &VectorField, i: usize) -> Result<f64> {
        self.check_member(f, i)?;
        Ok(self.divergence_unchecked(f, i))
    }

    pub fn divergence_plus(&self, f: &VectorField) -> Result<ScalarField> {
        self.check_field(f)?;
        let local = map_indices(f.index.members(), |i| self.divergence_unchecked(f, i));
        FieldOnIndices::from_local(f.index.clone(), &local)
    }

    #[inline]
    fn gradient_unchecked(&self, f: &ScalarField, i: usize) -> Vector {
        let q = &f.values;
        let mut acc = Vector::zeros();
        for p in self.inter.neighbors(i) {
            if f.index.mask[p.j] {
                acc += p.grad * (self.volumes[p.j] * (q[p.j] - q[i]));
            }
        }
        acc
    }

    /// `G⁻ψ_i = Σ_{j∈Λ} V_j (ψ_j - ψ_i) ∇w_h(x_i - x_j)`.
    pub fn gradient_minus_at(&self, f: &ScalarField, i: usize) -> Result<Vector> {
        self.check_member(f, i)?;
        Ok(self.gradient_unchecked(f, i))
    }

    pub fn gradient_minus(&self, f: &ScalarField) -> Result<VectorField> {
        self.check_field(f)?;
        let local = map_indices(f.index.members(), |i| self.gradient_unchecked(f, i));
        FieldOnIndices::from_local(f.index.clone(), &local)
    }

    /// `⟨φ, ψ⟩_Λ = Σ_{i∈Λ} V_i φ_i · ψ_i`.
    pub fn inner_product<T: FieldValue>(&self, a: &FieldOnIndices<T>, b: &FieldOnIndices<T>) -> Result<f64> {
        self.check_field(a)?;
        if a.index != b.index {
            return Err(IsphError::Usage(
                "inner product of fields on different index sets".into(),
            ));
        }
        Ok(a.index
            .members()
            .iter()
            .map(|&i| self.volumes[i] * a.values[i].dot(&b.values[i]))
            .sum())
    }

    pub fn l2_norm<T: FieldValue>(&self, f: &FieldOnIndices<T>) -> Result<f64> {
        Ok(self.inner_product(f, f)?.sqrt())
    }

    /// `|φ|₁² = Σ_{i∈Λ} V_i Σ_{j∈Λ, j≠i} V_j |φ_i - φ_j|² |ẇ_h| / r_ij`.
    pub fn h1_seminorm_squared<T: FieldValue>(&self, f: &FieldOnIndices<T>) -> Result<f64> {
        self.check_field(f)?;
        let phi = &f.values;
        let rows = map_indices(f.index.members(), |i| {
            let mut acc = 0.0;
            for p in self.inter.neighbors(i) {
                if f.index.mask[p.j] {
                    acc += self.volumes[p.j] * (phi[i] - phi[p.j]).norm_squared() * (-p.dw / p.r);
                }
            }
            self.volumes[i] * acc
        });
        Ok(rows.iter().sum())
    }

    pub fn h1_seminorm<T: FieldValue>(&self, f: &FieldOnIndices<T>) -> Result<f64> {
        Ok(self.h1_seminorm_squared(f)?.sqrt())
    }

    /// Indices of `Λ` whose trial values are free, and the pinned ones.
    fn trial_split(&self, index: &IndexSet, trial: TrialSpace) -> (Vec<usize>, Vec<bool>) {
        let mut free = Vec::new();
        let mut pinned = vec![false; self.len()];
        for &i in index.members() {
            if trial == TrialSpace::WallPinned && self.roles[i] == Role::Wall {
                pinned[i] = true;
            } else {
                free.push(i);
            }
        }
        (free, pinned)
    }

    /// Connected components of the free vertices (edges where `B_ij > 0` inside `Λ`),
    /// each flagged as anchored when it touches a pinned vertex.
    fn trial_components(&self, index: &IndexSet, free: &[usize], pinned: &[bool]) -> Vec<(Vec<usize>, bool)> {
        let mut is_free = vec![false; self.len()];
        for &i in free {
            is_free[i] = true;
        }
        let mut seen = vec![false; self.len()];
        let mut out = Vec::new();
        for &start in free {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start];
            let mut anchored = false;
            let mut head = 0;
            while head < comp.len() {
                let i = comp[head];
                head += 1;
                for p in self.inter.neighbors(i) {
                    if !index.contains(p.j) || p.b <= 0.0 {
                        continue;
                    }
                    if pinned[p.j] {
                        anchored = true;
                    } else if is_free[p.j] && !seen[p.j] {
                        seen[p.j] = true;
                        comp.push(p.j);
                    }
                }
            }
            comp.sort_unstable();
            out.push((comp, anchored));
        }
        out
    }

    /// Gram matrix of `|·|₁²` restricted to `block`, with `Λ` neighbours outside the
    /// block (pinned vertices) contributing only to the diagonal.
    fn gram_block(&self, index: &IndexSet, block: &[usize]) -> DMatrix<f64> {
        let n = block.len();
        let mut local = vec![usize::MAX; self.len()];
        for (k, &i) in block.iter().enumerate() {
            local[i] = k;
        }
        let mut g = DMatrix::zeros(n, n);
        for (a, &i) in block.iter().enumerate() {
            for p in self.inter.neighbors(i) {
                if !index.contains(p.j) {
                    continue;
                }
                let w = self.volumes[i] * self.volumes[p.j] * p.b;
                g[(a, a)] += w;
                if local[p.j] != usize::MAX {
                    g[(a, local[p.j])] -= w;
                }
            }
        }
        g
    }

    fn gram_block_sparse(&self, index: &IndexSet, block: &[usize]) -> CsrMatrix {
        let mut local = vec![usize::MAX; self.len()];
        for (k, &i) in block.iter().enumerate() {
            local[i] = k;
        }
        let rows = block
            .iter()
            .enumerate()
            .map(|(a, &i)| {
                let mut row = Vec::new();
                let mut diag = 0.0;
                for p in self.inter.neighbors(i) {
                    if !index.contains(p.j) {
                        continue;
                    }
                    let w = self.volumes[i] * self.volumes[p.j] * p.b;
                    diag += w;
                    if local[p.j] != usize::MAX {
                        row.push((local[p.j], -w));
                    }
                }
                row.push((a, diag));
                row
            })
            .collect();
        CsrMatrix::from_rows(block.len(), rows).expect("local indices in range")
    }

    /// `gᵀ G⁺ g` by eigendecomposition, or `None` when `g` has a null-space component.
    fn spectral_quadratic(g_mat: DMatrix<f64>, g: &DVector<f64>) -> Option<f64> {
        let gnorm = g.norm();
        if gnorm == 0.0 {
            return Some(0.0);
        }
        let eig = g_mat.symmetric_eigen();
        let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
        let mut total = 0.0;
        for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
            let c = eig.eigenvectors.column(k).dot(g);
            if lmax == 0.0 || lambda.abs() <= NULL_SPACE_TOL * lmax {
                if c.abs() > NULL_SPACE_TOL * gnorm {
                    return None;
                }
            } else {
                total += c * c / lambda;
            }
        }
        Some(total)
    }

    /// `|φ|₋₁ = sup_ψ ⟨φ, ψ⟩_Λ / |ψ|₁` over the chosen trial space; `+∞` when the supremum
    /// is unbounded. Vector fields add their squared component values.
    pub fn h_minus1_seminorm<T: FieldValue>(&self, f: &FieldOnIndices<T>, trial: TrialSpace) -> Result<f64> {
        self.check_field(f)?;
        let (free, pinned) = self.trial_split(&f.index, trial);
        let mut total = 0.0;
        for (block, anchored) in self.trial_components(&f.index, &free, &pinned) {
            for c in 0..T::COMPONENTS {
                let g = DVector::from_iterator(
                    block.len(),
                    block.iter().map(|&i| self.volumes[i] * f.values[i].component(c)),
                );
                let gnorm = g.norm();
                if gnorm == 0.0 {
                    continue;
                }
                if !anchored {
                    // The block's Gram form annihilates constants and nothing else.
                    let mean = g.sum() / (block.len() as f64).sqrt();
                    if mean.abs() > NULL_SPACE_TOL * gnorm {
                        return Ok(f64::INFINITY);
                    }
                }
                let value = if block.len() <= DENSE_LIMIT {
                    let gm = self.gram_block(&f.index, &block);
                    let chol = if anchored { gm.clone().cholesky() } else { None };
                    match chol {
                        Some(ch) => g.dot(&ch.solve(&g)),
                        None => match Self::spectral_quadratic(gm, &g) {
                            Some(v) => v,
                            None => return Ok(f64::INFINITY),
                        },
                    }
                } else {
                    let gm = self.gram_block_sparse(&f.index, &block);
                    let mut rhs: Vec<f64> = g.iter().copied().collect();
                    if !anchored {
                        let m = rhs.iter().sum::<f64>() / rhs.len() as f64;
                        rhs.iter_mut().for_each(|v| *v -= m);
                    }
                    let settings = IterativeSettings {
                        rel_tol: 1e-12,
                        max_iter_factor: 10,
                        jacobi: true,
                    };
                    let y = conjugate_gradient(&gm, &rhs, &settings)?.x;
                    rhs.iter().zip(&y).map(|(a, b)| a * b).sum()
                };
                total += value.max(0.0);
            }
        }
        Ok(total.sqrt())
    }

    /// The same seminorm computed from one eigendecomposition of the whole Gram form.
    /// Cubic in `|Λ|`; kept as a cross-check for the component-wise route above.
    pub fn h_minus1_seminorm_spectral<T: FieldValue>(&self, f: &FieldOnIndices<T>, trial: TrialSpace) -> Result<f64> {
        self.check_field(f)?;
        let (free, _) = self.trial_split(&f.index, trial);
        let gm = self.gram_block(&f.index, &free);
        let mut total = 0.0;
        for c in 0..T::COMPONENTS {
            let g = DVector::from_iterator(
                free.len(),
                free.iter().map(|&i| self.volumes[i] * f.values[i].component(c)),
            );
            match Self::spectral_quadratic(gm.clone(), &g) {
                Some(v) => total += v.max(0.0),
                None => return Ok(f64::INFINITY),
            }
        }
        Ok(total.sqrt())
    }

    /// `|ψ|₁²` as the explicit Gram quadratic form on the free indices of `ψ`'s support
    /// when pinned values are zero; used by tests of the assembly.
    pub fn gram_matrix(&self, index: &IndexSet, trial: TrialSpace) -> (Vec<usize>, DMatrix<f64>) {
        let (free, _) = self.trial_split(index, trial);
        let g = self.gram_block(index, &free);
        (free, g)
    }
}

/// Direct transcriptions of the operator formulas, summing over every pair and evaluating
/// the kernel gradient afresh. Quadratic cost; used to validate the pair-table versions.
pub mod oracle {
    use super::*;
    use crate::kernels::KernelSpec;

    pub struct Oracle<'a> {
        pub positions: &'a [Vector],
        pub volumes: &'a [f64],
        pub kernel: &'a KernelSpec,
    }

    impl Oracle<'_> {
        fn grad(&self, i: usize, j: usize) -> Vector {
            self.kernel.grad_wh(&(self.positions[i] - self.positions[j]))
        }

        pub fn laplacian<T: FieldValue>(&self, f: &FieldOnIndices<T>, i: usize) -> T {
            let mut acc = T::zero();
            for &j in f.index().members() {
                if j == i {
                    continue;
                }
                let d = self.positions[i] - self.positions[j];
                let r = d.norm();
                let e = d / r;
                let coef = 2.0 * self.volumes[j] * e.dot(&self.grad(i, j)) / r;
                acc += (f.global()[i] - f.global()[j]) * coef;
            }
            acc
        }

        pub fn divergence_plus(&self, f: &VectorField, i: usize) -> f64 {
            f.index()
                .members()
                .iter()
                .map(|&j| self.volumes[j] * (f.global()[j] + f.global()[i]).dot(&self.grad(i, j)))
                .sum()
        }

        pub fn gradient_minus(&self, f: &ScalarField, i: usize) -> Vector {
            f.index()
                .members()
                .iter()
                .map(|&j| self.grad(i, j) * (self.volumes[j] * (f.global()[j] - f.global()[i])))
                .fold(Vector::zeros(), |a, b| a + b)
        }

        pub fn h1_seminorm_squared<T: FieldValue>(&self, f: &FieldOnIndices<T>) -> f64 {
            let m = f.index().members();
            let mut total = 0.0;
            for &i in m {
                for &j in m {
                    if i == j {
                        continue;
                    }
                    let r = (self.positions[i] - self.positions[j]).norm();
                    let dw = self.kernel.dwh(r).abs();
                    total += self.volumes[i]
                        * self.volumes[j]
                        * (f.global()[i] - f.global()[j]).norm_squared()
                        * dw
                        / r;
                }
            }
            total
        }
    }
}
