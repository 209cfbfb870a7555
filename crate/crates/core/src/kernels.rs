//! ARD squared-exponential kernel, its derivative blocks, and assembly of the
//! value/derivative kernel matrices.
//!
//! Every matrix entry is a covariance between two *features*: a point paired
//! with either its function value, a partial derivative along one axis, or a
//! directional derivative along a direction vector. With `δ = x₁ − x₂`,
//! `W = diag(1/ℓ²)`, `r = Wδ` and `k = σ² exp(−½ δᵀWδ)`:
//!
//! | row \ col | value    | along `b`                 |
//! |-----------|----------|---------------------------|
//! | value     | `k`      | `k (r·b)`                 |
//! | along `a` | `−k (r·a)` | `k (aᵀWb − (r·a)(r·b))` |
//!
//! Axis directions are never expanded into dense unit vectors, and no D×D
//! block is ever formed during assembly.
//!
//! Augmented inducing matrices are ordered `[M values | M·p directional
//! derivatives, point-major]`, i.e. the derivative of point `m` along its
//! `t`-th direction sits at index `M + m·p + t`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Kernel and likelihood hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfParams {
    pub lengthscales: Vec<f64>,
    pub outputscale: f64,
    pub mean_const: f64,
    pub noise_label: f64,
    pub noise_grad: f64,
}

impl RbfParams {
    pub fn isotropic(dim: usize, lengthscale: f64, outputscale: f64) -> Self {
        Self {
            lengthscales: vec![lengthscale; dim],
            outputscale,
            mean_const: 0.0,
            noise_label: 1e-2,
            noise_grad: 1e-2,
        }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self
            .lengthscales
            .iter()
            .chain([&self.outputscale, &self.noise_label, &self.noise_grad])
            .all(|&v| v > 0.0 && v.is_finite());
        if !positive || !self.mean_const.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "kernel parameters must be finite and positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Inverse squared lengthscales, the diagonal of `W`.
    pub fn precisions(&self) -> Vec<f64> {
        self.lengthscales.iter().map(|l| 1.0 / (l * l)).collect()
    }

    pub fn noise_for(&self, kind: ObsKind) -> f64 {
        match kind {
            ObsKind::Label => self.noise_label,
            ObsKind::Partial(_) => self.noise_grad,
        }
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::dims(
                "kernel",
                format!("point of length {len} against {} lengthscales", self.dim()),
            ));
        }
        Ok(())
    }
}

/// What a scalar observation measures at its point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObsKind {
    Label,
    Partial(usize),
}

/// A scalar observation feature: point index into some data matrix plus kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub point: usize,
    pub kind: ObsKind,
}

/// `p` unit directions per inducing point, stored as an `(M·p) × D` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionSet {
    pub num_points: usize,
    pub per_point: usize,
    pub directions: Matrix,
}

impl DirectionSet {
    pub fn empty(num_points: usize, dim: usize) -> Self {
        Self {
            num_points,
            per_point: 0,
            directions: Matrix::zeros(0, dim),
        }
    }

    pub fn new(num_points: usize, per_point: usize, directions: Matrix) -> Result<Self> {
        if directions.rows() != num_points * per_point {
            return Err(Error::dims(
                "direction set",
                format!(
                    "{} rows for {num_points} points x {per_point} directions",
                    directions.rows()
                ),
            ));
        }
        Ok(Self {
            num_points,
            per_point,
            directions,
        })
    }

    /// The canonical set `Vᵢ = I` (p = D) for every point.
    pub fn canonical(num_points: usize, dim: usize) -> Self {
        let mut d = Matrix::zeros(num_points * dim, dim);
        for m in 0..num_points {
            for j in 0..dim {
                d[(m * dim + j, j)] = 1.0;
            }
        }
        Self {
            num_points,
            per_point: dim,
            directions: d,
        }
    }

    pub fn dim(&self) -> usize {
        self.directions.cols()
    }

    pub fn direction(&self, point: usize, t: usize) -> &[f64] {
        self.directions.row_slice(point * self.per_point + t)
    }

    /// Rescales every direction to unit Euclidean norm. Zero rows are left alone.
    pub fn normalize(&mut self) {
        normalize_rows(&mut self.directions);
    }
}

pub(crate) fn normalize_rows(m: &mut Matrix) {
    for i in 0..m.rows() {
        let row = m.row_slice_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Size of the augmented inducing matrix, `M(p+1)`.
pub fn augmented_size(num_points: usize, per_point: usize) -> usize {
    num_points * (per_point + 1)
}

#[derive(Clone, Copy, Debug)]
pub enum Dir<'a> {
    Value,
    Axis(usize),
    Along(&'a [f64]),
}

impl Dir<'_> {
    fn from_kind(kind: ObsKind) -> Dir<'static> {
        match kind {
            ObsKind::Label => Dir::Value,
            ObsKind::Partial(j) => Dir::Axis(j),
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `r·a`
#[inline]
fn project(dir: Dir<'_>, r: &[f64]) -> f64 {
    match dir {
        Dir::Value => 0.0,
        Dir::Axis(j) => r[j],
        Dir::Along(v) => dot(r, v),
    }
}

/// `aᵀ W b`
#[inline]
fn metric(a: Dir<'_>, b: Dir<'_>, w: &[f64]) -> f64 {
    match (a, b) {
        (Dir::Axis(i), Dir::Axis(j)) => {
            if i == j {
                w[i]
            } else {
                0.0
            }
        }
        (Dir::Axis(i), Dir::Along(v)) | (Dir::Along(v), Dir::Axis(i)) => w[i] * v[i],
        (Dir::Along(u), Dir::Along(v)) => u.iter().zip(v).zip(w).map(|((a, b), c)| a * b * c).sum(),
        _ => 0.0,
    }
}

/// `out += coef · dir`, or `out += coef · W dir` when `w` is given.
#[inline]
fn add_dir(out: &mut [f64], dir: Dir<'_>, coef: f64, w: Option<&[f64]>) {
    match dir {
        Dir::Value => {}
        Dir::Axis(j) => out[j] += coef * w.map_or(1.0, |w| w[j]),
        Dir::Along(v) => match w {
            Some(w) => out
                .iter_mut()
                .zip(v)
                .zip(w)
                .for_each(|((o, v), w)| *o += coef * w * v),
            None => out.iter_mut().zip(v).for_each(|(o, v)| *o += coef * v),
        },
    }
}

/// Shared per-pair quantities: fills `delta`, `r` and returns `k`.
#[inline]
fn pair(x1: &[f64], x2: &[f64], w: &[f64], s: f64, delta: &mut [f64], r: &mut [f64]) -> f64 {
    let mut q = 0.0;
    for d in 0..w.len() {
        let dd = x1[d] - x2[d];
        delta[d] = dd;
        r[d] = dd * w[d];
        q += dd * r[d];
    }
    s * (-0.5 * q).exp()
}

#[inline]
fn entry(k: f64, r: &[f64], w: &[f64], a: Dir<'_>, b: Dir<'_>) -> f64 {
    match (a, b) {
        (Dir::Value, Dir::Value) => k,
        (Dir::Value, b) => k * project(b, r),
        (a, Dir::Value) => -k * project(a, r),
        (a, b) => k * (metric(a, b, w) - project(a, r) * project(b, r)),
    }
}

/// Scratch space for [`pair_backward`], sized for one feature group per side.
struct PairScratch {
    n: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    coef_a: Vec<f64>,
    coef_b: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
    u: Vec<f64>,
}

impl PairScratch {
    fn new(n: usize, fa: usize, fb: usize) -> Self {
        Self {
            n,
            alpha: vec![0.0; fa],
            beta: vec![0.0; fb],
            coef_a: vec![0.0; fa],
            coef_b: vec![0.0; fb],
            p: vec![0.0; fa * n],
            q: vec![0.0; fb * n],
            u: vec![0.0; n],
        }
    }
}

/// Adjoint of one point-pair block `E_tu = k·h_tu(α_t, β_u, c_tu)` with
/// `α_t = r·a_t`, `β_u = r·b_u`, `c_tu = a_tᵀWb_u`, given the block of output
/// gradients `g` (row-major, `fa × fb`).
///
/// Adds into `d_delta` (∂/∂δ), `d_w` (∂/∂w) and the per-feature direction
/// adjoints; returns `Σ g∘E`, which is also the outputscale adjoint times `s`.
#[allow(clippy::too_many_arguments)]
fn pair_backward(
    g: &[f64],
    k: f64,
    delta: &[f64],
    r: &[f64],
    w: &[f64],
    fa: &[(usize, Dir<'_>, Option<usize>)],
    fb: &[(usize, Dir<'_>, Option<usize>)],
    sc: &mut PairScratch,
    d_delta: &mut [f64],
    d_w: &mut [f64],
    d_v: &mut Matrix,
) -> f64 {
    let n = sc.n;
    let (na, nb) = (fa.len(), fb.len());
    for (t, &(_, a, _)) in fa.iter().enumerate() {
        sc.alpha[t] = project(a, r);
    }
    for (u, &(_, b, _)) in fb.iter().enumerate() {
        sc.beta[u] = project(b, r);
    }
    sc.coef_a[..na].iter_mut().for_each(|v| *v = 0.0);
    sc.coef_b[..nb].iter_mut().for_each(|v| *v = 0.0);
    sc.p[..na * n].iter_mut().for_each(|v| *v = 0.0);
    sc.q[..nb * n].iter_mut().for_each(|v| *v = 0.0);
    let mut total = 0.0;
    for (t, &(_, a, _)) in fa.iter().enumerate() {
        let a_val = matches!(a, Dir::Value);
        for (u, &(_, b, _)) in fb.iter().enumerate() {
            let gtu = g[t * nb + u];
            if gtu == 0.0 {
                continue;
            }
            let b_val = matches!(b, Dir::Value);
            let gk = gtu * k;
            match (a_val, b_val) {
                (true, true) => total += gk,
                (true, false) => {
                    total += gk * sc.beta[u];
                    sc.coef_b[u] += gk;
                }
                (false, true) => {
                    total -= gk * sc.alpha[t];
                    sc.coef_a[t] -= gk;
                }
                (false, false) => {
                    total += gk * (metric(a, b, w) - sc.alpha[t] * sc.beta[u]);
                    sc.coef_a[t] -= gk * sc.beta[u];
                    sc.coef_b[u] -= gk * sc.alpha[t];
                    add_dir(&mut sc.p[t * n..(t + 1) * n], b, gk, None);
                    add_dir(&mut sc.q[u * n..(u + 1) * n], a, gk, None);
                }
            }
        }
    }
    // through k: ∂k/∂δ = −k r, ∂k/∂w_d = −½ k δ_d²
    // through α, β: U = Σ A_t a_t + Σ B_u b_u, ∂/∂δ = W U, ∂/∂w = δ∘U
    sc.u.iter_mut().for_each(|v| *v = 0.0);
    for (t, &(_, a, _)) in fa.iter().enumerate() {
        add_dir(&mut sc.u, a, sc.coef_a[t], None);
    }
    for (u, &(_, b, _)) in fb.iter().enumerate() {
        add_dir(&mut sc.u, b, sc.coef_b[u], None);
    }
    for d in 0..n {
        d_delta[d] += w[d] * sc.u[d] - total * r[d];
        d_w[d] += delta[d] * sc.u[d] - 0.5 * total * delta[d] * delta[d];
    }
    // through c: ∂c_tu/∂w = a_t∘b_u, ∂c_tu/∂a_t = W b_u, ∂c_tu/∂b_u = W a_t
    for (t, &(_, a, row)) in fa.iter().enumerate() {
        let pt = &sc.p[t * n..(t + 1) * n];
        match a {
            Dir::Value => {}
            Dir::Axis(j) => d_w[j] += pt[j],
            Dir::Along(v) => d_w
                .iter_mut()
                .zip(v)
                .zip(pt)
                .for_each(|((o, v), p)| *o += v * p),
        }
        if let Some(row) = row {
            let ca = sc.coef_a[t];
            d_v.row_slice_mut(row)
                .iter_mut()
                .zip(r)
                .zip(pt.iter().zip(w))
                .for_each(|((o, r), (p, w))| *o += ca * r + w * p);
        }
    }
    for (u, &(_, _, row)) in fb.iter().enumerate() {
        if let Some(row) = row {
            let qu = &sc.q[u * n..(u + 1) * n];
            let cb = sc.coef_b[u];
            d_v.row_slice_mut(row)
                .iter_mut()
                .zip(r)
                .zip(qu.iter().zip(w))
                .for_each(|((o, r), (q, w))| *o += cb * r + w * q);
        }
    }
    total
}

/// `k(x, x2)`
pub fn k(x: &[f64], x2: &[f64], theta: &RbfParams) -> Result<f64> {
    theta.check_dim(x.len())?;
    theta.check_dim(x2.len())?;
    let w = theta.precisions();
    let q: f64 = (0..x.len()).map(|d| (x[d] - x2[d]).powi(2) * w[d]).sum();
    Ok(theta.outputscale * (-0.5 * q).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    First,
    Second,
}

/// Gradient of `k(x, x2)` with respect to one of its arguments.
pub fn grad_k(x: &[f64], x2: &[f64], theta: &RbfParams, wrt: Wrt) -> Result<Vec<f64>> {
    theta.check_dim(x.len())?;
    theta.check_dim(x2.len())?;
    let w = theta.precisions();
    let n = w.len();
    let (mut delta, mut r) = (vec![0.0; n], vec![0.0; n]);
    let kv = pair(x, x2, &w, theta.outputscale, &mut delta, &mut r);
    let sign = match wrt {
        Wrt::First => -1.0,
        Wrt::Second => 1.0,
    };
    Ok(r.iter().map(|ri| sign * kv * ri).collect())
}

/// Mixed second derivative `∂²k / ∂x ∂x2`, a D×D matrix.
pub fn hess_k(x: &[f64], x2: &[f64], theta: &RbfParams) -> Result<Matrix> {
    theta.check_dim(x.len())?;
    theta.check_dim(x2.len())?;
    let w = theta.precisions();
    let n = w.len();
    let (mut delta, mut r) = (vec![0.0; n], vec![0.0; n]);
    let kv = pair(x, x2, &w, theta.outputscale, &mut delta, &mut r);
    Ok(Matrix::from_fn(n, n, |i, j| {
        entry(kv, &r, &w, Dir::Axis(i), Dir::Axis(j))
    }))
}

/// `[[k, (∇_{x2} k)ᵀ], [∇_x k, ∇²k]]`, a (D+1)×(D+1) matrix.
pub fn k_nabla_block(x: &[f64], x2: &[f64], theta: &RbfParams) -> Result<Matrix> {
    theta.check_dim(x.len())?;
    theta.check_dim(x2.len())?;
    let w = theta.precisions();
    let n = w.len();
    let (mut delta, mut r) = (vec![0.0; n], vec![0.0; n]);
    let kv = pair(x, x2, &w, theta.outputscale, &mut delta, &mut r);
    let dir = |i: usize| if i == 0 { Dir::Value } else { Dir::Axis(i - 1) };
    Ok(Matrix::from_fn(n + 1, n + 1, |i, j| {
        entry(kv, &r, &w, dir(i), dir(j))
    }))
}

/// Value / directional-derivative covariance between `(z1, v1)` and `(z2, v2)`:
/// `[[k, ∇_{z2}kᵀ v2], [v1ᵀ ∇_{z1}k, v1ᵀ ∇²k v2]]`.
pub fn k_dir_block(
    z1: &[f64],
    v1: &[f64],
    z2: &[f64],
    v2: &[f64],
    theta: &RbfParams,
) -> Result<Matrix> {
    for len in [z1.len(), v1.len(), z2.len(), v2.len()] {
        theta.check_dim(len)?;
    }
    let w = theta.precisions();
    let n = w.len();
    let (mut delta, mut r) = (vec![0.0; n], vec![0.0; n]);
    let kv = pair(z1, z2, &w, theta.outputscale, &mut delta, &mut r);
    let (a, b) = (Dir::Along(v1), Dir::Along(v2));
    Ok(Matrix::from_rows(&[
        vec![
            entry(kv, &r, &w, Dir::Value, Dir::Value),
            entry(kv, &r, &w, Dir::Value, b),
        ],
        vec![entry(kv, &r, &w, a, Dir::Value), entry(kv, &r, &w, a, b)],
    ]))
}

/// One side of a kernel matrix.
#[derive(Clone, Copy)]
pub enum Side<'a> {
    /// Observation features over a fixed data matrix.
    Observed {
        x: &'a Matrix,
        obs: &'a [Observation],
    },
    /// Inducing values followed by point-major directional derivatives.
    Inducing {
        z: &'a Matrix,
        dirs: &'a Matrix,
        per_point: usize,
    },
}

struct Group<'a> {
    point: &'a [f64],
    /// index into the `z` gradient when the point is trainable
    inducing: Option<usize>,
    feats: Vec<(usize, Dir<'a>, Option<usize>)>,
}

impl<'a> Side<'a> {
    fn len(&self) -> usize {
        match self {
            Side::Observed { obs, .. } => obs.len(),
            Side::Inducing { z, per_point, .. } => augmented_size(z.rows(), *per_point),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Side::Observed { x, .. } => x.cols(),
            Side::Inducing { z, .. } => z.cols(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Side::Observed { x, obs } => {
                for o in obs.iter() {
                    if o.point >= x.rows() {
                        return Err(Error::dims(
                            "kernel",
                            format!("observation point {} of {}", o.point, x.rows()),
                        ));
                    }
                    if let ObsKind::Partial(j) = o.kind {
                        if j >= x.cols() {
                            return Err(Error::dims(
                                "kernel",
                                format!("partial index {j} in dimension {}", x.cols()),
                            ));
                        }
                    }
                }
            }
            Side::Inducing { z, dirs, per_point } => {
                if dirs.rows() != z.rows() * per_point
                    || (dirs.rows() > 0 && dirs.cols() != z.cols())
                {
                    return Err(Error::dims(
                        "kernel",
                        format!(
                            "directions {:?} for {} points x {per_point}",
                            dirs.shape(),
                            z.rows()
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Groups features sharing a point so pair terms are computed once.
    fn groups(&self) -> Vec<Group<'a>> {
        match *self {
            Side::Observed { x, obs } => {
                let mut out: Vec<Group<'a>> = Vec::with_capacity(obs.len());
                let mut last: Option<usize> = None;
                for (i, o) in obs.iter().enumerate() {
                    if last == Some(o.point) {
                        out.last_mut()
                            .unwrap()
                            .feats
                            .push((i, Dir::from_kind(o.kind), None));
                    } else {
                        out.push(Group {
                            point: x.row_slice(o.point),
                            inducing: None,
                            feats: vec![(i, Dir::from_kind(o.kind), None)],
                        });
                        last = Some(o.point);
                    }
                }
                out
            }
            Side::Inducing { z, dirs, per_point } => {
                let m = z.rows();
                (0..m)
                    .map(|pt| {
                        let mut feats = Vec::with_capacity(per_point + 1);
                        feats.push((pt, Dir::Value, None));
                        for t in 0..per_point {
                            let row = pt * per_point + t;
                            feats.push((m + row, Dir::Along(dirs.row_slice(row)), Some(row)));
                        }
                        Group {
                            point: z.row_slice(pt),
                            inducing: Some(pt),
                            feats,
                        }
                    })
                    .collect()
            }
        }
    }
}

fn same_side(a: &Side<'_>, b: &Side<'_>) -> bool {
    match (a, b) {
        (Side::Observed { x: x1, obs: o1 }, Side::Observed { x: x2, obs: o2 }) => {
            std::ptr::eq(*x1, *x2) && std::ptr::eq(o1.as_ptr(), o2.as_ptr()) && o1.len() == o2.len()
        }
        (
            Side::Inducing {
                z: z1, dirs: d1, ..
            },
            Side::Inducing {
                z: z2, dirs: d2, ..
            },
        ) => std::ptr::eq(*z1, *z2) && std::ptr::eq(*d1, *d2),
        _ => false,
    }
}

/// Dense kernel matrix between two feature sides.
pub fn kernel_matrix(rows: Side<'_>, cols: Side<'_>, theta: &RbfParams) -> Result<Matrix> {
    rows.validate()?;
    cols.validate()?;
    theta.check_dim(rows.dim())?;
    theta.check_dim(cols.dim())?;
    let w = theta.precisions();
    let s = theta.outputscale;
    let n = w.len();
    let symmetric = same_side(&rows, &cols);
    let rg = rows.groups();
    let cg = cols.groups();
    let mut out = Matrix::zeros(rows.len(), cols.len());
    let (mut delta, mut r) = (vec![0.0; n], vec![0.0; n]);
    for (gi, a) in rg.iter().enumerate() {
        let start = if symmetric { gi } else { 0 };
        for b in &cg[start..] {
            let kv = pair(a.point, b.point, &w, s, &mut delta, &mut r);
            for &(i, da, _) in &a.feats {
                for &(j, db, _) in &b.feats {
                    out[(i, j)] = entry(kv, &r, &w, da, db);
                }
            }
        }
    }
    if symmetric {
        for gi in 0..rg.len() {
            for b in &cg[gi + 1..] {
                for &(i, _, _) in &rg[gi].feats {
                    for &(j, _, _) in &b.feats {
                        out[(j, i)] = out[(i, j)];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Batch-major copy of observation rows for the cross-kernel fast path.
struct CrossRows {
    /// `xt[d·B + b]`
    xt: Vec<f64>,
    /// 1 for label rows, 0 for partials
    label: Vec<f64>,
    /// partial index, or `usize::MAX` for labels
    axis: Vec<usize>,
}

impl CrossRows {
    fn new(x: &Matrix, obs: &[Observation]) -> Self {
        let (b, n) = (obs.len(), x.cols());
        let mut xt = vec![0.0; n * b];
        for (bi, o) in obs.iter().enumerate() {
            for (d, v) in x.row_slice(o.point).iter().enumerate() {
                xt[d * b + bi] = *v;
            }
        }
        let (label, axis) = obs
            .iter()
            .map(|o| match o.kind {
                ObsKind::Label => (1.0, usize::MAX),
                ObsKind::Partial(j) => (0.0, j),
            })
            .unzip();
        Self { xt, label, axis }
    }

    /// Fills `delta[d·B + b] = x_bd − z_d` and returns nothing; `q` gets
    /// `Σ_d w_d δ_d²`.
    fn deltas(&self, z: &[f64], w: &[f64], delta: &mut [f64], q: &mut [f64]) {
        let b = self.label.len();
        q.iter_mut().for_each(|v| *v = 0.0);
        for (d, (&zd, &wd)) in z.iter().zip(w).enumerate() {
            let xs = &self.xt[d * b..(d + 1) * b];
            let ds = &mut delta[d * b..(d + 1) * b];
            for ((o, x), qq) in ds.iter_mut().zip(xs).zip(q.iter_mut()) {
                *o = x - zd;
                *qq += wd * *o * *o;
            }
        }
    }

    /// `e_b = label_b − w_j δ_j` (the value-row factor; `a = w_j δ_j` on partial rows).
    fn value_factor(&self, w: &[f64], delta: &[f64], e: &mut [f64]) {
        let b = self.label.len();
        for bi in 0..b {
            let j = self.axis[bi];
            e[bi] = if j == usize::MAX {
                1.0
            } else {
                -w[j] * delta[j * b + bi]
            };
        }
    }
}

/// `β_b = Σ_d δ_bd u_d` over batch-major `delta`.
fn project_rows(delta: &[f64], u: &[f64], out: &mut [f64]) {
    let b = out.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    for (d, &ud) in u.iter().enumerate() {
        for (o, dv) in out.iter_mut().zip(&delta[d * b..(d + 1) * b]) {
            *o += ud * dv;
        }
    }
}

/// Observation rows against augmented inducing columns, written in Q×B
/// layout (`out[(feature, row)]`), plus the M×B matrix of base kernel values
/// reused by [`cross_backward`]. With `e = 1` on label rows and `−w_j δ_j` on
/// partial rows, and `c = w_j v_j` (zero on label rows), value entries are
/// `k e` and directional entries `k (c + β e)`, `β = δᵀWv`.
fn cross_forward(
    rows: &CrossRows,
    z: &Matrix,
    v: &Matrix,
    p: usize,
    w: &[f64],
    s: f64,
) -> (Matrix, Matrix) {
    let (m, n) = z.shape();
    let b = rows.label.len();
    let mut out = Matrix::zeros(m * (p + 1), b);
    let mut base = Matrix::zeros(m, b);
    let wv = Matrix::from_fn(m * p, n, |r, d| w[d] * v[(r, d)]);
    let (mut delta, mut e, mut beta) = (vec![0.0; n * b], vec![0.0; b], vec![0.0; b]);
    for mi in 0..m {
        let k0 = base.row_slice_mut(mi);
        rows.deltas(z.row_slice(mi), w, &mut delta, k0);
        k0.iter_mut().for_each(|q| *q = s * (-0.5 * *q).exp());
        rows.value_factor(w, &delta, &mut e);
        let k0 = base.row_slice(mi);
        let data = out.as_mut_slice();
        for ((o, k), e) in data[mi * b..(mi + 1) * b].iter_mut().zip(k0).zip(&e) {
            *o = k * e;
        }
        for t in 0..p {
            let wvt = wv.row_slice(mi * p + t);
            project_rows(&delta, wvt, &mut beta);
            let row = &mut data[(m + mi * p + t) * b..(m + mi * p + t + 1) * b];
            for bi in 0..b {
                let j = rows.axis[bi];
                let c = if j == usize::MAX { 0.0 } else { wvt[j] };
                row[bi] = k0[bi] * (c + beta[bi] * e[bi]);
            }
        }
    }
    (out, base)
}

/// Adjoint of [`cross_forward`] for a Q×B gradient `g`. Adds into `d_w`,
/// `d_z`, `d_v` and returns `Σ g∘K` (the outputscale adjoint times `s`).
#[allow(clippy::too_many_arguments)]
fn cross_backward(
    g: &Matrix,
    rows: &CrossRows,
    base: &Matrix,
    z: &Matrix,
    v: &Matrix,
    p: usize,
    w: &[f64],
    d_w: &mut [f64],
    d_z: &mut Matrix,
    d_v: &mut Matrix,
) -> f64 {
    let (m, n) = z.shape();
    let b = rows.label.len();
    let wv = Matrix::from_fn(m * p, n, |r, d| w[d] * v[(r, d)]);
    let mut delta = vec![0.0; n * b];
    let (mut q, mut e, mut beta) = (vec![0.0; b], vec![0.0; b], vec![0.0; b]);
    let (mut k_bar, mut e_bar, mut beta_bar) = (vec![0.0; b], vec![0.0; b], vec![0.0; b]);
    let mut c_by_axis = vec![0.0; n];
    let mut acc_z = vec![0.0; n];
    let gd = g.as_slice();
    let mut total = 0.0;
    for mi in 0..m {
        let gv = &gd[mi * b..(mi + 1) * b];
        let dir_rows = &gd[(m + mi * p) * b..(m + (mi + 1) * p) * b];
        if gv.iter().chain(dir_rows).all(|&x| x == 0.0) {
            continue;
        }
        let k0 = base.row_slice(mi);
        rows.deltas(z.row_slice(mi), w, &mut delta, &mut q);
        rows.value_factor(w, &delta, &mut e);
        acc_z.iter_mut().for_each(|x| *x = 0.0);
        // value entries k e
        for bi in 0..b {
            k_bar[bi] = gv[bi] * e[bi];
            e_bar[bi] = gv[bi] * k0[bi];
        }
        for t in 0..p {
            let row = mi * p + t;
            let wvt = wv.row_slice(row);
            let gt = &dir_rows[t * b..(t + 1) * b];
            project_rows(&delta, wvt, &mut beta);
            c_by_axis.iter_mut().for_each(|x| *x = 0.0);
            for bi in 0..b {
                let j = rows.axis[bi];
                let c = if j == usize::MAX { 0.0 } else { wvt[j] };
                let gk = gt[bi] * k0[bi];
                k_bar[bi] += gt[bi] * (c + beta[bi] * e[bi]);
                e_bar[bi] += gk * beta[bi];
                beta_bar[bi] = gk * e[bi];
                if j != usize::MAX {
                    c_by_axis[j] += gk;
                }
            }
            // c = w_j v_j
            for j in 0..n {
                d_v[(row, j)] += w[j] * c_by_axis[j];
                d_w[j] += v[(row, j)] * c_by_axis[j];
            }
            // β = Σ_d δ_d w_d v_d
            let bsum: f64 = beta_bar.iter().sum();
            for d in 0..n {
                let bd: f64 = beta_bar
                    .iter()
                    .zip(&delta[d * b..(d + 1) * b])
                    .map(|(x, y)| x * y)
                    .sum();
                acc_z[d] += wvt[d] * bsum;
                d_v[(row, d)] += w[d] * bd;
                d_w[d] += v[(row, d)] * bd;
            }
        }
        // e = −w_j δ_j on partial rows
        for bi in 0..b {
            let j = rows.axis[bi];
            if j != usize::MAX {
                let a_bar = -e_bar[bi];
                acc_z[j] += a_bar * w[j];
                d_w[j] += a_bar * delta[j * b + bi];
            }
        }
        // k = s exp(−q/2), q = Σ w δ²
        for bi in 0..b {
            let kb = k_bar[bi] * k0[bi];
            total += kb;
            q[bi] = -0.5 * kb;
        }
        for d in 0..n {
            let ds = &delta[d * b..(d + 1) * b];
            let (mut s1, mut s2) = (0.0, 0.0);
            for (qb, dv) in q.iter().zip(ds) {
                s1 += qb * dv;
                s2 += qb * dv * dv;
            }
            acc_z[d] += 2.0 * w[d] * s1;
            d_w[d] += s2;
        }
        // δ = x − z
        d_z.row_slice_mut(mi)
            .iter_mut()
            .zip(&acc_z)
            .for_each(|(o, a)| *o -= a);
    }
    total
}

/// Prior variances of observation features: `σ²` for labels, `σ²/ℓⱼ²` for partials.
pub fn observation_prior_variances(obs: &[Observation], theta: &RbfParams) -> Vec<f64> {
    let w = theta.precisions();
    obs.iter()
        .map(|o| match o.kind {
            ObsKind::Label => theta.outputscale,
            ObsKind::Partial(j) => theta.outputscale * w[j],
        })
        .collect()
}

/// `K̄_ZZ` over inducing values and directional derivatives.
pub fn assemble_kzz_bar(z: &Matrix, dirs: &DirectionSet, theta: &RbfParams) -> Result<Matrix> {
    if dirs.num_points != z.rows() {
        return Err(Error::dims(
            "assemble_kzz_bar",
            format!("{} direction sets for {} points", dirs.num_points, z.rows()),
        ));
    }
    let side = Side::Inducing {
        z,
        dirs: &dirs.directions,
        per_point: dirs.per_point,
    };
    kernel_matrix(side, side, theta)
}

/// `K̄_XZ` between observation rows and the augmented inducing features.
pub fn assemble_kxz_bar(
    x: &Matrix,
    obs: &[Observation],
    z: &Matrix,
    dirs: &DirectionSet,
    theta: &RbfParams,
) -> Result<Matrix> {
    if dirs.num_points != z.rows() {
        return Err(Error::dims(
            "assemble_kxz_bar",
            format!("{} direction sets for {} points", dirs.num_points, z.rows()),
        ));
    }
    kernel_matrix(
        Side::Observed { x, obs },
        Side::Inducing {
            z,
            dirs: &dirs.directions,
            per_point: dirs.per_point,
        },
        theta,
    )
}

/// Which side of a differentiable kernel matrix a feature set describes.
#[derive(Clone, Debug)]
pub enum SideSpec {
    Observed { x: Matrix, obs: Vec<Observation> },
    Inducing { per_point: usize },
}

/// Differentiable kernel-matrix assembly.
///
/// Tape inputs, in order: `lengthscales` (D×1), `outputscale` (1×1), then
/// `z` (M×D) and `dirs` (M·p×D) if either side is [`SideSpec::Inducing`].
/// Both inducing sides, if present, share the same `z` and `dirs`.
pub struct KernelOp {
    rows: SideSpec,
    cols: SideSpec,
    transposed: bool,
    /// fast path only: batch-major rows and base kernel values (M×B)
    cross: Option<(CrossRows, Matrix)>,
}

impl KernelOp {
    /// Records the kernel matrix (or its transpose) on the tape.
    pub fn record<'t>(
        rows: SideSpec,
        cols: SideSpec,
        transposed: bool,
        lengthscales: Var<'t>,
        outputscale: Var<'t>,
        inducing: Option<(Var<'t>, Var<'t>)>,
    ) -> Result<Var<'t>> {
        let needs_inducing =
            matches!(rows, SideSpec::Inducing { .. }) || matches!(cols, SideSpec::Inducing { .. });
        if needs_inducing != inducing.is_some() {
            return Err(Error::dims(
                "kernel op",
                "inducing inputs must be given exactly when a side is inducing",
            ));
        }
        let mut op = KernelOp {
            rows,
            cols,
            transposed,
            cross: None,
        };
        let mut inputs = vec![lengthscales, outputscale];
        if let Some((z, v)) = inducing {
            inputs.push(z);
            inputs.push(v);
        }
        let value = {
            let vals: Vec<_> = inputs.iter().map(|v| v.value()).collect();
            let refs: Vec<&Matrix> = vals.iter().map(|v| &**v).collect();
            op.forward(&refs)?
        };
        let tape = lengthscales.tape();
        Ok(tape.custom(Box::new(op), &inputs, value))
    }

    fn theta(inputs: &[&Matrix]) -> RbfParams {
        RbfParams {
            lengthscales: inputs[0].as_slice().to_vec(),
            outputscale: inputs[1][(0, 0)],
            mean_const: 0.0,
            noise_label: 1.0,
            noise_grad: 1.0,
        }
    }

    fn side<'a>(spec: &'a SideSpec, inputs: &[&'a Matrix]) -> Side<'a> {
        match spec {
            SideSpec::Observed { x, obs } => Side::Observed { x, obs },
            SideSpec::Inducing { per_point } => Side::Inducing {
                z: inputs[2],
                dirs: inputs[3],
                per_point: *per_point,
            },
        }
    }

    fn cross_grads(
        &self,
        grad: &Matrix,
        inputs: &[&Matrix],
        rows: &CrossRows,
        base: &Matrix,
        per_point: usize,
    ) -> Vec<Option<Matrix>> {
        let transposed_grad;
        let g = if self.transposed {
            grad
        } else {
            transposed_grad = grad.transpose();
            &transposed_grad
        };
        let theta = Self::theta(inputs);
        let w = theta.precisions();
        let mut d_w = vec![0.0; w.len()];
        let mut d_z = Matrix::zeros(inputs[2].rows(), inputs[2].cols());
        let mut d_v = Matrix::zeros(inputs[3].rows(), inputs[3].cols());
        let d_s = cross_backward(
            g, rows, base, inputs[2], inputs[3], per_point, &w, &mut d_w, &mut d_z, &mut d_v,
        );
        let mut out = Self::theta_grads(inputs, &d_w, d_s, theta.outputscale);
        out.push(Some(d_z));
        out.push(Some(d_v));
        out
    }

    /// Lengthscale and outputscale adjoints from `∂/∂w` and `Σ g∘K`.
    fn theta_grads(inputs: &[&Matrix], d_w: &[f64], d_s: f64, s: f64) -> Vec<Option<Matrix>> {
        // w = ℓ⁻² ⇒ ∂w/∂ℓ = −2ℓ⁻³
        let d_ls: Vec<f64> = inputs[0]
            .as_slice()
            .iter()
            .zip(d_w)
            .map(|(l, dw)| -2.0 * dw / (l * l * l))
            .collect();
        vec![
            Some(Matrix::from_vec(inputs[0].rows(), inputs[0].cols(), d_ls)),
            Some(Matrix::scalar(if s != 0.0 { d_s / s } else { 0.0 })),
        ]
    }

    fn forward(&mut self, inputs: &[&Matrix]) -> Result<Matrix> {
        let theta = Self::theta(inputs);
        if let (SideSpec::Observed { x, obs }, SideSpec::Inducing { per_point }) =
            (&self.rows, &self.cols)
        {
            Self::side(&self.rows, inputs).validate()?;
            Self::side(&self.cols, inputs).validate()?;
            theta.check_dim(x.cols())?;
            theta.check_dim(inputs[2].cols())?;
            let rows = CrossRows::new(x, obs);
            let w = theta.precisions();
            let (qb, base) = cross_forward(
                &rows,
                inputs[2],
                inputs[3],
                *per_point,
                &w,
                theta.outputscale,
            );
            self.cross = Some((rows, base));
            return Ok(if self.transposed { qb } else { qb.transpose() });
        }
        let m = kernel_matrix(
            Self::side(&self.rows, inputs),
            Self::side(&self.cols, inputs),
            &theta,
        )?;
        Ok(if self.transposed { m.transpose() } else { m })
    }
}

impl CustomOp for KernelOp {
    fn name(&self) -> &'static str {
        "kernel"
    }

    fn backward(&self, grad: &Matrix, inputs: &[&Matrix], _output: &Matrix) -> Vec<Option<Matrix>> {
        if let (Some((rows, base)), SideSpec::Inducing { per_point }) = (&self.cross, &self.cols) {
            return self.cross_grads(grad, inputs, rows, base, *per_point);
        }
        let transposed_grad;
        let g = if self.transposed {
            transposed_grad = grad.transpose();
            &transposed_grad
        } else {
            grad
        };
        let theta = Self::theta(inputs);
        let rows = Self::side(&self.rows, inputs);
        let cols = Self::side(&self.cols, inputs);
        let w = theta.precisions();
        let s = theta.outputscale;
        let n = w.len();

        let mut d_w = vec![0.0; n];
        let mut d_s = 0.0;
        let has_inducing = inputs.len() > 2;
        let (mut d_z, mut d_v) = if has_inducing {
            (
                Matrix::zeros(inputs[2].rows(), inputs[2].cols()),
                Matrix::zeros(inputs[3].rows(), inputs[3].cols()),
            )
        } else {
            (Matrix::zeros(0, 0), Matrix::zeros(0, 0))
        };

        let rg = rows.groups();
        let cg = cols.groups();
        // Both sides inducing: K is symmetric, so each unordered pair is
        // visited once with the block gradient G_ab + G_baᵀ.
        let symmetric = matches!(
            (&self.rows, &self.cols),
            (SideSpec::Inducing { .. }, SideSpec::Inducing { .. })
        );
        let fmax = |gs: &[Group<'_>]| gs.iter().map(|g| g.feats.len()).max().unwrap_or(0);
        let mut sc = PairScratch::new(n, fmax(&rg), fmax(&cg));
        let (mut delta, mut r, mut d_delta) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut gblk = Vec::new();
        for (ai, a) in rg.iter().enumerate() {
            let start = if symmetric { ai } else { 0 };
            for (bi, b) in cg.iter().enumerate().skip(start) {
                gblk.clear();
                for &(i, _, _) in &a.feats {
                    for &(j, _, _) in &b.feats {
                        let mut v = g[(i, j)];
                        if symmetric && bi != ai {
                            v += g[(j, i)];
                        }
                        gblk.push(v);
                    }
                }
                if gblk.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let kv = pair(a.point, b.point, &w, s, &mut delta, &mut r);
                d_delta.iter_mut().for_each(|v| *v = 0.0);
                d_s += pair_backward(
                    &gblk,
                    kv,
                    &delta,
                    &r,
                    &w,
                    &a.feats,
                    &b.feats,
                    &mut sc,
                    &mut d_delta,
                    &mut d_w,
                    &mut d_v,
                );
                if let Some(pa) = a.inducing {
                    d_z.row_slice_mut(pa)
                        .iter_mut()
                        .zip(&d_delta)
                        .for_each(|(o, v)| *o += v);
                }
                if let Some(pb) = b.inducing {
                    d_z.row_slice_mut(pb)
                        .iter_mut()
                        .zip(&d_delta)
                        .for_each(|(o, v)| *o -= v);
                }
            }
        }
        let mut out = Self::theta_grads(inputs, &d_w, d_s, s);
        if has_inducing {
            out.push(Some(d_z));
            out.push(Some(d_v));
        }
        out
    }
}

/// Differentiable prior variances of observation features (B×1).
/// Tape inputs: `lengthscales` (D×1), `outputscale` (1×1).
pub struct PriorVarianceOp {
    kinds: Vec<ObsKind>,
}

impl PriorVarianceOp {
    pub fn record<'t>(
        kinds: Vec<ObsKind>,
        lengthscales: Var<'t>,
        outputscale: Var<'t>,
    ) -> Result<Var<'t>> {
        let value = {
            let ls = lengthscales.value();
            let s = outputscale.value()[(0, 0)];
            let mut out = Vec::with_capacity(kinds.len());
            for kind in &kinds {
                out.push(match *kind {
                    ObsKind::Label => s,
                    ObsKind::Partial(j) => {
                        if j >= ls.len() {
                            return Err(Error::dims(
                                "prior variance",
                                format!("partial index {j}"),
                            ));
                        }
                        s / (ls.as_slice()[j] * ls.as_slice()[j])
                    }
                });
            }
            Matrix::column(out)
        };
        Ok(lengthscales.tape().custom(
            Box::new(PriorVarianceOp { kinds }),
            &[lengthscales, outputscale],
            value,
        ))
    }
}

impl CustomOp for PriorVarianceOp {
    fn name(&self) -> &'static str {
        "prior_variance"
    }

    fn backward(&self, grad: &Matrix, inputs: &[&Matrix], output: &Matrix) -> Vec<Option<Matrix>> {
        let ls = inputs[0].as_slice();
        let s = inputs[1][(0, 0)];
        let mut d_ls = vec![0.0; ls.len()];
        let mut d_s = 0.0;
        for (i, kind) in self.kinds.iter().enumerate() {
            let g = grad[(i, 0)];
            d_s += g * output[(i, 0)] / s;
            if let ObsKind::Partial(j) = *kind {
                d_ls[j] += g * output[(i, 0)] * (-2.0 / ls[j]);
            }
        }
        vec![
            Some(Matrix::from_vec(inputs[0].rows(), inputs[0].cols(), d_ls)),
            Some(Matrix::scalar(d_s)),
        ]
    }
}
