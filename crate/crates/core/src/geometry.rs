//! Background metrics, covariance maps, regularized delta kernels and the
//! index plumbing that ties base and fiber coordinates together.
//!
//! Events are stored as `[f64; 4]` with index 0 the time coordinate; only the
//! first `d + 1` entries are meaningful. Matrices follow the same layout.
//! Signature is `(+, -, -, ...)` throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 4;

pub type Event = [f64; MAX_DIM];
pub type Mat = [[f64; MAX_DIM]; MAX_DIM];

pub const ZERO_MAT: Mat = [[0.0; MAX_DIM]; MAX_DIM];

pub fn identity_mat(n: usize) -> Mat {
    let mut m = ZERO_MAT;
    for (i, row) in m.iter_mut().enumerate().take(n) {
        row[i] = 1.0;
    }
    m
}

pub fn mat_mul(n: usize, a: &Mat, b: &Mat) -> Mat {
    let mut c = ZERO_MAT;
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += a[i][k] * b[k][j];
            }
            c[i][j] = s;
        }
    }
    c
}

pub fn mat_vec(n: usize, a: &Mat, v: &Event) -> Event {
    let mut out = [0.0; MAX_DIM];
    for i in 0..n {
        for k in 0..n {
            out[i] += a[i][k] * v[k];
        }
    }
    out
}

/// `v^T a w` over the leading `n` components.
pub fn quad_form(n: usize, a: &Mat, v: &Event, w: &Event) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += a[i][j] * v[i] * w[j];
        }
    }
    s
}

/// Gauss-Jordan inverse with partial pivoting. Returns `None` when a pivot
/// falls below `1e-300` in magnitude.
pub fn mat_inverse(n: usize, a: &Mat) -> Option<Mat> {
    let mut m = *a;
    let mut inv = identity_mat(n);
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m[r][col].abs() > m[piv][col].abs() {
                piv = r;
            }
        }
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        inv.swap(col, piv);
        let p = m[col][col];
        for k in 0..n {
            m[col][k] /= p;
            inv[col][k] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for k in 0..n {
                        m[r][k] -= f * m[col][k];
                        inv[r][k] -= f * inv[col][k];
                    }
                }
            }
        }
    }
    Some(inv)
}

pub fn mat_det(n: usize, a: &Mat) -> f64 {
    let mut m = *a;
    let mut det = 1.0;
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m[r][col].abs() > m[piv][col].abs() {
                piv = r;
            }
        }
        if m[piv][col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            m.swap(col, piv);
            det = -det;
        }
        det *= m[col][col];
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for k in col..n {
                m[r][k] -= f * m[col][k];
            }
        }
    }
    det
}

// ---------------------------------------------------------------------------
// Metric
// ---------------------------------------------------------------------------

/// Weak-field static profile `Phi(x) = amplitude * exp(-|x - center|^2 / (2 width^2))`.
/// The metric is `diag(1 + 2 Phi, -(1 - 2 Phi), ...)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticProfile {
    pub amplitude: f64,
    pub center: [f64; 3],
    pub width: f64,
}

impl StaticProfile {
    fn potential(&self, d: usize, x: &Event) -> (f64, [f64; 3]) {
        let w2 = self.width * self.width;
        let mut r2 = 0.0;
        for i in 0..d {
            let dx = x[i + 1] - self.center[i];
            r2 += dx * dx;
        }
        let p = self.amplitude * (-0.5 * r2 / w2).exp();
        let mut grad = [0.0; 3];
        for (i, g) in grad.iter_mut().enumerate().take(d) {
            *g = -p * (x[i + 1] - self.center[i]) / w2;
        }
        (p, grad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetricKind {
    Minkowski,
    StaticDiagonal(StaticProfile),
    /// Push-forward of a base metric through a map: components at `x` are the
    /// pullback of `base` by `map` evaluated at fiber point `x`.
    Pushforward {
        base: Box<Metric>,
        map: Box<CovarianceMap>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    /// Spatial dimension.
    pub d: usize,
    pub kind: MetricKind,
}

impl Metric {
    pub fn minkowski(d: usize) -> Self {
        Metric {
            d,
            kind: MetricKind::Minkowski,
        }
    }

    pub fn static_diagonal(d: usize, profile: StaticProfile) -> Self {
        Metric {
            d,
            kind: MetricKind::StaticDiagonal(profile),
        }
    }

    pub fn pushforward(base: Metric, map: CovarianceMap) -> Self {
        Metric {
            d: base.d,
            kind: MetricKind::Pushforward {
                base: Box::new(base),
                map: Box::new(map),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.d + 1
    }

    pub fn is_minkowski(&self) -> bool {
        matches!(self.kind, MetricKind::Minkowski)
    }

    /// True when the metric is time independent and diagonal, which is what
    /// the grid solver supports.
    pub fn is_static_diagonal(&self) -> bool {
        match &self.kind {
            MetricKind::Minkowski | MetricKind::StaticDiagonal(_) => true,
            MetricKind::Pushforward { base, map } => {
                base.is_static_diagonal() && map.is_spatial_separable()
            }
        }
    }

    pub fn components(&self, x: &Event) -> Mat {
        let n = self.dim();
        match &self.kind {
            MetricKind::Minkowski => {
                let mut g = ZERO_MAT;
                g[0][0] = 1.0;
                for (i, row) in g.iter_mut().enumerate().take(n).skip(1) {
                    row[i] = -1.0;
                }
                g
            }
            MetricKind::StaticDiagonal(p) => {
                let (phi, _) = p.potential(self.d, x);
                let mut g = ZERO_MAT;
                g[0][0] = 1.0 + 2.0 * phi;
                for (i, row) in g.iter_mut().enumerate().take(n).skip(1) {
                    row[i] = -(1.0 - 2.0 * phi);
                }
                g
            }
            MetricKind::Pushforward { base, map } => pullback_metric(base, map, x)
                .expect("push-forward map must be invertible everywhere"),
        }
    }

    pub fn inverse(&self, x: &Event) -> Mat {
        mat_inverse(self.dim(), &self.components(x)).expect("metric must be invertible")
    }

    /// `derivs(x)[s][m][n] = d_s G_mn`.
    pub fn derivs(&self, x: &Event) -> [Mat; MAX_DIM] {
        let n = self.dim();
        let mut out = [ZERO_MAT; MAX_DIM];
        match &self.kind {
            MetricKind::Minkowski => {}
            MetricKind::StaticDiagonal(p) => {
                let (_, grad) = p.potential(self.d, x);
                for s in 1..n {
                    out[s][0][0] = 2.0 * grad[s - 1];
                    for i in 1..n {
                        out[s][i][i] = 2.0 * grad[s - 1];
                    }
                }
            }
            MetricKind::Pushforward { base, map } => {
                out = pullback_metric_derivs(base, map, x)
                    .expect("push-forward map must be invertible everywhere");
            }
        }
        out
    }

    pub fn vol_density(&self, x: &Event) -> f64 {
        mat_det(self.dim(), &self.components(x)).abs().sqrt()
    }
}

// ---------------------------------------------------------------------------
// Covariance map
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum MapKind {
    Identity,
    /// `eta(x) = A x + b`.
    Affine { a: Mat, b: Event },
    /// Separable spatial perturbation
    /// `eta^i(x) = x^i + amp_i * (P_i / 2 pi) * sin(2 pi x^i / P_i)`, time untouched.
    /// Requires `|amp_i| < 1`; `P_i` is typically the periodic box length.
    Sinusoidal { amp: [f64; 3], period: [f64; 3] },
}

/// The covariance field `eta`: identifies the base copy of spacetime with the
/// fiber copy carried by the particle.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceMap {
    pub d: usize,
    pub kind: MapKind,
    a_inv: Mat,
}

impl CovarianceMap {
    pub fn identity(d: usize) -> Self {
        CovarianceMap {
            d,
            kind: MapKind::Identity,
            a_inv: identity_mat(d + 1),
        }
    }

    pub fn affine(d: usize, a: Mat, b: Event) -> Result<Self> {
        let n = d + 1;
        let det = mat_det(n, &a);
        if det <= 0.0 || !det.is_finite() {
            return Err(Error::SingularMap(format!(
                "affine map must be positively oriented and invertible, det = {det}"
            )));
        }
        let a_inv = mat_inverse(n, &a)
            .ok_or_else(|| Error::SingularMap("affine matrix not invertible".into()))?;
        Ok(CovarianceMap {
            d,
            kind: MapKind::Affine { a, b },
            a_inv,
        })
    }

    pub fn scaling(d: usize, factor: f64) -> Result<Self> {
        let mut a = identity_mat(d + 1);
        for (i, row) in a.iter_mut().enumerate().take(d + 1) {
            row[i] = factor;
        }
        Self::affine(d, a, [0.0; MAX_DIM])
    }

    pub fn sinusoidal(d: usize, amp: [f64; 3], period: [f64; 3]) -> Result<Self> {
        for i in 0..d {
            if amp[i].abs() >= 1.0 {
                return Err(Error::SingularMap(format!(
                    "sinusoidal map amplitude {} on axis {i} must satisfy |amp| < 1",
                    amp[i]
                )));
            }
            if period[i] <= 0.0 {
                return Err(Error::SingularMap(format!("non-positive period on axis {i}")));
            }
        }
        Ok(CovarianceMap {
            d,
            kind: MapKind::Sinusoidal { amp, period },
            a_inv: identity_mat(d + 1),
        })
    }

    pub fn dim(&self) -> usize {
        self.d + 1
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, MapKind::Identity)
    }

    /// Maps that leave time alone and act on each spatial axis independently.
    pub fn is_spatial_separable(&self) -> bool {
        match &self.kind {
            MapKind::Identity | MapKind::Sinusoidal { .. } => true,
            MapKind::Affine { a, .. } => {
                let n = self.dim();
                (0..n).all(|i| (0..n).all(|j| i == j || a[i][j] == 0.0)) && a[0][0] == 1.0
            }
        }
    }

    pub fn forward(&self, x: &Event) -> Event {
        let n = self.dim();
        match &self.kind {
            MapKind::Identity => *x,
            MapKind::Affine { a, b } => {
                let mut y = mat_vec(n, a, x);
                for i in 0..n {
                    y[i] += b[i];
                }
                y
            }
            MapKind::Sinusoidal { amp, period } => {
                let mut y = *x;
                for i in 0..self.d {
                    let k = 2.0 * std::f64::consts::PI / period[i];
                    y[i + 1] = x[i + 1] + amp[i] / k * (k * x[i + 1]).sin();
                }
                y
            }
        }
    }

    pub fn backward(&self, z: &Event) -> Event {
        let n = self.dim();
        match &self.kind {
            MapKind::Identity => *z,
            MapKind::Affine { b, .. } => {
                let mut r = *z;
                for i in 0..n {
                    r[i] -= b[i];
                }
                mat_vec(n, &self.a_inv, &r)
            }
            MapKind::Sinusoidal { amp, period } => {
                let mut x = *z;
                for i in 0..self.d {
                    let k = 2.0 * std::f64::consts::PI / period[i];
                    let y = z[i + 1];
                    // Newton on a strictly monotone scalar map; the fixed-point
                    // form x = y - amp/k sin(kx) supplies the starting guess.
                    let mut xi = y - amp[i] / k * (k * y).sin();
                    for _ in 0..60 {
                        let f = xi + amp[i] / k * (k * xi).sin() - y;
                        let df = 1.0 + amp[i] * (k * xi).cos();
                        let step = f / df;
                        xi -= step;
                        if step.abs() <= 1e-15 * (1.0 + xi.abs()) {
                            break;
                        }
                    }
                    x[i + 1] = xi;
                }
                x
            }
        }
    }

    /// `jacobian(x)[a][mu] = d eta^a / d x^mu`.
    pub fn jacobian(&self, x: &Event) -> Mat {
        match &self.kind {
            MapKind::Identity => identity_mat(self.dim()),
            MapKind::Affine { a, .. } => *a,
            MapKind::Sinusoidal { amp, period } => {
                let mut j = identity_mat(self.dim());
                for i in 0..self.d {
                    let k = 2.0 * std::f64::consts::PI / period[i];
                    j[i + 1][i + 1] = 1.0 + amp[i] * (k * x[i + 1]).cos();
                }
                j
            }
        }
    }

    /// `inv_jacobian(x)[mu][a] = kappa^mu_a`, the inverse of the Jacobian at `x`.
    pub fn inv_jacobian(&self, x: &Event) -> Result<Mat> {
        match &self.kind {
            MapKind::Identity => Ok(identity_mat(self.dim())),
            MapKind::Affine { .. } => Ok(self.a_inv),
            MapKind::Sinusoidal { .. } => mat_inverse(self.dim(), &self.jacobian(x))
                .ok_or_else(|| Error::SingularMap(format!("jacobian singular at {x:?}"))),
        }
    }

    pub fn det(&self, x: &Event) -> f64 {
        match &self.kind {
            MapKind::Identity => 1.0,
            _ => mat_det(self.dim(), &self.jacobian(x)),
        }
    }

    /// `hessian(x)[s][a][mu] = d_s d_mu eta^a`.
    pub fn hessian(&self, x: &Event) -> [Mat; MAX_DIM] {
        let mut h = [ZERO_MAT; MAX_DIM];
        if let MapKind::Sinusoidal { amp, period } = &self.kind {
            for i in 0..self.d {
                let k = 2.0 * std::f64::consts::PI / period[i];
                h[i + 1][i + 1][i + 1] = -amp[i] * k * (k * x[i + 1]).sin();
            }
        }
        h
    }
}

/// `g_ab = G_mn kappa^m_a kappa^n_b`, all evaluated at `eta^{-1}(z)`.
pub fn pullback_metric(g: &Metric, eta: &CovarianceMap, z: &Event) -> Result<Mat> {
    let n = g.dim();
    let x = eta.backward(z);
    let kappa = eta.inv_jacobian(&x)?;
    let gm = g.components(&x);
    let mut out = ZERO_MAT;
    for a in 0..n {
        for b in a..n {
            let mut s = 0.0;
            for mu in 0..n {
                for nu in 0..n {
                    s += gm[mu][nu] * kappa[mu][a] * kappa[nu][b];
                }
            }
            out[a][b] = s;
            out[b][a] = s;
        }
    }
    Ok(out)
}

/// Fiber-coordinate derivatives `d_e g_ab` of the pulled-back metric.
pub fn pullback_metric_derivs(
    g: &Metric,
    eta: &CovarianceMap,
    z: &Event,
) -> Result<[Mat; MAX_DIM]> {
    let n = g.dim();
    let x = eta.backward(z);
    let kappa = eta.inv_jacobian(&x)?;
    let gm = g.components(&x);
    let dg = g.derivs(&x);
    let hess = eta.hessian(&x);
    // d_s kappa = -kappa (d_s J) kappa
    let mut dkappa = [ZERO_MAT; MAX_DIM];
    for s in 0..n {
        let t = mat_mul(n, &mat_mul(n, &kappa, &hess[s]), &kappa);
        for mu in 0..n {
            for a in 0..n {
                dkappa[s][mu][a] = -t[mu][a];
            }
        }
    }
    // base-coordinate derivative of g_ab, then chain rule through kappa^s_e
    let mut dbase = [ZERO_MAT; MAX_DIM];
    for s in 0..n {
        for a in 0..n {
            for b in a..n {
                let mut v = 0.0;
                for mu in 0..n {
                    for nu in 0..n {
                        v += dg[s][mu][nu] * kappa[mu][a] * kappa[nu][b]
                            + gm[mu][nu] * dkappa[s][mu][a] * kappa[nu][b]
                            + gm[mu][nu] * kappa[mu][a] * dkappa[s][nu][b];
                    }
                }
                dbase[s][a][b] = v;
                dbase[s][b][a] = v;
            }
        }
    }
    let mut out = [ZERO_MAT; MAX_DIM];
    for e in 0..n {
        for a in 0..n {
            for b in 0..n {
                let mut v = 0.0;
                for s in 0..n {
                    v += kappa[s][e] * dbase[s][a][b];
                }
                out[e][a][b] = v;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Delta kernels
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelShape {
    Gaussian,
    BsplineQuadratic,
    BsplineCubic,
}

/// Regularized one-dimensional delta; multi-dimensional kernels are tensor
/// products. `width` is measured in grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaKernel {
    pub shape: KernelShape,
    pub width: f64,
}

/// Gaussian standard deviation per unit of natural width.
const GAUSS_SIGMA: f64 = 0.25;
/// Gaussian truncation radius in standard deviations; tail mass ~ 2e-11.
const GAUSS_CUT: f64 = 6.7;

impl Default for DeltaKernel {
    fn default() -> Self {
        DeltaKernel {
            shape: KernelShape::BsplineQuadratic,
            width: 3.0,
        }
    }
}

impl DeltaKernel {
    pub fn new(shape: KernelShape, width: f64) -> Self {
        DeltaKernel { shape, width }
    }

    /// Width (in cells) at which a b-spline sits exactly on the integer lattice.
    pub fn natural_width(&self) -> f64 {
        match self.shape {
            KernelShape::BsplineQuadratic => 3.0,
            KernelShape::BsplineCubic => 4.0,
            KernelShape::Gaussian => 3.0,
        }
    }

    fn scale(&self) -> f64 {
        self.width / self.natural_width()
    }

    /// Support radius in cells.
    pub fn support_radius(&self) -> f64 {
        let c = self.scale();
        match self.shape {
            KernelShape::BsplineQuadratic => 1.5 * c,
            KernelShape::BsplineCubic => 2.0 * c,
            KernelShape::Gaussian => GAUSS_CUT * GAUSS_SIGMA * self.width,
        }
    }

    fn profile(&self, u: f64) -> (f64, f64) {
        let a = u.abs();
        let sgn = if u < 0.0 { -1.0 } else { 1.0 };
        match self.shape {
            KernelShape::BsplineQuadratic => {
                if a < 0.5 {
                    (0.75 - a * a, -2.0 * u)
                } else if a < 1.5 {
                    let t = 1.5 - a;
                    (0.5 * t * t, -sgn * t)
                } else {
                    (0.0, 0.0)
                }
            }
            KernelShape::BsplineCubic => {
                if a < 1.0 {
                    (
                        2.0 / 3.0 - a * a + 0.5 * a * a * a,
                        sgn * (-2.0 * a + 1.5 * a * a),
                    )
                } else if a < 2.0 {
                    let t = 2.0 - a;
                    (t * t * t / 6.0, -sgn * 0.5 * t * t)
                } else {
                    (0.0, 0.0)
                }
            }
            KernelShape::Gaussian => {
                // in units of the natural width scale
                let s = GAUSS_SIGMA * self.natural_width();
                if a > GAUSS_CUT * s {
                    (0.0, 0.0)
                } else {
                    let norm = 1.0 / (s * (2.0 * std::f64::consts::PI).sqrt());
                    let v = norm * (-0.5 * u * u / (s * s)).exp();
                    (v, -u / (s * s) * v)
                }
            }
        }
    }

    /// Kernel density in cell units: integrates to one over `u` (cells).
    pub fn value_cells(&self, u: f64) -> f64 {
        let c = self.scale();
        self.profile(u / c).0 / c
    }

    /// Derivative of `value_cells` with respect to `u`.
    pub fn deriv_cells(&self, u: f64) -> f64 {
        let c = self.scale();
        self.profile(u / c).1 / (c * c)
    }

    /// Physical one-dimensional kernel value at offset `x` for spacing `h`.
    pub fn weight(&self, x: f64, h: f64) -> f64 {
        self.value_cells(x / h) / h
    }

    pub fn weight_deriv(&self, x: f64, h: f64) -> f64 {
        self.deriv_cells(x / h) / (h * h)
    }

    /// Tensor-product kernel over the first `n` axes.
    pub fn value_nd(&self, n: usize, offset: &Event, spacing: &[f64]) -> f64 {
        let mut v = 1.0;
        for i in 0..n {
            v *= self.weight(offset[i], spacing[i]);
            if v == 0.0 {
                return 0.0;
            }
        }
        v
    }
}

/// `kernel^{d+1}(eta(x) - z) * det eta_*(x)`: the regularized composed delta,
/// a weight-one density on the base. `spacing` gives the kernel cell size per
/// spacetime axis.
pub fn delta_composed(
    kernel: &DeltaKernel,
    spacing: &[f64],
    eta: &CovarianceMap,
    x: &Event,
    z: &Event,
) -> f64 {
    let n = eta.dim();
    let y = eta.forward(x);
    let mut off = [0.0; MAX_DIM];
    for i in 0..n {
        off[i] = y[i] - z[i];
    }
    let k = kernel.value_nd(n, &off, spacing);
    if k == 0.0 {
        return 0.0;
    }
    k * eta.det(x)
}

/// Axis-aligned box with a midpoint rule of `points` samples per axis.
#[derive(Clone, Debug)]
pub struct QuadratureBox {
    pub lo: Event,
    pub hi: Event,
    pub points: usize,
}

impl QuadratureBox {
    /// Midpoint-rule integral of `f` over the first `n` axes.
    pub fn integrate(&self, n: usize, mut f: impl FnMut(&Event) -> f64) -> f64 {
        let m = self.points;
        let mut h = [0.0; MAX_DIM];
        let mut cell = 1.0;
        for i in 0..n {
            h[i] = (self.hi[i] - self.lo[i]) / m as f64;
            cell *= h[i];
        }
        let total = m.pow(n as u32);
        let mut partial = Vec::with_capacity(m);
        let mut acc = Vec::with_capacity(total.min(1 << 16));
        let mut x = [0.0; MAX_DIM];
        for flat in 0..total {
            let mut r = flat;
            for i in (0..n).rev() {
                let k = r % m;
                r /= m;
                x[i] = self.lo[i] + (k as f64 + 0.5) * h[i];
            }
            acc.push(f(&x));
            if acc.len() == 1 << 16 {
                partial.push(crate::util::pairwise_sum(&acc));
                acc.clear();
            }
        }
        partial.push(crate::util::pairwise_sum(&acc));
        crate::util::pairwise_sum(&partial) * cell
    }

    fn contains(&self, n: usize, x: &Event) -> bool {
        (0..n).all(|i| x[i] >= self.lo[i] && x[i] <= self.hi[i])
    }
}

/// Residual `|int f(eta(x)) K(eta(x) - z) |J(x)| dx - f(z)|` by quadrature over
/// the base box. Vanishes as the kernel narrows: the regularized delta is a
/// weight-one scalar density.
pub fn density_transform_check(
    kernel: &DeltaKernel,
    spacing: &[f64],
    eta: &CovarianceMap,
    f: impl Fn(&Event) -> f64,
    z: &Event,
    quad: &QuadratureBox,
) -> Result<f64> {
    let n = eta.dim();
    // every corner of the fiber support box must pull back inside the box
    let r = kernel.support_radius();
    for corner in 0..(1usize << n) {
        let mut c = *z;
        for i in 0..n {
            let s = if corner >> i & 1 == 1 { 1.0 } else { -1.0 };
            c[i] += s * r * spacing[i];
        }
        let back = eta.backward(&c);
        if !quad.contains(n, &back) {
            return Err(Error::Domain(format!(
                "kernel support corner {back:?} lies outside the quadrature box"
            )));
        }
    }
    let integral = quad.integrate(n, |x| {
        let y = eta.forward(x);
        let k = delta_composed(kernel, spacing, eta, x, z);
        if k == 0.0 {
            0.0
        } else {
            f(&y) * k
        }
    });
    Ok((integral - f(z)).abs())
}

// ---------------------------------------------------------------------------
// Lambda measure
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaShape {
    Uniform,
    /// Symmetric tent peaking at the midpoint of the window.
    Triangular,
    /// `cos^2` bump of the given width centred at `center`.
    CosineBump { center: f64, width: f64 },
}

/// Suspension density `sqrt(K)` on the evolution-parameter axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaMeasure {
    pub shape: LambdaShape,
    pub lo: f64,
    pub hi: f64,
    /// Overall multiplier; anything other than 1 fails validation.
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl LambdaMeasure {
    pub fn uniform(lo: f64, hi: f64) -> Self {
        LambdaMeasure {
            shape: LambdaShape::Uniform,
            lo,
            hi,
            scale: 1.0,
        }
    }

    pub fn triangular(lo: f64, hi: f64) -> Self {
        LambdaMeasure {
            shape: LambdaShape::Triangular,
            lo,
            hi,
            scale: 1.0,
        }
    }

    pub fn bump(lo: f64, hi: f64, center: f64, width: f64) -> Self {
        LambdaMeasure {
            shape: LambdaShape::CosineBump { center, width },
            lo,
            hi,
            scale: 1.0,
        }
    }

    pub fn k_density(&self, lambda: f64) -> f64 {
        if lambda < self.lo || lambda > self.hi {
            return 0.0;
        }
        let len = self.hi - self.lo;
        let v = match self.shape {
            LambdaShape::Uniform => 1.0 / len,
            LambdaShape::Triangular => {
                let mid = 0.5 * (self.lo + self.hi);
                let half = 0.5 * len;
                (1.0 - (lambda - mid).abs() / half).max(0.0) / half
            }
            LambdaShape::CosineBump { center, width } => {
                let u = (lambda - center) / width;
                if u.abs() > 0.5 {
                    0.0
                } else {
                    let c = (std::f64::consts::PI * u).cos();
                    2.0 / width * c * c
                }
            }
        };
        self.scale * v
    }

    /// Composite Simpson integral of the density over its window.
    pub fn total(&self) -> f64 {
        let m = 1 << 16;
        let h = (self.hi - self.lo) / m as f64;
        let mut s = self.k_density(self.lo) + self.k_density(self.hi);
        for i in 1..m {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * self.k_density(self.lo + i as f64 * h);
        }
        s * h / 3.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hi > self.lo) {
            return Err(Error::Normalization(format!(
                "empty lambda window [{}, {}]",
                self.lo, self.hi
            )));
        }
        if let LambdaShape::CosineBump { width, .. } = self.shape {
            if width <= 0.0 {
                return Err(Error::Normalization("bump width must be positive".into()));
            }
        }
        let total = self.total();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::Normalization(format!(
                "suspension density integrates to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_events(d: usize, count: usize, seed: u64) -> Vec<Event> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let mut e = [0.0; MAX_DIM];
                for v in e.iter_mut().take(d + 1) {
                    *v = rng.gen_range(-3.0..3.0);
                }
                e
            })
            .collect()
    }

    fn test_maps(d: usize) -> Vec<CovarianceMap> {
        let mut a = identity_mat(d + 1);
        a[0][0] = 1.3;
        a[0][1] = 0.2;
        a[1][0] = 0.1;
        a[1][1] = 0.9;
        if d > 1 {
            a[2][2] = 1.7;
            a[1][2] = -0.3;
        }
        vec![
            CovarianceMap::identity(d),
            CovarianceMap::affine(d, a, [0.1, -0.2, 0.3, 0.0]).unwrap(),
            CovarianceMap::sinusoidal(d, [0.3, -0.2, 0.5], [4.0, 5.0, 6.0]).unwrap(),
        ]
    }

    #[test]
    fn jacobian_inverse_and_roundtrip_at_random_events() {
        for d in 1..=3 {
            for map in test_maps(d) {
                for x in sample_events(d, 100, 7 + d as u64) {
                    let n = d + 1;
                    let j = map.jacobian(&x);
                    let k = map.inv_jacobian(&x).unwrap();
                    let p = mat_mul(n, &j, &k);
                    for r in 0..n {
                        for c in 0..n {
                            let want = if r == c { 1.0 } else { 0.0 };
                            assert!((p[r][c] - want).abs() < 1e-10);
                        }
                    }
                    assert!((map.det(&x) - mat_det(n, &j)).abs() < 1e-10);
                    assert!(map.det(&x) > 0.0);
                    let back = map.backward(&map.forward(&x));
                    for i in 0..n {
                        assert!((back[i] - x[i]).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn orientation_reversing_affine_is_rejected() {
        let mut a = identity_mat(2);
        a[1][1] = -1.0;
        assert!(matches!(
            CovarianceMap::affine(1, a, [0.0; 4]),
            Err(Error::SingularMap(_))
        ));
    }

    #[test]
    fn metric_inverse_and_signature() {
        let prof = StaticProfile {
            amplitude: 0.2,
            center: [0.1, -0.3, 0.2],
            width: 0.8,
        };
        for d in 1..=3 {
            let metrics = [
                Metric::minkowski(d),
                Metric::static_diagonal(d, prof.clone()),
                Metric::pushforward(
                    Metric::static_diagonal(d, prof.clone()),
                    CovarianceMap::sinusoidal(d, [0.3, 0.2, 0.1], [5.0, 5.0, 5.0]).unwrap(),
                ),
            ];
            for g in &metrics {
                for x in sample_events(d, 20, 3) {
                    let n = d + 1;
                    let gm = g.components(&x);
                    let p = mat_mul(n, &g.inverse(&x), &gm);
                    for r in 0..n {
                        for c in 0..n {
                            assert!((gm[r][c] - gm[c][r]).abs() < 1e-14);
                            let want = if r == c { 1.0 } else { 0.0 };
                            assert!((p[r][c] - want).abs() < 1e-12);
                        }
                    }
                    assert!(gm[0][0] > 0.0);
                    for i in 1..n {
                        assert!(gm[i][i] < 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn metric_derivs_converge_at_second_order() {
        let prof = StaticProfile {
            amplitude: 0.2,
            center: [0.1, -0.3, 0.2],
            width: 0.8,
        };
        let g = Metric::pushforward(
            Metric::static_diagonal(2, prof),
            CovarianceMap::sinusoidal(2, [0.3, 0.2, 0.0], [5.0, 4.0, 1.0]).unwrap(),
        );
        let x = [0.2, 0.4, -0.3, 0.0];
        let exact = g.derivs(&x);
        let fd_err = |h: f64| {
            let mut worst: f64 = 0.0;
            for s in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[s] += h;
                xm[s] -= h;
                let (gp, gm) = (g.components(&xp), g.components(&xm));
                for a in 0..3 {
                    for b in 0..3 {
                        let fd = (gp[a][b] - gm[a][b]) / (2.0 * h);
                        worst = worst.max((fd - exact[s][a][b]).abs());
                    }
                }
            }
            worst
        };
        let (e1, e2) = (fd_err(1e-2), fd_err(5e-3));
        assert!(e1 < 1e-3);
        let ratio = e1 / e2;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn pullback_identity_is_bitwise_for_minkowski() {
        let g = Metric::minkowski(3);
        let eta = CovarianceMap::identity(3);
        let z = [0.3, 1.0, -2.0, 0.5];
        assert_eq!(pullback_metric(&g, &eta, &z).unwrap(), g.components(&z));
    }

    #[test]
    fn pullback_through_doubling_scales_by_quarter() {
        let g = Metric::minkowski(2);
        let eta = CovarianceMap::scaling(2, 2.0).unwrap();
        let p = pullback_metric(&g, &eta, &[0.5, 0.1, 0.2, 0.0]).unwrap();
        assert!((p[0][0] - 0.25).abs() < 1e-15);
        assert!((p[1][1] + 0.25).abs() < 1e-15);
        assert!((p[2][2] + 0.25).abs() < 1e-15);
        assert_eq!(p[0][1], 0.0);
    }

    #[test]
    fn pullback_static_identity_matches_components() {
        let prof = StaticProfile {
            amplitude: 0.1,
            center: [0.0; 3],
            width: 1.0,
        };
        let g = Metric::static_diagonal(1, prof);
        let z = [0.0, 0.4, 0.0, 0.0];
        let p = pullback_metric(&g, &CovarianceMap::identity(1), &z).unwrap();
        let c = g.components(&z);
        for a in 0..2 {
            for b in 0..2 {
                assert!((p[a][b] - c[a][b]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pullback_derivs_match_finite_differences() {
        let prof = StaticProfile {
            amplitude: 0.15,
            center: [0.2, 0.0, 0.0],
            width: 0.9,
        };
        let g = Metric::static_diagonal(1, prof);
        let eta = CovarianceMap::sinusoidal(1, [0.4, 0.0, 0.0], [3.0, 1.0, 1.0]).unwrap();
        let z = [0.1, 0.35, 0.0, 0.0];
        let d = pullback_metric_derivs(&g, &eta, &z).unwrap();
        let h = 1e-5;
        for e in 0..2 {
            let mut zp = z;
            let mut zm = z;
            zp[e] += h;
            zm[e] -= h;
            let gp = pullback_metric(&g, &eta, &zp).unwrap();
            let gm = pullback_metric(&g, &eta, &zm).unwrap();
            for a in 0..2 {
                for b in 0..2 {
                    let fd = (gp[a][b] - gm[a][b]) / (2.0 * h);
                    assert!((fd - d[e][a][b]).abs() < 1e-8, "{e}{a}{b}: {fd} vs {}", d[e][a][b]);
                }
            }
        }
    }

    #[test]
    fn kernels_are_even_normalized_and_compact() {
        for shape in [
            KernelShape::Gaussian,
            KernelShape::BsplineQuadratic,
            KernelShape::BsplineCubic,
        ] {
            let k = DeltaKernel::new(shape, 3.0);
            let r = k.support_radius();
            let m = 200_000;
            let h = 2.0 * r / m as f64;
            let mut s = 0.0;
            for i in 0..m {
                s += k.value_cells(-r + (i as f64 + 0.5) * h);
            }
            assert!((s * h - 1.0).abs() < 1e-8, "{shape:?}: {}", s * h);
            for u in [0.1, 0.7, 1.3, 2.2] {
                assert_eq!(k.value_cells(u), k.value_cells(-u));
            }
            assert_eq!(k.value_cells(r + 1e-9), 0.0);
            // derivative consistency
            for u in [0.2, 0.9, 1.2] {
                let fd = (k.value_cells(u + 1e-6) - k.value_cells(u - 1e-6)) / 2e-6;
                assert!((fd - k.deriv_cells(u)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn delta_composed_examples() {
        let k = DeltaKernel::default();
        let id = CovarianceMap::identity(1);
        let z = [0.3, -0.2, 0.0, 0.0];
        let sp = [0.1, 0.1];
        let peak = delta_composed(&k, &sp, &id, &z, &z);
        let k0 = k.weight(0.0, 0.1);
        assert!((peak - k0 * k0).abs() < 1e-12);
        let far = [0.3, 5.0, 0.0, 0.0];
        assert_eq!(delta_composed(&k, &sp, &id, &far, &z), 0.0);
    }

    #[test]
    fn delta_composed_integrates_to_one_under_affine_det_two() {
        let mut a = identity_mat(2);
        a[0][0] = 2.0;
        a[0][1] = 0.3;
        let eta = CovarianceMap::affine(1, a, [0.1, 0.0, 0.0, 0.0]).unwrap();
        assert!((eta.det(&[0.0; 4]) - 2.0).abs() < 1e-15);
        let z = [0.4, 0.2, 0.0, 0.0];
        let sp = [0.2, 0.2];
        let quad = QuadratureBox {
            lo: [-1.0, -1.0, 0.0, 0.0],
            hi: [1.0, 1.0, 0.0, 0.0],
            points: 800,
        };
        let total = quad.integrate(2, |x| delta_composed(&DeltaKernel::default(), &sp, &eta, x, &z));
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn density_transform_residuals() {
        let k = DeltaKernel::default();
        let eta = CovarianceMap::sinusoidal(1, [0.3, 0.0, 0.0], [4.0, 1.0, 1.0]).unwrap();
        let z = [0.1, 0.3, 0.0, 0.0];
        let quad = QuadratureBox {
            lo: [-0.6, -0.6, 0.0, 0.0],
            hi: [0.8, 1.0, 0.0, 0.0],
            points: 1500,
        };
        let sp = [0.1, 0.1];
        let r1 = density_transform_check(&k, &sp, &eta, |_| 1.0, &z, &quad).unwrap();
        assert!(r1 < 1e-6, "{r1}");
        let id = CovarianceMap::identity(1);
        let lin = |y: &Event| 2.0 * y[0] - 3.0 * y[1] + 0.5;
        let r2 = density_transform_check(&k, &sp, &id, lin, &z, &quad).unwrap();
        assert!(r2 < 1e-7, "{r2}");
        let quadf = |y: &Event| y[0] * y[0] + 2.0 * y[1] * y[1];
        let ra = density_transform_check(&k, &[0.2, 0.2], &eta, quadf, &z, &quad).unwrap();
        let rb = density_transform_check(&k, &[0.1, 0.1], &eta, quadf, &z, &quad).unwrap();
        let ratio = ra / rb;
        assert!((3.6..4.4).contains(&ratio), "ratio {ratio}");
        let small = QuadratureBox {
            lo: [0.0, 0.2, 0.0, 0.0],
            hi: [0.2, 0.4, 0.0, 0.0],
            points: 10,
        };
        assert!(matches!(
            density_transform_check(&k, &sp, &id, |_| 1.0, &z, &small),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn lambda_measures_normalize() {
        for m in [
            LambdaMeasure::uniform(0.0, 1.0),
            LambdaMeasure::triangular(0.0, 1.0),
            LambdaMeasure::bump(0.0, 1.0, 0.5, 0.2),
        ] {
            m.validate().unwrap();
        }
        let mut bad = LambdaMeasure::uniform(0.0, 1.0);
        bad.scale = 2.0;
        assert!(matches!(bad.validate(), Err(Error::Normalization(_))));
    }
}
