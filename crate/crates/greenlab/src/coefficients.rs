//! Coefficient fields (A, b, d, V) for the operator
//! −D_α(A^{αβ}D_β u + b^α u) + d^β D_β u + V u, organized in three cases:
//! principal part only (case 1), integrable lower-order terms (case 2), and
//! a nonnegative reverse-Hölder potential with b = d = 0 (case 3).
//!
//! Storage is dense per node. Block layout matches the gradient component
//! order `axis·N + comp`, so the quadratic form reads
//! A^{αβ}_{ij} ξ^j_β ξ^i_α with ξ[(α,i)] = ξ[α·N+i].

use crate::grid::{discrete_gradient, GridFunction, GridSpec, DIM};
use crate::{Error, Result};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseTag {
    /// b = d = V = 0.
    Case1,
    /// Lower-order terms with integrability exponents p > n/2, s,t > n.
    Case2,
    /// b = d = 0, V ≥ 0 in a reverse-Hölder class B_p, p > n/2.
    Case3,
}

/// Integrability classes of (V, b, d); infinity for bounded fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exponents {
    pub p: f64,
    pub s: f64,
    pub t: f64,
}

impl Exponents {
    pub fn bounded() -> Self {
        Self { p: f64::INFINITY, s: f64::INFINITY, t: f64::INFINITY }
    }
}

/// Principal-part presets (N = 1 blocks; systems get A ⊗ δ_ij).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AKind {
    Identity,
    Diagonal { entries: [f64; 3] },
    /// shift·I + w(x)w(x)ᵀ with log-normal components w; the minimum
    /// eigenvalue is exactly `shift` at every node (rank-one update).
    LogNormalShifted { seed: u64, shift: f64, sigma: f64, modes: usize },
    /// a(x)·I with a = `low` or `high` by parity of Σ_a floor(x_a/cell):
    /// rough (discontinuous) but uniformly elliptic.
    Checkerboard { low: f64, high: f64, cell: f64 },
}

/// Smooth random scalar field: a fixed sum of cosine modes with seeded
/// frequencies/phases. Analytic, so derivatives are available exactly.
#[derive(Debug, Clone)]
struct CosineField {
    amps: Vec<f64>,
    freqs: Vec<[f64; 3]>,
    phases: Vec<f64>,
}

impl CosineField {
    fn new(rng: &mut ChaCha8Rng, sigma: f64, modes: usize) -> Self {
        let mut amps = Vec::with_capacity(modes);
        let mut freqs = Vec::with_capacity(modes);
        let mut phases = Vec::with_capacity(modes);
        let scale = sigma * (2.0 / modes as f64).sqrt();
        for _ in 0..modes {
            // Box–Muller for a Gaussian amplitude.
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random();
            amps.push(scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos());
            freqs.push([
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ]);
            phases.push(rng.random_range(0.0..std::f64::consts::TAU));
        }
        Self { amps, freqs, phases }
    }

    fn eval(&self, x: [f64; 3]) -> f64 {
        let mut s = 0.0;
        for k in 0..self.amps.len() {
            let arg = self.freqs[k][0] * x[0]
                + self.freqs[k][1] * x[1]
                + self.freqs[k][2] * x[2]
                + self.phases[k];
            s += self.amps[k] * arg.cos();
        }
        s
    }

    /// ∂/∂x_a of eval.
    fn partial(&self, x: [f64; 3], a: usize) -> f64 {
        let mut s = 0.0;
        for k in 0..self.amps.len() {
            let arg = self.freqs[k][0] * x[0]
                + self.freqs[k][1] * x[1]
                + self.freqs[k][2] * x[2]
                + self.phases[k];
            s -= self.amps[k] * self.freqs[k][a] * arg.sin();
        }
        s
    }
}

impl AKind {
    /// 3×3 block at a point (N = 1 structure).
    pub fn eval(&self, x: [f64; 3]) -> [[f64; 3]; 3] {
        match *self {
            AKind::Identity => {
                let mut a = [[0.0; 3]; 3];
                for i in 0..3 {
                    a[i][i] = 1.0;
                }
                a
            }
            AKind::Diagonal { entries } => {
                let mut a = [[0.0; 3]; 3];
                for i in 0..3 {
                    a[i][i] = entries[i];
                }
                a
            }
            AKind::LogNormalShifted { seed, shift, sigma, modes } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let fields: Vec<CosineField> =
                    (0..3).map(|_| CosineField::new(&mut rng, sigma, modes)).collect();
                let w = [0, 1, 2].map(|i| (0.5 * fields[i].eval(x)).exp());
                let mut a = [[0.0; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        a[i][j] = w[i] * w[j];
                    }
                    a[i][i] += shift;
                }
                a
            }
            AKind::Checkerboard { low, high, cell } => {
                let parity: i64 = (0..3).map(|a| (x[a] / cell).floor() as i64).sum();
                let v = if parity.rem_euclid(2) == 0 { high } else { low };
                let mut a = [[0.0; 3]; 3];
                for i in 0..3 {
                    a[i][i] = v;
                }
                a
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            AKind::Identity => Ok(()),
            AKind::Diagonal { entries } => {
                if entries.iter().all(|&e| e > 0.0) {
                    Ok(())
                } else {
                    Err(Error::Coefficients("diagonal entries must be positive".into()))
                }
            }
            AKind::LogNormalShifted { shift, modes, .. } => {
                if shift > 0.0 && modes >= 1 {
                    Ok(())
                } else {
                    Err(Error::Coefficients("log-normal preset needs shift > 0, modes ≥ 1".into()))
                }
            }
            AKind::Checkerboard { low, high, cell } => {
                if low > 0.0 && high >= low && cell > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Coefficients(
                        "checkerboard preset needs 0 < low ≤ high and cell > 0".into(),
                    ))
                }
            }
        }
    }
}

/// Scalar potential presets; all evaluate relative to a reference center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PotentialPreset {
    Constant { value: f64 },
    /// amplitude·|x − c|^alpha.
    RadialPower { alpha: f64, amplitude: f64 },
    /// Σ coeffs[a]·(x_a − c_a)².
    AnisotropicQuadratic { coeffs: [f64; 3] },
    /// exp(g(x)) with g a seeded smooth Gaussian-amplitude cosine field.
    LogNormalRandom { seed: u64, sigma: f64, modes: usize },
    /// `low` or `high` by parity of Σ_a floor((x_a − c_a)/cell).
    Checkerboard { low: f64, high: f64, cell: f64 },
}

impl PotentialPreset {
    pub fn eval(&self, x: [f64; 3], center: [f64; 3]) -> f64 {
        let r = [0, 1, 2].map(|a| x[a] - center[a]);
        match *self {
            PotentialPreset::Constant { value } => value,
            PotentialPreset::RadialPower { alpha, amplitude } => {
                let t = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                if t == 0.0 && alpha < 0.0 {
                    f64::INFINITY
                } else {
                    amplitude * t.powf(alpha)
                }
            }
            PotentialPreset::AnisotropicQuadratic { coeffs } => {
                coeffs[0] * r[0] * r[0] + coeffs[1] * r[1] * r[1] + coeffs[2] * r[2] * r[2]
            }
            PotentialPreset::LogNormalRandom { seed, sigma, modes } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                CosineField::new(&mut rng, sigma, modes).eval(x).exp()
            }
            PotentialPreset::Checkerboard { low, high, cell } => {
                let parity: i64 =
                    (0..3).map(|a| (r[a] / cell).floor() as i64).sum();
                if parity.rem_euclid(2) == 0 {
                    high
                } else {
                    low
                }
            }
        }
    }

    pub fn validate_case3(&self) -> Result<()> {
        let nonneg = match *self {
            PotentialPreset::Constant { value } => value > 0.0,
            PotentialPreset::RadialPower { alpha, amplitude } => amplitude > 0.0 && alpha > -2.0,
            PotentialPreset::AnisotropicQuadratic { coeffs } => {
                coeffs.iter().all(|&c| c >= 0.0) && coeffs.iter().any(|&c| c > 0.0)
            }
            PotentialPreset::LogNormalRandom { modes, .. } => modes >= 1,
            PotentialPreset::Checkerboard { low, high, cell } => {
                low >= 0.0 && high > 0.0 && cell > 0.0
            }
        };
        if nonneg {
            Ok(())
        } else {
            Err(Error::Coefficients(format!(
                "potential preset {:?} is not an admissible nonnegative, nontrivial potential",
                self
            )))
        }
    }
}

/// First-order coefficient presets (N = 1), with analytic divergence for
/// cross-checking the discrete sign conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum VectorPreset {
    Zero,
    Constant { value: [f64; 3] },
    /// b = (x₁ − c₁, 0, 0); div b = 1.
    LinearX,
    SmoothRandom { seed: u64, amplitude: f64, modes: usize },
}

impl VectorPreset {
    pub fn eval(&self, x: [f64; 3], center: [f64; 3]) -> [f64; 3] {
        match *self {
            VectorPreset::Zero => [0.0; 3],
            VectorPreset::Constant { value } => value,
            VectorPreset::LinearX => [x[0] - center[0], 0.0, 0.0],
            VectorPreset::SmoothRandom { seed, amplitude, modes } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                [0, 1, 2].map(|_| amplitude * CosineField::new(&mut rng, 1.0, modes).eval(x))
            }
        }
    }

    pub fn divergence(&self, x: [f64; 3]) -> f64 {
        match *self {
            VectorPreset::Zero | VectorPreset::Constant { .. } => 0.0,
            VectorPreset::LinearX => 1.0,
            VectorPreset::SmoothRandom { seed, amplitude, modes } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..3)
                    .map(|a| amplitude * CosineField::new(&mut rng, 1.0, modes).partial(x, a))
                    .sum()
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, VectorPreset::Zero)
            || matches!(self, VectorPreset::Constant { value } if value.iter().all(|&v| v == 0.0))
    }
}

#[derive(Debug, Clone)]
pub struct Coefficients {
    spec: Arc<GridSpec>,
    n_comp: usize,
    /// ((node·3 + α)·3 + β)·N² + i·N + j
    a: Vec<f64>,
    /// (node·3 + α)·N² + i·N + j
    b: Vec<f64>,
    d: Vec<f64>,
    /// node·N² + i·N + j
    v: Vec<f64>,
    pub lambda: f64,
    pub big_lambda: f64,
    pub case_tag: CaseTag,
    pub exponents: Exponents,
    /// Preset provenance kept for closed-form fast paths downstream.
    pub v_preset: Option<PotentialPreset>,
    pub b_preset: Option<VectorPreset>,
    pub d_preset: Option<VectorPreset>,
}

impl Coefficients {
    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.spec
    }

    pub fn n_comp(&self) -> usize {
        self.n_comp
    }

    #[inline]
    pub fn a(&self, node: usize, alpha: usize, beta: usize, i: usize, j: usize) -> f64 {
        let nn = self.n_comp * self.n_comp;
        self.a[((node * DIM + alpha) * DIM + beta) * nn + i * self.n_comp + j]
    }

    #[inline]
    pub fn b(&self, node: usize, alpha: usize, i: usize, j: usize) -> f64 {
        let nn = self.n_comp * self.n_comp;
        self.b[(node * DIM + alpha) * nn + i * self.n_comp + j]
    }

    #[inline]
    pub fn d(&self, node: usize, beta: usize, i: usize, j: usize) -> f64 {
        let nn = self.n_comp * self.n_comp;
        self.d[(node * DIM + beta) * nn + i * self.n_comp + j]
    }

    #[inline]
    pub fn v(&self, node: usize, i: usize, j: usize) -> f64 {
        let nn = self.n_comp * self.n_comp;
        self.v[node * nn + i * self.n_comp + j]
    }

    pub fn has_lower_order(&self) -> bool {
        self.b.iter().any(|&x| x != 0.0)
            || self.d.iter().any(|&x| x != 0.0)
            || self.v.iter().any(|&x| x != 0.0)
    }

    /// Adjoint coefficients: Ã^{αβ}_{ij} = A^{βα}_{ji}, b̃ = d, d̃ = b, Ṽ = Vᵀ.
    pub fn adjoint(&self) -> Self {
        let n = self.spec.node_count();
        let nc = self.n_comp;
        let nn = nc * nc;
        let mut out = self.clone();
        for node in 0..n {
            for alpha in 0..DIM {
                for beta in 0..DIM {
                    for i in 0..nc {
                        for j in 0..nc {
                            out.a[((node * DIM + alpha) * DIM + beta) * nn + i * nc + j] =
                                self.a(node, beta, alpha, j, i);
                        }
                    }
                }
            }
            for alpha in 0..DIM {
                for i in 0..nc {
                    for j in 0..nc {
                        out.b[(node * DIM + alpha) * nn + i * nc + j] =
                            self.d(node, alpha, j, i);
                        out.d[(node * DIM + alpha) * nn + i * nc + j] =
                            self.b(node, alpha, j, i);
                    }
                }
            }
            for i in 0..nc {
                for j in 0..nc {
                    out.v[node * nn + i * nc + j] = self.v(node, j, i);
                }
            }
        }
        std::mem::swap(&mut out.b_preset, &mut out.d_preset);
        out
    }

    fn empty(spec: Arc<GridSpec>, n_comp: usize, case_tag: CaseTag) -> Self {
        let n = spec.node_count();
        let nn = n_comp * n_comp;
        Self {
            spec,
            n_comp,
            a: vec![0.0; n * DIM * DIM * nn],
            b: vec![0.0; n * DIM * nn],
            d: vec![0.0; n * DIM * nn],
            v: vec![0.0; n * nn],
            lambda: 0.0,
            big_lambda: 0.0,
            case_tag,
            exponents: Exponents::bounded(),
            v_preset: None,
            b_preset: None,
            d_preset: None,
        }
    }

    fn fill_principal(&mut self, a_kind: &AKind) {
        let n = self.spec.node_count();
        let nc = self.n_comp;
        let nn = nc * nc;
        for node in 0..n {
            let block = a_kind.eval(self.spec.coords(node));
            for alpha in 0..DIM {
                for beta in 0..DIM {
                    for i in 0..nc {
                        // systems: A ⊗ δ_ij
                        self.a[((node * DIM + alpha) * DIM + beta) * nn + i * nc + i] =
                            block[alpha][beta];
                    }
                }
            }
        }
    }

    fn measure_bounds(&mut self) {
        let est = ellipticity_scan(self, 0);
        self.lambda = est.lambda_est;
        self.big_lambda = est.big_lambda_est;
    }

    /// Principal part only.
    pub fn case1(spec: Arc<GridSpec>, a_kind: &AKind, n_comp: usize) -> Result<Self> {
        a_kind.validate()?;
        if n_comp == 0 {
            return Err(Error::Coefficients("component count must be ≥ 1".into()));
        }
        let mut c = Self::empty(spec, n_comp, CaseTag::Case1);
        c.fill_principal(a_kind);
        c.measure_bounds();
        if c.lambda <= 0.0 {
            return Err(Error::Coefficients(format!(
                "constructed principal part is not elliptic: λ = {}",
                c.lambda
            )));
        }
        Ok(c)
    }

    /// Lower-order terms in integrability classes p > n/2, s,t > n (N = 1).
    pub fn case2(
        spec: Arc<GridSpec>,
        a_kind: &AKind,
        b: &VectorPreset,
        d: &VectorPreset,
        v: &PotentialPreset,
        exponents: Exponents,
    ) -> Result<Self> {
        a_kind.validate()?;
        let n = DIM as f64;
        if !(exponents.p > n / 2.0) || !(exponents.s > n) || !(exponents.t > n) {
            return Err(Error::Coefficients(format!(
                "case 2 needs p > n/2 and s, t > n; got p={} s={} t={}",
                exponents.p, exponents.s, exponents.t
            )));
        }
        let mut c = Self::empty(spec.clone(), 1, CaseTag::Case2);
        c.fill_principal(a_kind);
        c.exponents = exponents;
        let center = spec.center();
        for node in 0..spec.node_count() {
            let x = spec.coords(node);
            let bv = b.eval(x, center);
            let dv = d.eval(x, center);
            for alpha in 0..DIM {
                c.b[node * DIM + alpha] = bv[alpha];
                c.d[node * DIM + alpha] = dv[alpha];
            }
            c.v[node] = v.eval(x, center);
        }
        if c.v.iter().any(|v| !v.is_finite()) {
            return Err(Error::Coefficients("potential is not finite on the grid".into()));
        }
        c.v_preset = Some(*v);
        c.b_preset = Some(*b);
        c.d_preset = Some(*d);
        c.measure_bounds();
        if c.lambda <= 0.0 {
            return Err(Error::Coefficients(format!(
                "constructed principal part is not elliptic: λ = {}",
                c.lambda
            )));
        }
        Ok(c)
    }

    /// Nonnegative potential, b = d = 0 (N = 1).
    pub fn case3(
        spec: Arc<GridSpec>,
        a_kind: &AKind,
        v: &PotentialPreset,
        p: f64,
    ) -> Result<Self> {
        a_kind.validate()?;
        v.validate_case3()?;
        if !(p > DIM as f64 / 2.0) {
            return Err(Error::Coefficients(format!(
                "case 3 needs p > n/2 = {}, got {}",
                DIM as f64 / 2.0,
                p
            )));
        }
        let mut c = Self::empty(spec.clone(), 1, CaseTag::Case3);
        c.fill_principal(a_kind);
        c.exponents = Exponents { p, s: f64::INFINITY, t: f64::INFINITY };
        let center = spec.center();
        for node in 0..spec.node_count() {
            c.v[node] = v.eval(spec.coords(node), center);
        }
        if c.v.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Coefficients(
                "case 3 potential must be finite and nonnegative on the grid".into(),
            ));
        }
        if c.v.iter().all(|&v| v == 0.0) {
            return Err(Error::Coefficients("case 3 potential is identically zero".into()));
        }
        c.v_preset = Some(*v);
        c.measure_bounds();
        if c.lambda <= 0.0 {
            return Err(Error::Coefficients(format!(
                "constructed principal part is not elliptic: λ = {}",
                c.lambda
            )));
        }
        Ok(c)
    }

    /// Potential as a scalar grid field (N = 1).
    pub fn v_field(&self) -> GridFunction {
        assert_eq!(self.n_comp, 1);
        let mut f = GridFunction::zeros(self.spec.clone(), 1);
        for node in 0..self.spec.node_count() {
            f.set(0, node, self.v(node, 0, 0));
        }
        f
    }

    /// One first-order field as a 3-component grid function (N = 1).
    pub fn vector_field(&self, which_b: bool) -> GridFunction {
        assert_eq!(self.n_comp, 1);
        let mut f = GridFunction::zeros(self.spec.clone(), 3);
        for node in 0..self.spec.node_count() {
            for alpha in 0..DIM {
                let v = if which_b {
                    self.b(node, alpha, 0, 0)
                } else {
                    self.d(node, alpha, 0, 0)
                };
                f.set(alpha, node, v);
            }
        }
        f
    }
}

/// Parameters accepted by `preset_case`.
#[derive(Debug, Clone)]
pub struct CaseParams {
    pub a_kind: AKind,
    pub n_comp: usize,
    pub b: VectorPreset,
    pub d: VectorPreset,
    pub v: Option<PotentialPreset>,
    pub exponents: Exponents,
}

impl Default for CaseParams {
    fn default() -> Self {
        Self {
            a_kind: AKind::Identity,
            n_comp: 1,
            b: VectorPreset::Zero,
            d: VectorPreset::Zero,
            v: None,
            exponents: Exponents { p: 2.0, s: 4.0, t: 4.0 },
        }
    }
}

pub fn preset_case(
    spec: &Arc<GridSpec>,
    case_tag: CaseTag,
    params: &CaseParams,
) -> Result<Coefficients> {
    match case_tag {
        CaseTag::Case1 => {
            if params.v.is_some() || !params.b.is_zero() || !params.d.is_zero() {
                return Err(Error::Coefficients(
                    "case 1 admits no lower-order coefficients".into(),
                ));
            }
            Coefficients::case1(spec.clone(), &params.a_kind, params.n_comp)
        }
        CaseTag::Case2 => {
            let v = params.v.unwrap_or(PotentialPreset::Constant { value: 0.0 });
            Coefficients::case2(spec.clone(), &params.a_kind, &params.b, &params.d, &v, params.exponents)
        }
        CaseTag::Case3 => {
            let v = params.v.ok_or_else(|| {
                Error::Coefficients("case 3 requires a potential preset".into())
            })?;
            if !params.b.is_zero() || !params.d.is_zero() {
                return Err(Error::Coefficients("case 3 requires b = d = 0".into()));
            }
            Coefficients::case3(spec.clone(), &params.a_kind, &v, params.exponents.p)
        }
    }
}

#[derive(Debug, Clone)]
pub struct EllipticityEstimate {
    pub lambda_est: f64,
    pub big_lambda_est: f64,
    /// Node and direction attaining the minimum quadratic-form ratio.
    pub witness_node: usize,
    pub witness_xi: Vec<f64>,
    /// Worst sampled ratio (≥ lambda_est; equality up to sampling).
    pub sampled_min: f64,
}

/// Extreme eigenpair (smallest if `largest` is false) of a dense symmetric
/// m×m matrix via cyclic Jacobi rotations (meant for tiny m).
pub(crate) fn sym_eigen_extreme(s: &[f64], m: usize, largest: bool) -> (f64, Vec<f64>) {
    let (vals, vecs) = sym_eigen_all(s, m);
    let mut best = 0usize;
    for i in 1..m {
        let better = if largest { vals[i] > vals[best] } else { vals[i] < vals[best] };
        if better {
            best = i;
        }
    }
    (vals[best], (0..m).map(|k| vecs[k * m + best]).collect())
}

/// Smallest eigenvalue and eigenvector of a dense symmetric m×m matrix.
pub(crate) fn sym_eigen_min(s: &[f64], m: usize) -> (f64, Vec<f64>) {
    sym_eigen_extreme(s, m, false)
}

/// Full Jacobi eigendecomposition: (eigenvalues, eigenvectors column-major).
fn sym_eigen_all(s: &[f64], m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = s.to_vec();
    let mut u = vec![0.0; m * m];
    for i in 0..m {
        u[i * m + i] = 1.0;
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..m {
            for q in (p + 1)..m {
                off = off.max(a[p * m + q].abs());
            }
        }
        if off <= 1e-15 * frob {
            break;
        }
        for p in 0..m {
            for q in (p + 1)..m {
                let apq = a[p * m + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * m + q] - a[p * m + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..m {
                    let akp = a[k * m + p];
                    let akq = a[k * m + q];
                    a[k * m + p] = c * akp - sn * akq;
                    a[k * m + q] = sn * akp + c * akq;
                }
                for k in 0..m {
                    let apk = a[p * m + k];
                    let aqk = a[q * m + k];
                    a[p * m + k] = c * apk - sn * aqk;
                    a[q * m + k] = sn * apk + c * aqk;
                }
                for k in 0..m {
                    let ukp = u[k * m + p];
                    let ukq = u[k * m + q];
                    u[k * m + p] = c * ukp - sn * ukq;
                    u[k * m + q] = sn * ukp + c * ukq;
                }
            }
        }
    }
    let vals = (0..m).map(|i| a[i * m + i]).collect();
    (vals, u)
}

/// Exact nodewise scan (symmetric-part eigenvalues + Frobenius norms) over
/// quadrature-supported nodes. Used by construction and by check_ellipticity.
fn ellipticity_scan(c: &Coefficients, stride_hint: usize) -> EllipticityEstimate {
    let spec = c.spec();
    let nc = c.n_comp;
    let m = DIM * nc;
    let n = spec.node_count();
    let supported: Vec<usize> = (0..n).filter(|&i| spec.quad_weight(i) > 0.0).collect();
    let stride = if stride_hint > 0 {
        stride_hint
    } else {
        (supported.len() / 20_000).max(1)
    };
    let mut lambda = f64::INFINITY;
    let mut big_lambda: f64 = 0.0;
    let mut witness_node = supported[0];
    let mut witness_xi = vec![0.0; m];
    let mut s = vec![0.0; m * m];
    for &node in supported.iter().step_by(stride) {
        let mut frob2 = 0.0;
        for alpha in 0..DIM {
            for beta in 0..DIM {
                for i in 0..nc {
                    for j in 0..nc {
                        let val = c.a(node, alpha, beta, i, j);
                        frob2 += val * val;
                        let row = alpha * nc + i;
                        let col = beta * nc + j;
                        s[row * m + col] =
                            0.5 * (val + c.a(node, beta, alpha, j, i));
                    }
                }
            }
        }
        big_lambda = big_lambda.max(frob2.sqrt());
        let (min_eig, vec) = sym_eigen_min(&s, m);
        if min_eig < lambda {
            lambda = min_eig;
            witness_node = node;
            witness_xi = vec;
        }
    }
    EllipticityEstimate {
        lambda_est: lambda,
        big_lambda_est: big_lambda,
        witness_node,
        witness_xi,
        sampled_min: f64::INFINITY,
    }
}

/// Ellipticity measurement: exact symmetric-part eigenvalue scan plus
/// `trials` random directions ξ per sampled node as independent witnesses.
pub fn check_ellipticity(
    c: &Coefficients,
    trials: usize,
    seed: u64,
) -> Result<EllipticityEstimate> {
    if trials < 100 {
        return Err(Error::Coefficients(format!(
            "need ≥ 100 random directions per node sample, got {}",
            trials
        )));
    }
    let mut est = ellipticity_scan(c, 0);
    let spec = c.spec();
    let nc = c.n_comp;
    let m = DIM * nc;
    let n = spec.node_count();
    let supported: Vec<usize> = (0..n).filter(|&i| spec.quad_weight(i) > 0.0).collect();
    // Random-direction sampling on a deterministic node subsample.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let node_stride = (supported.len() / 200).max(1);
    let mut sampled_min = f64::INFINITY;
    let mut xi = vec![0.0; m];
    for &node in supported.iter().step_by(node_stride) {
        for _ in 0..trials {
            let mut norm2 = 0.0;
            for v in xi.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
                norm2 += *v * *v;
            }
            if norm2 == 0.0 {
                continue;
            }
            let mut q = 0.0;
            for alpha in 0..DIM {
                for beta in 0..DIM {
                    for i in 0..nc {
                        for j in 0..nc {
                            q += c.a(node, alpha, beta, i, j)
                                * xi[beta * nc + j]
                                * xi[alpha * nc + i];
                        }
                    }
                }
            }
            sampled_min = sampled_min.min(q / norm2);
        }
    }
    est.sampled_min = sampled_min;
    Ok(est)
}

#[derive(Debug, Clone)]
pub struct SignConditionReport {
    /// min over Ω of V − div b, with witness node.
    pub v_minus_div_b: (f64, usize),
    /// min over Ω of V − div d, with witness node.
    pub v_minus_div_d: (f64, usize),
    /// min over Ω of V − ½div b − ½div d (coercivity margin δ), with witness.
    pub coercivity_margin: (f64, usize),
}

/// Pointwise evaluation of the distributional sign conditions (N = 1):
/// V − div b ≥ 0, V − div d ≥ 0, and the sufficient coercivity margin
/// V − ½div b − ½div d ≥ δ. Negative minima are findings, not errors.
pub fn check_sign_conditions(c: &Coefficients) -> Result<SignConditionReport> {
    if c.n_comp() != 1 {
        return Err(Error::Coefficients("sign conditions are defined for N = 1".into()));
    }
    let spec = c.spec().clone();
    let div = |which_b: bool| -> Vec<f64> {
        let f = c.vector_field(which_b);
        let g = discrete_gradient(&f);
        // div = Σ_α D_α f^α; gradient components are ordered axis·N + comp
        // with N = 3 here, so D_α f^α sits at component α·3 + α.
        let n = spec.node_count();
        (0..n)
            .map(|node| (0..DIM).map(|a| g.value(a * DIM + a, node)).sum())
            .collect()
    };
    let div_b = div(true);
    let div_d = div(false);
    let mut rep = SignConditionReport {
        v_minus_div_b: (f64::INFINITY, 0),
        v_minus_div_d: (f64::INFINITY, 0),
        coercivity_margin: (f64::INFINITY, 0),
    };
    for node in 0..spec.node_count() {
        if !spec.in_mask(node) {
            continue;
        }
        let v = c.v(node, 0, 0);
        let candidates = [
            v - div_b[node],
            v - div_d[node],
            v - 0.5 * div_b[node] - 0.5 * div_d[node],
        ];
        if candidates[0] < rep.v_minus_div_b.0 {
            rep.v_minus_div_b = (candidates[0], node);
        }
        if candidates[1] < rep.v_minus_div_d.0 {
            rep.v_minus_div_d = (candidates[1], node);
        }
        if candidates[2] < rep.coercivity_margin.0 {
            rep.coercivity_margin = (candidates[2], node);
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, DomainPreset};

    fn small_box() -> Arc<GridSpec> {
        make_grid([9; 3], 0.25, [-1.0; 3], DomainPreset::FullBox).unwrap()
    }

    #[test]
    fn identity_bounds_are_exact() {
        let c = Coefficients::case1(small_box(), &AKind::Identity, 1).unwrap();
        let est = check_ellipticity(&c, 100, 7).unwrap();
        assert!((est.lambda_est - 1.0).abs() < 1e-12);
        assert!((est.big_lambda_est - 3.0f64.sqrt()).abs() < 1e-12);
        // Every sampled direction realizes the same ratio for A = I.
        assert!((est.sampled_min - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_bounds_are_exact() {
        let c =
            Coefficients::case1(small_box(), &AKind::Diagonal { entries: [2.0, 1.0, 1.0] }, 1)
                .unwrap();
        let est = check_ellipticity(&c, 100, 7).unwrap();
        assert!((est.lambda_est - 1.0).abs() < 1e-12);
        assert!((est.big_lambda_est - 6.0f64.sqrt()).abs() < 1e-12);
        assert!(est.sampled_min >= est.lambda_est - 1e-12);
    }

    #[test]
    fn lognormal_minimum_eigenvalue_is_the_shift() {
        let a = AKind::LogNormalShifted { seed: 42, shift: 0.35, sigma: 0.4, modes: 6 };
        let c = Coefficients::case1(small_box(), &a, 1).unwrap();
        let est = check_ellipticity(&c, 100, 9).unwrap();
        // Rank-one update: min eigenvalue = shift exactly at every node.
        assert!((est.lambda_est - 0.35).abs() < 1e-10, "λ = {}", est.lambda_est);
        assert!(est.big_lambda_est > 0.35);
    }

    #[test]
    fn shift_monotonicity_is_exact() {
        let base = AKind::LogNormalShifted { seed: 5, shift: 0.2, sigma: 0.3, modes: 5 };
        let shifted = AKind::LogNormalShifted { seed: 5, shift: 0.2 + 0.125, sigma: 0.3, modes: 5 };
        let c0 = Coefficients::case1(small_box(), &base, 1).unwrap();
        let c1 = Coefficients::case1(small_box(), &shifted, 1).unwrap();
        // A → A + εI moves the minimum eigenvalue by exactly ε.
        assert!((c1.lambda - c0.lambda - 0.125).abs() < 1e-12);
    }

    #[test]
    fn case1_has_no_lower_order_terms() {
        let c = preset_case(&small_box(), CaseTag::Case1, &CaseParams::default()).unwrap();
        assert!(!c.has_lower_order());
        assert_eq!(c.case_tag, CaseTag::Case1);
        // Lower-order presets are rejected for case 1.
        let bad = CaseParams {
            v: Some(PotentialPreset::Constant { value: 1.0 }),
            ..CaseParams::default()
        };
        assert!(preset_case(&small_box(), CaseTag::Case1, &bad).is_err());
    }

    #[test]
    fn case3_invariants() {
        let params = CaseParams {
            v: Some(PotentialPreset::RadialPower { alpha: 2.0, amplitude: 1.0 }),
            exponents: Exponents { p: 2.0, s: f64::INFINITY, t: f64::INFINITY },
            ..CaseParams::default()
        };
        let c = preset_case(&small_box(), CaseTag::Case3, &params).unwrap();
        let n = c.spec().node_count();
        for node in 0..n {
            assert!(c.v(node, 0, 0) >= 0.0);
            for alpha in 0..DIM {
                assert_eq!(c.b(node, alpha, 0, 0), 0.0);
                assert_eq!(c.d(node, alpha, 0, 0), 0.0);
            }
        }
        // p ≤ n/2 rejected; zero potential rejected.
        assert!(Coefficients::case3(
            small_box(),
            &AKind::Identity,
            &PotentialPreset::RadialPower { alpha: 2.0, amplitude: 1.0 },
            1.4
        )
        .is_err());
        assert!(Coefficients::case3(
            small_box(),
            &AKind::Identity,
            &PotentialPreset::Constant { value: 0.0 },
            2.0
        )
        .is_err());
    }

    #[test]
    fn case2_exponent_validation() {
        let v = PotentialPreset::Constant { value: 1.0 };
        let ok = Coefficients::case2(
            small_box(),
            &AKind::Identity,
            &VectorPreset::Zero,
            &VectorPreset::Zero,
            &v,
            Exponents { p: 2.0, s: 4.0, t: 3.5 },
        );
        assert!(ok.is_ok());
        let bad = Coefficients::case2(
            small_box(),
            &AKind::Identity,
            &VectorPreset::Zero,
            &VectorPreset::Zero,
            &v,
            Exponents { p: 2.0, s: 3.0, t: 4.0 },
        );
        assert!(bad.is_err(), "s = n must be rejected");
    }

    #[test]
    fn sign_conditions_with_zero_first_order() {
        let v = PotentialPreset::AnisotropicQuadratic { coeffs: [1.0, 2.0, 0.5] };
        let c = Coefficients::case2(
            small_box(),
            &AKind::Identity,
            &VectorPreset::Zero,
            &VectorPreset::Zero,
            &v,
            Exponents { p: 2.0, s: 4.0, t: 4.0 },
        )
        .unwrap();
        let rep = check_sign_conditions(&c).unwrap();
        // With b = d = 0 every minimum is min V = 0 (attained at center).
        assert!(rep.v_minus_div_b.0.abs() < 1e-12);
        assert!(rep.v_minus_div_d.0.abs() < 1e-12);
        assert!(rep.coercivity_margin.0.abs() < 1e-12);
    }

    #[test]
    fn sign_conditions_linear_field() {
        let c = Coefficients::case2(
            small_box(),
            &AKind::Identity,
            &VectorPreset::LinearX,
            &VectorPreset::Zero,
            &PotentialPreset::Constant { value: 2.0 },
            Exponents { p: 2.0, s: 4.0, t: 4.0 },
        )
        .unwrap();
        let rep = check_sign_conditions(&c).unwrap();
        // div b = 1 exactly (discrete differences are exact on linear fields):
        // V − div b = 1, V − div d = 2, margin = 2 − ½ = 1.5.
        assert!((rep.v_minus_div_b.0 - 1.0).abs() < 1e-12);
        assert!((rep.v_minus_div_d.0 - 2.0).abs() < 1e-12);
        assert!((rep.coercivity_margin.0 - 1.5).abs() < 1e-12);
    }

    #[test]
    fn sign_conditions_match_analytic_divergence() {
        // V := div b analytically ⟹ V − div_h b = O(h²).
        let spec = make_grid([17; 3], 0.125, [-1.0; 3], DomainPreset::FullBox).unwrap();
        let b = VectorPreset::SmoothRandom { seed: 3, amplitude: 0.5, modes: 4 };
        let mut c = Coefficients::case2(
            spec.clone(),
            &AKind::Identity,
            &b,
            &VectorPreset::Zero,
            &PotentialPreset::Constant { value: 0.0 },
            Exponents { p: 2.0, s: 4.0, t: 4.0 },
        )
        .unwrap();
        for node in 0..spec.node_count() {
            c.v[node] = b.divergence(spec.coords(node));
        }
        let rep = check_sign_conditions(&c).unwrap();
        // Frequencies ≤ 3 per axis and amplitude ½ bound the third
        // derivatives; allow a generous constant on h².
        let h2 = 0.125 * 0.125;
        assert!(
            rep.v_minus_div_b.0.abs() < 60.0 * h2,
            "min(V − div_h b) = {}",
            rep.v_minus_div_b.0
        );
    }

    #[test]
    fn adjoint_swaps_and_transposes() {
        let spec = small_box();
        let c = Coefficients::case2(
            spec.clone(),
            &AKind::Diagonal { entries: [2.0, 1.0, 1.5] },
            &VectorPreset::Constant { value: [0.1, 0.0, -0.2] },
            &VectorPreset::Zero,
            &PotentialPreset::Constant { value: 1.0 },
            Exponents { p: 2.0, s: 4.0, t: 4.0 },
        )
        .unwrap();
        let adj = c.adjoint();
        let node = spec.idx([4, 4, 4]);
        for alpha in 0..DIM {
            for beta in 0..DIM {
                assert_eq!(adj.a(node, alpha, beta, 0, 0), c.a(node, beta, alpha, 0, 0));
            }
            assert_eq!(adj.b(node, alpha, 0, 0), c.d(node, alpha, 0, 0));
            assert_eq!(adj.d(node, alpha, 0, 0), c.b(node, alpha, 0, 0));
        }
        // Double adjoint is the identity.
        let back = adj.adjoint();
        assert_eq!(back.a, c.a);
        assert_eq!(back.b, c.b);
        assert_eq!(back.d, c.d);
        assert_eq!(back.v, c.v);
    }

    #[test]
    fn potential_presets_evaluate() {
        let center = [0.0; 3];
        let rp = PotentialPreset::RadialPower { alpha: 2.0, amplitude: 3.0 };
        assert!((rp.eval([1.0, 0.0, 0.0], center) - 3.0).abs() < 1e-15);
        let aq = PotentialPreset::AnisotropicQuadratic { coeffs: [1.0, 2.0, 3.0] };
        assert!((aq.eval([1.0, 1.0, 1.0], center) - 6.0).abs() < 1e-15);
        let cb = PotentialPreset::Checkerboard { low: 1.0, high: 4.0, cell: 0.5 };
        assert_eq!(cb.eval([0.1, 0.1, 0.1], center), 4.0);
        assert_eq!(cb.eval([0.6, 0.1, 0.1], center), 1.0);
        let ln = PotentialPreset::LogNormalRandom { seed: 1, sigma: 0.5, modes: 4 };
        let v = ln.eval([0.3, -0.2, 0.7], center);
        assert!(v > 0.0 && v.is_finite());
        // Determinism under the same seed.
        assert_eq!(v, ln.eval([0.3, -0.2, 0.7], center));
    }
}
