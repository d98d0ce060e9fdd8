//! Scale function m(x, V) of a nonnegative potential and its derived objects:
//! the normalized ball mass ψ(x, r; V), reverse-Hölder constants, doubling /
//! comparability constants, the uncertainty-principle coercivity ratio, and
//! the Agmon path metric built from m.
//!
//! ```text
//! ψ(x, r; V) = r^{2−n} ∫_{B(x,r)} V(y) dy    (n = 3, so the prefactor is 1/r)
//! m(x, V)    = 1 / r*,  where ψ(x, r*) = 1  (largest crossing)
//! ```
//!
//! Three integration routes compute ψ, and [`PsiRoute::Auto`] picks the best
//! available one per call:
//!
//! * **closed form** — constant, centered quadratic-radial, and axis-aligned
//!   quadratic potentials integrate exactly over any ball;
//! * **node quadrature** — a sum over grid nodes with linear ramp weights
//!   across the ball surface (each node contributes `h³·clamp((r + h/2 − d)/h)`);
//!   requires `r ≥ 2h` and the padded ball inside the grid box;
//! * **spherical quadrature** — composite Simpson in radius × an 8-point
//!   Gauss–Legendre (polar) × 16-point uniform (azimuth) product rule on
//!   spheres, sampling the analytic preset; valid at any radius, including
//!   balls that leave the grid box, which is how integrals extend past the
//!   grid.
//!
//! A field built from node values alone (no preset) is confined to the node
//! route and rejects radii the grid cannot resolve.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::PotentialPreset;
use crate::grid::{discrete_gradient, GridFunction, GridSpec};
use crate::{Error, Result};

/// Relative width of the bisection bracket around the ψ = 1 crossing radius.
const CROSSING_REL_TOL: f64 = 1e-8;
/// Cap on bracket doublings/halvings before declaring no crossing.
const BRACKET_STEPS: usize = 60;
/// Radial Simpson intervals for the spherical route (must be even).
const RADIAL_INTERVALS: usize = 64;
/// 8-point Gauss–Legendre half-nodes and weights on [−1, 1] (used as ±node).
const GL8: [(f64, f64); 4] = [
    (0.183_434_642_495_649_8, 0.362_683_783_378_362_0),
    (0.525_532_409_916_329_0, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_5),
    (0.960_289_856_497_536_2, 0.101_228_536_290_376_3),
];
const AZIMUTH_POINTS: usize = 16;

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// True when the Euclidean ball B(x, r) lies inside the grid's bounding box
/// (mask-independent; node values exist at every box node).
fn ball_fits_box(spec: &GridSpec, x: [f64; 3], r: f64) -> bool {
    let origin = spec.origin();
    let ext = spec.extent();
    (0..3).all(|a| x[a] - r >= origin[a] && x[a] + r <= origin[a] + ext[a])
}

/// How ψ(x, r) is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsiRoute {
    /// Closed form when available, else node quadrature when the grid
    /// resolves the ball, else spherical sampling of the preset.
    Auto,
    /// Force the grid-node ramp quadrature (errors if `r < 2h` or the padded
    /// ball leaves the box).
    NodeQuadrature,
    /// Force the radial × angular product rule (errors without a preset).
    Spherical,
}

/// A nonnegative scalar potential on a grid, optionally backed by an analytic
/// preset so integrals can leave the grid box.
#[derive(Debug, Clone)]
pub struct PotentialField {
    values: GridFunction,
    preset: Option<PotentialPreset>,
    center: [f64; 3],
    /// Nodes where the preset is non-finite (an integrable point singularity
    /// sitting exactly on a node); stored as zero in `values`, and the
    /// node-quadrature route refuses balls containing one.
    singular: Vec<u32>,
}

impl PotentialField {
    /// Sample an analytic preset onto the grid, keeping the preset for
    /// off-grid evaluation. The preset is centered at the box center.
    pub fn from_preset(spec: Arc<GridSpec>, preset: PotentialPreset) -> Result<Self> {
        let center = spec.center();
        let mut values = GridFunction::zeros(spec.clone(), 1);
        let mut singular = Vec::new();
        for idx in 0..spec.node_count() {
            let v = preset.eval(spec.coords(idx), center);
            if v.is_finite() {
                if v < 0.0 {
                    return Err(Error::Potential(
                        "potential preset takes negative values on the grid".into(),
                    ));
                }
                values.set(0, idx, v);
            } else {
                singular.push(idx as u32);
            }
        }
        Ok(Self { values, preset: Some(preset), center, singular })
    }

    /// Wrap raw node values (one component, finite, nonnegative). Without a
    /// preset only the node-quadrature route is available, so ψ and m are
    /// restricted to balls the grid resolves.
    pub fn from_values(values: GridFunction) -> Result<Self> {
        if values.n_comp() != 1 {
            return Err(Error::Potential(format!(
                "potential must be scalar, got {} components",
                values.n_comp()
            )));
        }
        if !values.values().iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::Potential(
                "potential node values must be finite and nonnegative".into(),
            ));
        }
        let center = values.spec().center();
        Ok(Self { values, preset: None, center, singular: Vec::new() })
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        self.values.spec()
    }

    pub fn values(&self) -> &GridFunction {
        &self.values
    }

    pub fn preset(&self) -> Option<PotentialPreset> {
        self.preset
    }

    /// Center the preset is evaluated around (the box center).
    pub fn center(&self) -> [f64; 3] {
        self.center
    }

    /// Analytic point value, when a preset backs the field.
    pub fn eval_analytic(&self, x: [f64; 3]) -> Option<f64> {
        self.preset.map(|p| p.eval(x, self.center))
    }

    /// Exact ψ for presets whose ball integrals have closed forms.
    fn closed_form_psi(&self, x: [f64; 3], r: f64) -> Option<f64> {
        let c = self.center;
        match self.preset {
            Some(PotentialPreset::Constant { value }) => {
                Some(4.0 * PI / 3.0 * value * r * r)
            }
            Some(PotentialPreset::RadialPower { alpha, amplitude })
                if alpha == 2.0 =>
            {
                let d2: f64 = (0..3).map(|a| (x[a] - c[a]).powi(2)).sum();
                Some(amplitude * (4.0 * PI / 3.0 * d2 * r * r + 4.0 * PI / 5.0 * r.powi(4)))
            }
            Some(PotentialPreset::AnisotropicQuadratic { coeffs }) => {
                let moment: f64 =
                    (0..3).map(|a| coeffs[a] * (x[a] - c[a]).powi(2)).sum();
                let trace: f64 = coeffs.iter().sum();
                Some(4.0 * PI / 3.0 * moment * r * r + 4.0 * PI / 15.0 * trace * r.powi(4))
            }
            _ => None,
        }
    }

    /// True when the padded ball is one the node route can integrate.
    fn node_route_admissible(&self, x: [f64; 3], r: f64) -> bool {
        let spec = self.spec();
        let h = spec.h();
        let pad = r + 0.5 * h;
        r >= 2.0 * h
            && ball_fits_box(spec, x, pad)
            && self
                .singular
                .iter()
                .all(|&s| dist(spec.coords(s as usize), x) > pad)
    }

    fn psi_node_quadrature(&self, x: [f64; 3], r: f64) -> Result<f64> {
        let spec = self.spec().clone();
        let h = spec.h();
        if r < 2.0 * h {
            return Err(Error::Potential(format!(
                "node quadrature needs r ≥ 2h = {:.3e}, got r = {:.3e}",
                2.0 * h,
                r
            )));
        }
        let pad = r + 0.5 * h;
        if !ball_fits_box(&spec, x, pad) {
            return Err(Error::Potential(format!(
                "ball B({:?}, {:.3e}) padded by h/2 leaves the grid box; \
                 an analytic preset is required to integrate past the grid",
                x, r
            )));
        }
        if self.singular.iter().any(|&s| dist(spec.coords(s as usize), x) <= pad) {
            return Err(Error::Potential(
                "ball contains a node where the potential is singular; use \
                 the spherical route"
                    .into(),
            ));
        }
        let mut acc = 0.0;
        spec.for_nodes_in_ball(x, pad, |idx, coords| {
            let w = ((pad - dist(coords, x)) / h).clamp(0.0, 1.0);
            acc += w * self.values.value(0, idx);
        });
        Ok(acc * h * h * h / r)
    }

    /// Mean of the preset over the sphere of radius ρ around x
    /// (Gauss–Legendre in cos θ × uniform azimuth).
    fn sphere_mean(&self, preset: PotentialPreset, x: [f64; 3], rho: f64) -> f64 {
        let mut acc = 0.0;
        for &(node, weight) in &GL8 {
            for mu in [node, -node] {
                let s = (1.0 - mu * mu).max(0.0).sqrt();
                for k in 0..AZIMUTH_POINTS {
                    let phi = 2.0 * PI * (k as f64 + 0.5) / AZIMUTH_POINTS as f64;
                    let y = [
                        x[0] + rho * s * phi.cos(),
                        x[1] + rho * s * phi.sin(),
                        x[2] + rho * mu,
                    ];
                    acc += weight * preset.eval(y, self.center);
                }
            }
        }
        // Polar weights sum to 2 and azimuth contributes AZIMUTH_POINTS terms.
        acc / (2.0 * AZIMUTH_POINTS as f64)
    }

    fn psi_spherical(&self, x: [f64; 3], r: f64) -> Result<f64> {
        let preset = self.preset.ok_or_else(|| {
            Error::Potential(
                "spherical quadrature requires an analytic preset".into(),
            )
        })?;
        let dr = r / RADIAL_INTERVALS as f64;
        let mut acc = 0.0;
        for i in 0..=RADIAL_INTERVALS {
            let rho = i as f64 * dr;
            let mut g = if rho == 0.0 {
                0.0
            } else {
                rho * rho * self.sphere_mean(preset, x, rho)
            };
            // ρ²·V stays integrable for the admissible singular presets
            // (|y|^α with α > −2); a sphere sample landing exactly on the
            // singular point contributes its zero-measure limit.
            if !g.is_finite() {
                g = 0.0;
            }
            let coeff = if i == 0 || i == RADIAL_INTERVALS {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += coeff * g;
        }
        Ok(4.0 * PI * acc * dr / 3.0 / r)
    }

    /// Normalized ball mass ψ(x, r) = (1/r) ∫_{B(x,r)} V.
    pub fn psi(&self, x: [f64; 3], r: f64, route: PsiRoute) -> Result<f64> {
        if !(r > 0.0) || !r.is_finite() || x.iter().any(|c| !c.is_finite()) {
            return Err(Error::Potential(format!(
                "psi needs a finite point and radius r > 0, got x = {:?}, r = {}",
                x, r
            )));
        }
        match route {
            PsiRoute::NodeQuadrature => self.psi_node_quadrature(x, r),
            PsiRoute::Spherical => self.psi_spherical(x, r),
            PsiRoute::Auto => {
                if let Some(v) = self.closed_form_psi(x, r) {
                    return Ok(v);
                }
                if self.node_route_admissible(x, r) {
                    return self.psi_node_quadrature(x, r);
                }
                if self.preset.is_some() {
                    return self.psi_spherical(x, r);
                }
                Err(Error::Potential(format!(
                    "ψ at x = {:?}, r = {:.3e} is outside what the grid \
                     resolves (needs 2h ≤ r and the ball inside the box) and \
                     no analytic preset is attached",
                    x, r
                )))
            }
        }
    }

    /// Scale function m(x, V) = 1/r* with ψ(x, r*) = 1.
    ///
    /// Brackets the crossing by doubling (from below) or halving (from above)
    /// starting at r = 1, then bisects to relative width 1e-8. Stepping down
    /// from above lands on the **largest** crossing when quadrature noise
    /// makes ψ non-monotone; the returned radius r* = lo keeps ψ(r*) ≤ 1.
    pub fn m_of_x(&self, x: [f64; 3], route: PsiRoute) -> Result<f64> {
        let mut lo;
        let mut hi;
        let mut r = 1.0;
        if self.psi(x, r, route)? <= 1.0 {
            let mut steps = 0;
            loop {
                let next = 2.0 * r;
                if self.psi(x, next, route)? > 1.0 {
                    lo = r;
                    hi = next;
                    break;
                }
                r = next;
                steps += 1;
                if steps >= BRACKET_STEPS {
                    return Err(Error::Potential(format!(
                        "ψ({:?}, r) never exceeds 1 up to r = {:.3e}; the \
                         potential is too small to set a scale",
                        x, r
                    )));
                }
            }
        } else {
            let mut steps = 0;
            loop {
                let next = 0.5 * r;
                if self.psi(x, next, route)? <= 1.0 {
                    lo = next;
                    hi = r;
                    break;
                }
                r = next;
                steps += 1;
                if steps >= BRACKET_STEPS {
                    return Err(Error::Potential(format!(
                        "ψ({:?}, r) stays above 1 down to r = {:.3e}; the \
                         potential is too singular to set a scale",
                        x, r
                    )));
                }
            }
        }
        while hi - lo > CROSSING_REL_TOL * lo {
            let mid = 0.5 * (lo + hi);
            if self.psi(x, mid, route)? <= 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(1.0 / lo)
    }

    /// m at every node carrying quadrature weight (mask ∪ boundary); zero on
    /// excluded nodes. Constant potentials short-circuit to the closed form
    /// m = √(4πc/3).
    pub fn m_field(&self, route: PsiRoute) -> Result<GridFunction> {
        let spec = self.spec().clone();
        if let Some(PotentialPreset::Constant { value }) = self.preset {
            let m = (4.0 * PI / 3.0 * value).sqrt();
            if !m.is_finite() || m == 0.0 {
                return Err(Error::Potential(
                    "constant potential must be positive to define a scale".into(),
                ));
            }
            let mut out = GridFunction::zeros(spec.clone(), 1);
            for idx in 0..spec.node_count() {
                if spec.in_mask(idx) || spec.on_boundary(idx) {
                    out.set(0, idx, m);
                }
            }
            return Ok(out);
        }
        let entries: Result<Vec<(usize, f64)>> = (0..spec.node_count())
            .into_par_iter()
            .filter(|&idx| spec.in_mask(idx) || spec.on_boundary(idx))
            .map(|idx| Ok((idx, self.m_of_x(spec.coords(idx), route)?)))
            .collect();
        let mut out = GridFunction::zeros(spec, 1);
        for (idx, m) in entries? {
            out.set(0, idx, m);
        }
        Ok(out)
    }

    /// Ball means (⨍_B V, ⨍_B V^p) by the ramp-weight node quadrature.
    pub fn ball_averages(&self, center: [f64; 3], r: f64, p: f64) -> Result<(f64, f64)> {
        let spec = self.spec().clone();
        let h = spec.h();
        if r < 2.0 * h || !ball_fits_box(&spec, center, r + 0.5 * h) {
            return Err(Error::Potential(format!(
                "ball averages need 2h ≤ r and the padded ball inside the \
                 box; got center {:?}, r = {:.3e}",
                center, r
            )));
        }
        let pad = r + 0.5 * h;
        if self.singular.iter().any(|&s| dist(spec.coords(s as usize), center) <= pad) {
            return Err(Error::Potential(
                "ball contains a node where the potential is singular".into(),
            ));
        }
        let (mut total, mut mass, mut mass_p) = (0.0, 0.0, 0.0);
        spec.for_nodes_in_ball(center, pad, |idx, coords| {
            let v = self.values.value(0, idx);
            let w = ((pad - dist(coords, center)) / h).clamp(0.0, 1.0);
            total += w;
            mass += w * v;
            mass_p += w * v.powf(p);
        });
        if total == 0.0 {
            return Err(Error::Potential(
                "ball contains no quadrature nodes".into(),
            ));
        }
        Ok((mass / total, mass_p / total))
    }

    /// (⨍_B V^p)^{1/p} / ⨍_B V for one ball; errors when the ball mass is 0.
    pub fn reverse_holder_ratio(&self, center: [f64; 3], r: f64, p: f64) -> Result<f64> {
        let (mean, mean_p) = self.ball_averages(center, r, p)?;
        if mean == 0.0 {
            return Err(Error::Potential(
                "potential vanishes on the ball; the ratio is undefined".into(),
            ));
        }
        Ok(mean_p.powf(1.0 / p) / mean)
    }

    /// Empirical reverse-Hölder constant: the largest single-ball ratio
    /// sup_B (⨍_B V^p)^{1/p} / ⨍_B V over a dyadic center family plus seeded
    /// random balls. Rough presets (checkerboard, log-normal) keep centers in
    /// the middle third of the box so ramp weights resolve their cells.
    pub fn bp_constant(&self, p: f64, n_samples: usize, seed: u64) -> Result<BpReport> {
        if !(p >= 1.0) || !p.is_finite() {
            return Err(Error::Potential(format!("need p ≥ 1, got {}", p)));
        }
        if n_samples < 200 {
            return Err(Error::Potential(format!(
                "ball sampling needs at least 200 balls, got {}",
                n_samples
            )));
        }
        let spec = self.spec().clone();
        let h = spec.h();
        let ext = spec.extent();
        let origin = spec.origin();
        let min_ext = ext[0].min(ext[1]).min(ext[2]);
        let rough = matches!(
            self.preset,
            Some(PotentialPreset::LogNormalRandom { .. })
                | Some(PotentialPreset::Checkerboard { .. })
        ) || self.preset.is_none();

        let mut balls: Vec<([f64; 3], f64)> = Vec::with_capacity(n_samples);
        let mut r = 2.0 * h;
        while ball_fits_box(&spec, self.center, r + 0.5 * h) {
            balls.push((self.center, r));
            r *= 2.0;
        }
        let r_min = 2.0 * h;
        let r_max = if rough { min_ext / 6.0 } else { 0.45 * min_ext };
        if r_max <= r_min {
            return Err(Error::Potential(
                "grid too coarse to sample balls (r_max ≤ 2h)".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut attempts = 0usize;
        while balls.len() < n_samples {
            attempts += 1;
            if attempts > 20 * n_samples {
                return Err(Error::Potential(
                    "could not place the requested number of balls".into(),
                ));
            }
            let radius = r_min * (r_max / r_min).powf(rng.random::<f64>());
            let mut center = [0.0; 3];
            let mut feasible = true;
            for a in 0..3 {
                let mut lo = origin[a] + radius + 0.5 * h;
                let mut hi = origin[a] + ext[a] - radius - 0.5 * h;
                if rough {
                    lo = lo.max(origin[a] + ext[a] / 3.0);
                    hi = hi.min(origin[a] + 2.0 * ext[a] / 3.0);
                }
                if lo > hi {
                    feasible = false;
                    break;
                }
                center[a] = lo + (hi - lo) * rng.random::<f64>();
            }
            if feasible {
                balls.push((center, radius));
            }
        }

        let mut best: Option<(f64, [f64; 3], f64)> = None;
        let mut used = 0usize;
        for &(center, radius) in &balls {
            let (mean, mean_p) = self.ball_averages(center, radius, p)?;
            if mean == 0.0 {
                continue;
            }
            used += 1;
            let ratio = mean_p.powf(1.0 / p) / mean;
            if best.map_or(true, |(b, _, _)| ratio > b) {
                best = Some((ratio, center, radius));
            }
        }
        let (constant, witness_center, witness_radius) = best.ok_or_else(|| {
            Error::Potential("potential vanishes on every sampled ball".into())
        })?;
        Ok(BpReport { p, constant, witness_center, witness_radius, n_balls: used })
    }

    /// Fit the two-sided comparability bands between m at paired points:
    /// the smallest exponent k₀ (with its constant C ≥ 1) for
    /// m(y) ≤ C (1 + |x−y| m(x))^{k₀} m(x), the matching lower constant c for
    /// m(y) ≥ c m(x) (1 + |x−y| m(x))^{−k₀/(k₀+1)}, and the flat band factor
    /// over pairs closer than one scale length (|x−y| ≤ 1/m(x)).
    pub fn verify_m_comparability(
        &self,
        n_pairs: usize,
        seed: u64,
        route: PsiRoute,
    ) -> Result<ComparabilityReport> {
        if n_pairs < 500 {
            return Err(Error::Potential(format!(
                "comparability needs at least 500 pairs, got {}",
                n_pairs
            )));
        }
        let spec = self.spec().clone();
        let dof = spec.dof_nodes();
        if dof.len() < 2 {
            return Err(Error::Potential("mask has fewer than 2 nodes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cache: HashMap<u32, f64> = HashMap::new();
        let mut m_at = |node: u32, field: &Self| -> Result<f64> {
            if let Some(&m) = cache.get(&node) {
                return Ok(m);
            }
            let m = field.m_of_x(spec.coords(node as usize), route)?;
            cache.insert(node, m);
            Ok(m)
        };
        // (ratio m(y)/m(x), t = |x−y|·m(x)) for both orientations of each pair.
        let mut samples: Vec<(f64, f64)> = Vec::with_capacity(2 * n_pairs);
        for _ in 0..n_pairs {
            let a = dof[rng.random_range(0..dof.len())];
            let b = loop {
                let b = dof[rng.random_range(0..dof.len())];
                if b != a {
                    break b;
                }
            };
            let (ma, mb) = (m_at(a, self)?, m_at(b, self)?);
            let d = dist(spec.coords(a as usize), spec.coords(b as usize));
            samples.push((mb / ma, d * ma));
            samples.push((ma / mb, d * mb));
        }

        let logs: Vec<(f64, f64)> =
            samples.iter().map(|&(r, t)| (r.ln(), (1.0 + t).ln())).collect();
        // C(k₀) = max(1, max_i ratio_i (1+t_i)^{−k₀}), on a 0.05-step grid.
        let grid: Vec<f64> = (0..=160).map(|j| 0.05 * j as f64).collect();
        let cs: Vec<f64> = grid
            .iter()
            .map(|&k| {
                let worst = logs
                    .iter()
                    .map(|&(lr, lt)| lr - k * lt)
                    .fold(f64::NEG_INFINITY, f64::max);
                worst.exp().max(1.0)
            })
            .collect();
        let c_min = cs.iter().cloned().fold(f64::INFINITY, f64::min);
        let pick = cs
            .iter()
            .position(|&c| c <= 1.05 * c_min)
            .expect("grid minimum exists");
        let k0 = grid[pick];
        let big_c = cs[pick];
        let exponent = k0 / (k0 + 1.0);
        let small_c = samples
            .iter()
            .map(|&(r, t)| r * (1.0 + t).powf(exponent))
            .fold(f64::INFINITY, f64::min)
            .min(1.0);
        let close: Vec<f64> = samples
            .iter()
            .filter(|&&(_, t)| t <= 1.0)
            .map(|&(r, _)| r.max(1.0 / r))
            .collect();
        let a_band = close.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(ComparabilityReport {
            n_pairs,
            k0,
            big_c,
            small_c,
            close_pairs: close.len(),
            a_band: if close.is_empty() { None } else { Some(a_band) },
        })
    }

    /// Empirical uncertainty-principle constant: the largest observed
    /// ∫u²m² / (∫|Du|² + ∫u²V) over seeded compact bumps
    /// u = ((1 − |x−c|²/w²)₊)². The spec-side bound is C·(4π/3)-type; the
    /// report carries the witness bump.
    pub fn fefferman_phong_check(
        &self,
        m: &GridFunction,
        n_trials: usize,
        seed: u64,
    ) -> Result<FpReport> {
        if n_trials < 50 {
            return Err(Error::Potential(format!(
                "uncertainty-principle check needs at least 50 bumps, got {}",
                n_trials
            )));
        }
        let spec = self.spec().clone();
        let h = spec.h();
        let ext = spec.extent();
        let min_ext = ext[0].min(ext[1]).min(ext[2]);
        let dof = spec.dof_nodes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best: Option<(f64, [f64; 3], f64)> = None;
        let mut done = 0usize;
        let mut attempts = 0usize;
        while done < n_trials {
            attempts += 1;
            if attempts > 50 * n_trials {
                return Err(Error::Potential(
                    "could not place the requested number of bumps (domain \
                     too thin for width ≥ 3h)"
                        .into(),
                ));
            }
            let node = dof[rng.random_range(0..dof.len())] as usize;
            let center = spec.coords(node);
            let w_max = (0.35 * min_ext).min(spec.dist_to_boundary(center));
            let w_min = 3.0 * h;
            if w_max <= w_min {
                continue;
            }
            let width = w_min + (w_max - w_min) * rng.random::<f64>();
            let bump = GridFunction::from_scalar_fn(spec.clone(), |x| {
                let t = 1.0 - (dist(x, center) / width).powi(2);
                if t > 0.0 {
                    t * t
                } else {
                    0.0
                }
            })?;
            let ratio = fp_ratio(self, m, &bump)?;
            done += 1;
            if best.map_or(true, |(b, _, _)| ratio > b) {
                best = Some((ratio, center, width));
            }
        }
        let (empirical_c, witness_center, witness_width) =
            best.expect("at least one bump was evaluated");
        Ok(FpReport { n_trials, empirical_c, witness_center, witness_width })
    }
}

/// Single-function uncertainty-principle ratio ∫u²m² / (∫|Du|² + ∫u²V),
/// integrated with the grid quadrature weights.
pub fn fp_ratio(field: &PotentialField, m: &GridFunction, u: &GridFunction) -> Result<f64> {
    let spec = field.spec().clone();
    if !Arc::ptr_eq(u.spec(), &spec) || !Arc::ptr_eq(m.spec(), &spec) {
        return Err(Error::Potential(
            "potential, scale field and test function must share a grid".into(),
        ));
    }
    if u.n_comp() != 1 || m.n_comp() != 1 {
        return Err(Error::Potential("scale and test fields must be scalar".into()));
    }
    let grad = discrete_gradient(u);
    let (mut num, mut den) = (0.0, 0.0);
    for idx in 0..spec.node_count() {
        let qw = spec.quad_weight(idx);
        if qw == 0.0 {
            continue;
        }
        let uv = u.value(0, idx);
        let mv = m.value(0, idx);
        let g2: f64 = (0..3).map(|a| grad.value(a, idx).powi(2)).sum();
        num += qw * uv * uv * mv * mv;
        den += qw * (g2 + uv * uv * field.values().value(0, idx));
    }
    if den == 0.0 {
        return Err(Error::Potential(
            "test function has zero energy; the ratio is undefined".into(),
        ));
    }
    Ok(num / den)
}

/// Largest single-ball reverse-Hölder ratio with its witness ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BpReport {
    pub p: f64,
    pub constant: f64,
    pub witness_center: [f64; 3],
    pub witness_radius: f64,
    /// Balls with positive mass that entered the maximum.
    pub n_balls: usize,
}

/// Fitted comparability constants between m at paired points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparabilityReport {
    pub n_pairs: usize,
    /// Smallest grid exponent whose constant is within 5% of the best fit.
    pub k0: f64,
    /// Upper constant C ≥ 1 at k₀.
    pub big_c: f64,
    /// Lower constant c ≤ 1 at exponent k₀/(k₀+1).
    pub small_c: f64,
    /// Pairs with |x−y| ≤ 1/m(x).
    pub close_pairs: usize,
    /// Flat band factor a with m(y)/m(x) ∈ [1/a, a] on close pairs.
    pub a_band: Option<f64>,
}

/// Largest observed uncertainty-principle ratio with its witness bump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpReport {
    pub n_trials: usize,
    pub empirical_c: f64,
    pub witness_center: [f64; 3],
    pub witness_width: f64,
}

/// Weighted 26-neighbor graph over masked nodes whose shortest paths realize
/// the Agmon path metric d(x, y) = inf over paths of ∫ m: each edge costs its
/// Euclidean length times the endpoint-mean of m.
pub struct AgmonGraph {
    spec: Arc<GridSpec>,
    m: Vec<f64>,
    offsets: Vec<([i64; 3], f64)>,
}

#[derive(PartialEq)]
struct HeapItem {
    dist: f64,
    node: u32,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed so BinaryHeap pops the smallest distance first.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl AgmonGraph {
    /// Build from a scalar scale field (finite, nonnegative on the mask).
    pub fn new(m: &GridFunction) -> Result<Self> {
        if m.n_comp() != 1 {
            return Err(Error::Potential("scale field must be scalar".into()));
        }
        let spec = m.spec().clone();
        for &node in spec.dof_nodes() {
            let v = m.value(0, node as usize);
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Potential(format!(
                    "scale field must be finite and nonnegative on the mask; \
                     node {} carries {}",
                    node, v
                )));
            }
        }
        let h = spec.h();
        let mut offsets = Vec::with_capacity(26);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let len = h * ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                    offsets.push(([dx, dy, dz], len));
                }
            }
        }
        Ok(Self { spec, m: m.component(0).to_vec(), offsets })
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.spec
    }

    fn require_masked(&self, node: usize) -> Result<()> {
        if node >= self.spec.node_count() || !self.spec.in_mask(node) {
            return Err(Error::Potential(format!(
                "node {} is not a masked graph vertex",
                node
            )));
        }
        Ok(())
    }

    fn dijkstra(&self, from: usize, stop_at: Option<usize>) -> Vec<f64> {
        let n = self.spec.node_count();
        let dims = self.spec.dims();
        let mut dist = vec![f64::INFINITY; n];
        let mut heap = BinaryHeap::new();
        dist[from] = 0.0;
        heap.push(HeapItem { dist: 0.0, node: from as u32 });
        while let Some(HeapItem { dist: d, node }) = heap.pop() {
            let node = node as usize;
            if d > dist[node] {
                continue;
            }
            if stop_at == Some(node) {
                break;
            }
            let mi = self.spec.multi(node);
            for &(off, len) in &self.offsets {
                let mut nb = [0usize; 3];
                let mut inside = true;
                for a in 0..3 {
                    let t = mi[a] as i64 + off[a];
                    if t < 0 || t >= dims[a] as i64 {
                        inside = false;
                        break;
                    }
                    nb[a] = t as usize;
                }
                if !inside {
                    continue;
                }
                let nidx = self.spec.idx(nb);
                if !self.spec.in_mask(nidx) {
                    continue;
                }
                let next = d + len * 0.5 * (self.m[node] + self.m[nidx]);
                if next < dist[nidx] {
                    dist[nidx] = next;
                    heap.push(HeapItem { dist: next, node: nidx as u32 });
                }
            }
        }
        dist
    }

    /// Shortest-path distance between two masked nodes.
    pub fn distance(&self, from: usize, to: usize) -> Result<f64> {
        self.require_masked(from)?;
        self.require_masked(to)?;
        let d = self.dijkstra(from, Some(to))[to];
        if d.is_finite() {
            Ok(d)
        } else {
            Err(Error::Potential(format!(
                "nodes {} and {} are not connected inside the mask",
                from, to
            )))
        }
    }

    /// Distances from one masked node to every node (∞ off the component).
    pub fn distances_from(&self, from: usize) -> Result<Vec<f64>> {
        self.require_masked(from)?;
        Ok(self.dijkstra(from, None))
    }

    /// Distance between arbitrary points, snapped to their nearest masked
    /// nodes (so off-grid or near-wall inputs still resolve).
    pub fn distance_between(&self, x: [f64; 3], y: [f64; 3]) -> Result<f64> {
        let a = self.nearest_masked(x)?;
        let b = self.nearest_masked(y)?;
        self.distance(a, b)
    }

    pub fn nearest_masked(&self, x: [f64; 3]) -> Result<usize> {
        let guess = self.spec.nearest_node(x);
        if self.spec.in_mask(guess) {
            return Ok(guess);
        }
        self.spec
            .dof_nodes()
            .iter()
            .map(|&n| (n as usize, dist(self.spec.coords(n as usize), x)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(n, _)| n)
            .ok_or_else(|| Error::Potential("mask is empty".into()))
    }
}

/// Write `(x, m)` rows ("x0,x1,x2,m") for every node carrying quadrature
/// weight.
pub fn export_m_samples(m: &GridFunction, path: impl AsRef<Path>) -> Result<()> {
    if m.n_comp() != 1 {
        return Err(Error::Potential("scale field must be scalar".into()));
    }
    let spec = m.spec();
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "x0,x1,x2,m")?;
    for idx in 0..spec.node_count() {
        if spec.quad_weight(idx) == 0.0 {
            continue;
        }
        let c = spec.coords(idx);
        writeln!(out, "{},{},{},{}", c[0], c[1], c[2], m.value(0, idx))?;
    }
    out.flush()?;
    Ok(())
}

/// Write `(x, y, d)` rows ("x0,x1,x2,y0,y1,y2,d") for the given node pairs,
/// running one shortest-path sweep per distinct source.
pub fn export_agmon_triples(
    graph: &AgmonGraph,
    pairs: &[(usize, usize)],
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut sweeps: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(from, _) in pairs {
        if !sweeps.contains_key(&from) {
            sweeps.insert(from, graph.distances_from(from)?);
        }
    }
    let spec = graph.spec();
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "x0,x1,x2,y0,y1,y2,d")?;
    for &(from, to) in pairs {
        let d = sweeps[&from][to];
        if !d.is_finite() {
            return Err(Error::Potential(format!(
                "nodes {} and {} are not connected inside the mask",
                from, to
            )));
        }
        let a = spec.coords(from);
        let b = spec.coords(to);
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            a[0], a[1], a[2], b[0], b[1], b[2], d
        )?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, DomainPreset};

    fn unit_box(n: usize) -> Arc<GridSpec> {
        make_grid([n; 3], 1.0 / (n - 1) as f64, [0.0; 3], DomainPreset::FullBox)
            .unwrap()
    }

    /// Box [−half, half]³ with n nodes per axis.
    fn centered_box(n: usize, half: f64) -> Arc<GridSpec> {
        make_grid(
            [n; 3],
            2.0 * half / (n - 1) as f64,
            [-half; 3],
            DomainPreset::FullBox,
        )
        .unwrap()
    }

    fn constant_field(spec: Arc<GridSpec>, value: f64) -> PotentialField {
        PotentialField::from_preset(spec, PotentialPreset::Constant { value }).unwrap()
    }

    #[test]
    fn psi_of_zero_potential_is_zero() {
        let spec = unit_box(17);
        let h = spec.h();
        let zero = GridFunction::zeros(spec.clone(), 1);
        let field = PotentialField::from_values(zero).unwrap();
        let c = spec.center();
        assert_eq!(field.psi(c, 4.0 * h, PsiRoute::Auto).unwrap(), 0.0);
        assert_eq!(field.psi(c, 4.0 * h, PsiRoute::NodeQuadrature).unwrap(), 0.0);
        // No crossing radius exists, so the scale is undefined.
        assert!(field.m_of_x(c, PsiRoute::Auto).is_err());
    }

    #[test]
    fn psi_constant_matches_closed_form_on_all_routes() {
        let spec = unit_box(17);
        let h = spec.h();
        let field = constant_field(spec.clone(), 1.0);
        let c = spec.center();
        // Node route needs the h/2-padded ball inside the box, so r ≤ 7h here.
        for k in [4.0, 6.0, 7.0] {
            let r = k * h;
            let exact = 4.0 * PI / 3.0 * r * r;
            let auto = field.psi(c, r, PsiRoute::Auto).unwrap();
            assert!((auto - exact).abs() <= 1e-14 * exact, "closed form is exact");
            let node = field.psi(c, r, PsiRoute::NodeQuadrature).unwrap();
            assert!(
                (node - exact).abs() <= 0.03 * exact,
                "node quadrature at r = {k}h: {node} vs {exact}"
            );
            let sph = field.psi(c, r, PsiRoute::Spherical).unwrap();
            assert!((sph - exact).abs() <= 1e-12 * exact, "Simpson exact on ρ²");
        }
    }

    #[test]
    fn psi_quadratic_potential_matches_quartic_law() {
        // V = |y|² around the origin: ψ(0, r) = (4π/5) r⁴.
        let spec = centered_box(17, 1.0);
        let h = spec.h();
        let field = PotentialField::from_preset(
            spec,
            PotentialPreset::RadialPower { alpha: 2.0, amplitude: 1.0 },
        )
        .unwrap();
        for r in [0.25f64, 0.5, 0.75] {
            let exact = 4.0 * PI / 5.0 * r.powi(4);
            let auto = field.psi([0.0; 3], r, PsiRoute::Auto).unwrap();
            assert!((auto - exact).abs() <= 1e-13 * exact);
            let sph = field.psi([0.0; 3], r, PsiRoute::Spherical).unwrap();
            assert!(
                (sph - exact).abs() <= 1e-6 * exact,
                "spherical at r = {r}: {sph} vs {exact}"
            );
        }
        let r = 6.0 * h;
        let exact = 4.0 * PI / 5.0 * r.powi(4);
        let node = field.psi([0.0; 3], r, PsiRoute::NodeQuadrature).unwrap();
        assert!((node - exact).abs() <= 0.03 * exact, "{node} vs {exact}");
    }

    #[test]
    fn psi_power_law_exponent_matches_radial_growth() {
        // ψ(center, r) for V = |y|^α grows exactly like r^{2+α}; the spherical
        // rule is self-similar in r, so the dyadic slope is exact to rounding.
        let spec = centered_box(17, 1.0);
        for alpha in [-1.5, -1.0, 1.0, 3.0] {
            let field = PotentialField::from_preset(
                spec.clone(),
                PotentialPreset::RadialPower { alpha, amplitude: 1.0 },
            )
            .unwrap();
            let r = 0.3;
            let lo = field.psi([0.0; 3], r, PsiRoute::Spherical).unwrap();
            let hi = field.psi([0.0; 3], 2.0 * r, PsiRoute::Spherical).unwrap();
            let slope = (hi / lo).log2();
            assert!(
                (slope - (2.0 + alpha)).abs() <= 1e-9,
                "alpha = {alpha}: slope {slope}"
            );
        }
    }

    #[test]
    fn psi_rejects_unresolvable_radii_without_preset() {
        let spec = unit_box(17);
        let h = spec.h();
        let ones =
            GridFunction::from_scalar_fn(spec.clone(), |_| 1.0).unwrap();
        let field = PotentialField::from_values(ones).unwrap();
        let c = spec.center();
        // Ball leaves the box: no preset to extend with.
        assert!(field.psi(c, 2.0, PsiRoute::Auto).is_err());
        // Radius below 2h: the grid cannot resolve it.
        assert!(field.psi(c, h, PsiRoute::Auto).is_err());
        // With a preset both fall back to the spherical route.
        let preset_field = constant_field(spec.clone(), 1.0);
        assert!(preset_field.psi(c, 2.0, PsiRoute::Spherical).is_ok());
        assert!(preset_field.psi(c, h, PsiRoute::Spherical).is_ok());
        // Bad inputs are rejected outright.
        assert!(field.psi(c, 0.0, PsiRoute::Auto).is_err());
        assert!(field.psi(c, -1.0, PsiRoute::Auto).is_err());
        assert!(field.psi([f64::NAN, 0.0, 0.0], 0.1, PsiRoute::Auto).is_err());
    }

    #[test]
    fn m_of_constant_potential_matches_closed_form() {
        // ψ = (4π/3) c r² = 1 at r = (4πc/3)^{−1/2}, so m = √(4πc/3).
        let spec = unit_box(17);
        let f1 = constant_field(spec.clone(), 1.0);
        let f4 = constant_field(spec.clone(), 4.0);
        let expect = (4.0 * PI / 3.0f64).sqrt();
        for x in [spec.center(), [0.25, 0.125, 0.8125], [0.0, 0.0, 0.0]] {
            let m1 = f1.m_of_x(x, PsiRoute::Auto).unwrap();
            assert!((m1 - expect).abs() <= 1e-7 * expect, "m = {m1}");
            // Scaling V → 4V doubles the scale function exactly.
            let m4 = f4.m_of_x(x, PsiRoute::Auto).unwrap();
            assert!((m4 - 2.0 * m1).abs() <= 1e-7 * m1);
        }
    }

    #[test]
    fn m_from_node_quadrature_matches_preset_value() {
        // Values-only field (V ≡ 1) on [0, 4]³: the whole bracket search stays
        // inside radii the node route resolves (0.25 ≤ r ≤ 1 + h/2 in-box).
        let spec = make_grid([33; 3], 0.125, [0.0; 3], DomainPreset::FullBox).unwrap();
        let ones = GridFunction::from_scalar_fn(spec.clone(), |_| 1.0).unwrap();
        let field = PotentialField::from_values(ones).unwrap();
        let expect = (4.0 * PI / 3.0f64).sqrt();
        let m = field.m_of_x(spec.center(), PsiRoute::Auto).unwrap();
        assert!(
            (m - expect).abs() <= 0.02 * expect,
            "node-route m = {m} vs {expect}"
        );
        // Near a corner the bracketing ball leaves the box and there is no
        // preset to extend with.
        assert!(field.m_of_x([0.25, 0.25, 0.25], PsiRoute::Auto).is_err());
    }

    #[test]
    fn m_off_center_quadratic_matches_quadratic_formula_oracle() {
        // V = |y|², x = (2, 0, 0): ψ(x, r) = (16π/3) r² + (4π/5) r⁴, so the
        // crossing solves (4π/5) s² + (16π/3) s − 1 = 0 in s = r².
        let spec = centered_box(25, 3.0);
        let field = PotentialField::from_preset(
            spec,
            PotentialPreset::RadialPower { alpha: 2.0, amplitude: 1.0 },
        )
        .unwrap();
        let x = [2.0, 0.0, 0.0];
        let (qa, qb) = (4.0 * PI / 5.0, 16.0 * PI / 3.0);
        let s = (-qb + (qb * qb + 4.0 * qa).sqrt()) / (2.0 * qa);
        let oracle = 1.0 / s.sqrt();
        let m = field.m_of_x(x, PsiRoute::Auto).unwrap();
        assert!((m - oracle).abs() <= 1e-7 * oracle, "m = {m} vs {oracle}");

        // Independent route: the sphere mean of |y|² at distance ρ from x is
        // |x|² + ρ², so a dense radial trapezoid rule must see ψ(1/m) = 1.
        let r = 1.0 / m;
        let steps = 4000;
        let dr = r / steps as f64;
        let mut integral = 0.0;
        for i in 0..steps {
            let a = i as f64 * dr;
            let b = a + dr;
            let g = |rho: f64| 4.0 * PI * rho * rho * (4.0 + rho * rho);
            integral += 0.5 * (g(a) + g(b)) * dr;
        }
        let psi = integral / r;
        assert!((psi - 1.0).abs() <= 1e-4, "independent quadrature: ψ = {psi}");
    }

    #[test]
    fn m_grows_when_potential_grows() {
        let spec = centered_box(17, 1.0);
        let small = PotentialField::from_preset(
            spec.clone(),
            PotentialPreset::AnisotropicQuadratic { coeffs: [1.0, 2.0, 3.0] },
        )
        .unwrap();
        let big = PotentialField::from_preset(
            spec.clone(),
            PotentialPreset::AnisotropicQuadratic { coeffs: [4.0, 8.0, 12.0] },
        )
        .unwrap();
        for x in [[0.0; 3], [0.5, -0.25, 0.75], [-1.0, 1.0, -0.5]] {
            let ms = small.m_of_x(x, PsiRoute::Auto).unwrap();
            let mb = big.m_of_x(x, PsiRoute::Auto).unwrap();
            assert!(mb > ms, "larger potential must shrink the scale length");
            // 4V sits between the √4 = 2 (pure r²) and 4^{1/4} = √2 (pure r⁴)
            // homogeneity scalings; margins absorb the 1e-8 bisection error.
            assert!(mb <= 2.0 * ms * (1.0 + 1e-7) && mb >= 2.0f64.sqrt() * ms * (1.0 - 1e-7));
        }
    }

    #[test]
    fn unit_scale_identity_holds_at_every_weighted_node() {
        // |ψ(x, 1/m(x)) − 1| stays within 1e-6 across the whole grid.
        let spec = centered_box(17, 1.0);
        let field = PotentialField::from_preset(
            spec.clone(),
            PotentialPreset::AnisotropicQuadratic { coeffs: [3.0, 5.0, 8.0] },
        )
        .unwrap();
        let m = field.m_field(PsiRoute::Auto).unwrap();
        let mut checked = 0;
        for idx in 0..spec.node_count() {
            if spec.quad_weight(idx) == 0.0 {
                assert_eq!(m.value(0, idx), 0.0);
                continue;
            }
            let mv = m.value(0, idx);
            assert!(mv > 0.0);
            let psi = field
                .psi(spec.coords(idx), 1.0 / mv, PsiRoute::Auto)
                .unwrap();
            assert!(
                (psi - 1.0).abs() <= 1e-6,
                "node {idx}: ψ(x, 1/m) = {psi}"
            );
            checked += 1;
        }
        assert!(checked > 3000, "covered {checked} nodes");
        // The parallel field agrees with pointwise evaluation bitwise.
        for idx in [0usize, 1234, 2400, 4912] {
            if spec.quad_weight(idx) == 0.0 {
                continue;
            }
            let direct = field.m_of_x(spec.coords(idx), PsiRoute::Auto).unwrap();
            assert_eq!(direct, m.value(0, idx));
        }
    }

    #[test]
    fn reverse_holder_constant_is_one_for_constant_potential() {
        let spec = unit_box(17);
        let field = constant_field(spec, 1.0);
        let report = field.bp_constant(2.0, 200, 7).unwrap();
        assert_eq!(report.constant, 1.0, "means of a constant are exact");
        assert!(report.witness_radius > 0.0);
        assert_eq!(report.n_balls, 200);
        assert!(field.bp_constant(2.0, 100, 7).is_err(), "needs ≥ 200 balls");
        assert!(field.bp_constant(0.5, 200, 7).is_err(), "needs p ≥ 1");
    }

    #[test]
    fn reverse_holder_ratio_matches_quadratic_moment_oracle() {
        // For V = |y|² on a ball at the origin:
        // (⨍V²)^{1/2}/⨍V = √(3/7) / (3/5) = (5/3)√(3/7) ≈ 1.09109, radius-free.
        let spec = centered_box(25, 1.0);
        let h = spec.h();
        let field = PotentialField::from_preset(
            spec,
            PotentialPreset::RadialPower { alpha: 2.0, amplitude: 1.0 },
        )
        .unwrap();
        let oracle = 5.0 / 3.0 * (3.0f64 / 7.0).sqrt();
        let ratio = field.reverse_holder_ratio([0.0; 3], 8.0 * h, 2.0).unwrap();
        assert!(
            (ratio - oracle).abs() <= 0.03 * oracle,
            "ratio = {ratio} vs {oracle}"
        );
        // The sampled constant includes origin balls, so it is at least the
        // oracle (up to quadrature), stays banded, and grows with p.
        let b12 = field.bp_constant(1.2, 220, 11).unwrap().constant;
        let b2 = field.bp_constant(2.0, 220, 11).unwrap().constant;
        let b3 = field.bp_constant(3.0, 220, 11).unwrap().constant;
        assert!(b2 >= oracle * 0.97 && b2 <= 1.25, "B₂ = {b2}");
        assert!(b12 <= b2 && b2 <= b3, "{b12} ≤ {b2} ≤ {b3} violated");
    }

    #[test]
    fn reverse_holder_checkerboard_stays_finite_and_grows_with_p() {
        let spec = unit_box(25);
        let field = PotentialField::from_preset(
            spec,
            PotentialPreset::Checkerboard { low: 0.25, high: 4.0, cell: 0.3 },
        )
        .unwrap();
        let b15 = field.bp_constant(1.5, 200, 3).unwrap();
        let b3 = field.bp_constant(3.0, 200, 3).unwrap();
        assert!(b15.constant.is_finite() && b15.constant >= 1.0);
        assert!(b3.constant >= b15.constant);
        assert!(b3.constant < 4.0, "bounded potential keeps B_p moderate");
    }

    #[test]
    fn comparability_of_constant_potential_is_trivial() {
        let spec = unit_box(13);
        let field = constant_field(spec, 2.5);
        let report = field.verify_m_comparability(500, 42, PsiRoute::Auto).unwrap();
        assert_eq!(report.k0, 0.0, "constant m needs no growth exponent");
        assert_eq!(report.big_c, 1.0);
        assert_eq!(report.small_c, 1.0);
        assert!(report.close_pairs > 0);
        assert_eq!(report.a_band, Some(1.0));
        assert!(field.verify_m_comparability(10, 42, PsiRoute::Auto).is_err());
    }

    #[test]
    fn comparability_of_quadratic_potential_is_finite_and_deterministic() {
        let spec = centered_box(13, 1.0);
        let field = PotentialField::from_preset(
            spec,
            PotentialPreset::AnisotropicQuadratic { coeffs: [2.0, 4.0, 6.0] },
        )
        .unwrap();
        let report = field.verify_m_comparability(600, 9, PsiRoute::Auto).unwrap();
        assert!(report.big_c >= 1.0 && report.big_c < 10.0);
        assert!(report.small_c > 0.0 && report.small_c <= 1.0);
        assert!(report.k0 > 0.0, "non-constant m needs a growth exponent");
        assert!(report.k0 < 8.0, "fit must not hit the grid edge");
        let band = report.a_band.expect("close pairs exist");
        assert!(band >= 1.0 && band < 4.0);
        let again = field.verify_m_comparability(600, 9, PsiRoute::Auto).unwrap();
        assert_eq!(report, again, "seeded run is deterministic");
    }

    #[test]
    fn uncertainty_ratio_for_constant_potential_stays_below_closed_form() {
        // V ≡ 1 gives m² = 4π/3, so ∫u²m²/(∫|Du|² + ∫u²V) < 4π/3 ≈ 4.19 for
        // every test function.
        let spec = unit_box(17);
        let field = constant_field(spec.clone(), 1.0);
        let m = field.m_field(PsiRoute::Auto).unwrap();
        let report = field.fefferman_phong_check(&m, 50, 13).unwrap();
        assert!(
            report.empirical_c <= 4.19 * 1.03,
            "empirical constant {}",
            report.empirical_c
        );
        assert!(report.empirical_c > 0.02);
        assert!(report.witness_width > 0.0);
        assert!(field.fefferman_phong_check(&m, 10, 13).is_err());

        // The ratio is scale-invariant in u (both sides are quadratic).
        let center = spec.center();
        let bump = GridFunction::from_scalar_fn(spec.clone(), |x| {
            let t = 1.0 - (dist(x, center) / 0.3).powi(2);
            if t > 0.0 {
                t * t
            } else {
                0.0
            }
        })
        .unwrap();
        let doubled = bump.scaled(2.0);
        let r1 = fp_ratio(&field, &m, &bump).unwrap();
        let r2 = fp_ratio(&field, &m, &doubled).unwrap();
        assert!((r1 - r2).abs() <= 1e-12 * r1);
    }

    #[test]
    fn agmon_distance_matches_straight_line_for_constant_scale() {
        let spec = unit_box(13);
        let field = constant_field(spec.clone(), 1.0);
        let m = field.m_field(PsiRoute::Auto).unwrap();
        let graph = AgmonGraph::new(&m).unwrap();
        let mv = (4.0 * PI / 3.0f64).sqrt();

        // Axis-aligned pair: the straight chain is a graph path, so the
        // distance is exactly m·|x − y|.
        let a = spec.idx([3, 3, 3]);
        let b = spec.idx([9, 3, 3]);
        let d = graph.distance(a, b).unwrap();
        let exact = mv * dist(spec.coords(a), spec.coords(b));
        assert!((d - exact).abs() <= 1e-9 * exact, "{d} vs {exact}");

        // General pair: every path is at least as long as the straight line,
        // and the 26-neighbor stretch peaks at (√3+1)/√6 ≈ 1.116 in
        // (2,1,1)-type directions.
        let c = spec.idx([9, 7, 6]);
        let d2 = graph.distance(a, c).unwrap();
        let line = mv * dist(spec.coords(a), spec.coords(c));
        assert!(d2 >= line * (1.0 - 1e-12), "graph metric dominates the line");
        assert!(d2 <= 1.12 * line, "{d2} vs {line}");

        // Snapping tolerates off-grid and near-wall query points.
        let snapped = graph
            .distance_between([0.251, 0.249, 0.2501], [0.7499, 0.25, 0.25])
            .unwrap();
        assert!((snapped - d).abs() <= 1e-12 * d);
    }

    #[test]
    fn agmon_distance_is_symmetric_and_satisfies_triangle_inequality() {
        let spec = centered_box(11, 1.0);
        let field = PotentialField::from_preset(
            spec.clone(),
            PotentialPreset::AnisotropicQuadratic { coeffs: [1.0, 3.0, 5.0] },
        )
        .unwrap();
        let m = field.m_field(PsiRoute::Auto).unwrap();
        let graph = AgmonGraph::new(&m).unwrap();
        let dof = spec.dof_nodes();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sources: Vec<usize> =
            (0..5).map(|_| dof[rng.random_range(0..dof.len())] as usize).collect();
        let sweeps: Vec<Vec<f64>> = sources
            .iter()
            .map(|&s| graph.distances_from(s).unwrap())
            .collect();
        for (i, &s) in sources.iter().enumerate() {
            assert_eq!(sweeps[i][s], 0.0, "d(x, x) = 0");
            for (j, &t) in sources.iter().enumerate() {
                let fwd = sweeps[i][t];
                let bwd = sweeps[j][s];
                assert!(
                    (fwd - bwd).abs() <= 1e-10 * fwd.max(1e-300),
                    "symmetry: {fwd} vs {bwd}"
                );
                for _ in 0..10 {
                    let v = dof[rng.random_range(0..dof.len())] as usize;
                    assert!(
                        sweeps[i][t] <= sweeps[i][v] + sweeps[j][v] + 1e-12,
                        "triangle inequality through node {v}"
                    );
                }
            }
        }
        // Off-mask endpoints are rejected.
        let wall = spec.idx([0, 5, 5]);
        assert!(graph.distance(wall, sources[0]).is_err());
    }

    #[test]
    fn csv_exports_write_well_formed_tables() {
        let spec = unit_box(13);
        let field = constant_field(spec.clone(), 1.0);
        let m = field.m_field(PsiRoute::Auto).unwrap();
        let graph = AgmonGraph::new(&m).unwrap();
        let dir = std::env::temp_dir();
        let m_path = dir.join(format!("greenlab_m_{}.csv", std::process::id()));
        let d_path = dir.join(format!("greenlab_d_{}.csv", std::process::id()));

        export_m_samples(&m, &m_path).unwrap();
        let text = std::fs::read_to_string(&m_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x0,x1,x2,m"));
        let expected_rows =
            (0..spec.node_count()).filter(|&i| spec.quad_weight(i) > 0.0).count();
        assert_eq!(lines.count(), expected_rows);
        let sample: Vec<f64> = text
            .lines()
            .nth(1)
            .unwrap()
            .split(',')
            .map(|t| t.parse().unwrap())
            .collect();
        assert_eq!(sample.len(), 4);
        assert!((sample[3] - (4.0 * PI / 3.0f64).sqrt()).abs() < 1e-12);

        let a = spec.idx([3, 3, 3]);
        let b = spec.idx([9, 5, 4]);
        let c = spec.idx([6, 6, 6]);
        export_agmon_triples(&graph, &[(a, b), (a, c), (c, b)], &d_path).unwrap();
        let text = std::fs::read_to_string(&d_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x0,x1,x2,y0,y1,y2,d"));
        assert_eq!(lines.count(), 3);
        let row: Vec<f64> = text
            .lines()
            .nth(1)
            .unwrap()
            .split(',')
            .map(|t| t.parse().unwrap())
            .collect();
        assert_eq!(row.len(), 7);
        assert!(row[6] > 0.0);

        std::fs::remove_file(&m_path).unwrap();
        std::fs::remove_file(&d_path).unwrap();
    }

    #[test]
    fn spherical_route_handles_rough_presets() {
        let spec = unit_box(13);
        let field = PotentialField::from_preset(
            spec.clone(),
            PotentialPreset::Checkerboard { low: 0.5, high: 2.0, cell: 0.23 },
        )
        .unwrap();
        let c = spec.center();
        // Any radius works analytically, including sub-grid and out-of-box.
        let small = field.psi(c, 0.01, PsiRoute::Auto).unwrap();
        let large = field.psi(c, 3.0, PsiRoute::Auto).unwrap();
        assert!(small > 0.0 && small.is_finite());
        assert!(large > 0.0 && large.is_finite());
        // Bounds 0.5 ≤ V ≤ 2 sandwich ψ between the constant closed forms.
        for r in [0.01, 0.3, 3.0] {
            let psi = field.psi(c, r, PsiRoute::Spherical).unwrap();
            let lo = 4.0 * PI / 3.0 * 0.5 * r * r;
            let hi = 4.0 * PI / 3.0 * 2.0 * r * r;
            assert!(psi >= lo * 0.999 && psi <= hi * 1.001, "ψ({r}) = {psi}");
        }
        let m = field.m_of_x(c, PsiRoute::Auto).unwrap();
        let lo_m = (4.0 * PI / 3.0 * 0.5f64).sqrt();
        let hi_m = (4.0 * PI / 3.0 * 2.0f64).sqrt();
        assert!(m >= lo_m * 0.999 && m <= hi_m * 1.001, "m = {m}");
    }
}
