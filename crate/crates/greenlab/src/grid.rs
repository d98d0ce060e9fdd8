//! Uniform 3-D box grids, masked open domains, N-component grid functions,
//! discrete gradients, and the norms/seminorms used across the crate.
//!
//! Conventions, fixed once here and relied on everywhere:
//! - node index is x-fastest: `idx = ix + nx·(iy + ny·iz)`;
//! - `omega_mask` marks nodes strictly inside the open domain Ω; the
//!   `boundary` set is the layer of unmasked nodes 6-adjacent to the mask
//!   (the discrete ∂Ω, where Dirichlet data lives);
//! - quadrature weight is h³ on masked nodes and h³/2 on boundary nodes
//!   (trapezoidal closure of the midpoint rule), zero elsewhere;
//! - gradients are centered second-order inside the mask and one-sided
//!   (three-point where possible) at the mask boundary, never differencing
//!   across ∂Ω.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read as _, Write as _};
use std::sync::Arc;

pub const DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DomainPreset {
    FullBox,
    CenteredBall { radius: f64 },
    LShape,
}

impl DomainPreset {
    pub fn label(&self) -> &'static str {
        match self {
            DomainPreset::FullBox => "full-box",
            DomainPreset::CenteredBall { .. } => "centered-ball",
            DomainPreset::LShape => "l-shape",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct StencilEntry {
    node: u32,
    coeff: f64,
}

/// First-derivative stencil at one node along one axis: up to 3 taps.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    entries: [StencilEntry; 3],
    len: u8,
}

impl Stencil {
    #[inline]
    pub fn apply(&self, values: &[f64]) -> f64 {
        let mut acc = 0.0;
        for e in &self.entries[..self.len as usize] {
            acc += e.coeff * values[e.node as usize];
        }
        acc
    }

    #[inline]
    pub fn taps(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries[..self.len as usize].iter().map(|e| (e.node as usize, e.coeff))
    }
}

#[derive(Debug)]
pub struct GridSpec {
    dims: [usize; 3],
    h: f64,
    origin: [f64; 3],
    preset: DomainPreset,
    mask: Vec<bool>,
    boundary: Vec<bool>,
    quad_weight: Vec<f64>,
    /// Masked nodes in index order; `dof_of[node]` inverts it (u32::MAX = none).
    dof_nodes: Vec<u32>,
    dof_of: Vec<u32>,
    stencils: Vec<Stencil>, // node-major, axis-minor: stencils[3*node + axis]
}

impl GridSpec {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn preset(&self) -> DomainPreset {
        self.preset
    }

    /// Physical extent per axis: (dims−1)·h.
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| (self.dims[a] - 1) as f64 * self.h)
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + 0.5 * (self.dims[a] - 1) as f64 * self.h)
    }

    pub fn node_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn idx(&self, i: [usize; 3]) -> usize {
        debug_assert!(i[0] < self.dims[0] && i[1] < self.dims[1] && i[2] < self.dims[2]);
        i[0] + self.dims[0] * (i[1] + self.dims[1] * i[2])
    }

    #[inline]
    pub fn multi(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [f64; 3] {
        let m = self.multi(idx);
        [0, 1, 2].map(|a| self.origin[a] + self.h * m[a] as f64)
    }

    /// Grid node nearest to a physical point (clamped into the box).
    pub fn nearest_node(&self, x: [f64; 3]) -> usize {
        let m = [0, 1, 2].map(|a| {
            let t = ((x[a] - self.origin[a]) / self.h).round();
            (t.max(0.0) as usize).min(self.dims[a] - 1)
        });
        self.idx(m)
    }

    #[inline]
    pub fn in_mask(&self, idx: usize) -> bool {
        self.mask[idx]
    }

    #[inline]
    pub fn on_boundary(&self, idx: usize) -> bool {
        self.boundary[idx]
    }

    /// Quadrature weight: h³ on the mask, h³/2 on ∂Ω nodes, 0 elsewhere.
    #[inline]
    pub fn quad_weight(&self, idx: usize) -> f64 {
        self.quad_weight[idx]
    }

    pub fn mask_count(&self) -> usize {
        self.dof_nodes.len()
    }

    /// Trace-zero degrees of freedom = masked nodes, in index order.
    pub fn dof_nodes(&self) -> &[u32] {
        &self.dof_nodes
    }

    #[inline]
    pub fn dof_of(&self, node: usize) -> Option<usize> {
        let d = self.dof_of[node];
        (d != u32::MAX).then_some(d as usize)
    }

    #[inline]
    pub fn stencil(&self, node: usize, axis: usize) -> &Stencil {
        &self.stencils[3 * node + axis]
    }

    /// Distance from a point to the discrete ∂Ω (min over boundary nodes).
    /// For the full box this is the distance to the box faces up to O(h).
    pub fn dist_to_boundary(&self, x: [f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        for idx in 0..self.node_count() {
            if self.boundary[idx] {
                let c = self.coords(idx);
                let d2: f64 = (0..3).map(|a| (x[a] - c[a]).powi(2)).sum();
                best = best.min(d2);
            }
        }
        best.sqrt()
    }

    /// True iff the closed ball B_ρ(y) lies inside Ω (every grid node of the
    /// ball is masked and the ball stays inside the box).
    pub fn ball_inside_mask(&self, y: [f64; 3], rho: f64) -> bool {
        for a in 0..3 {
            let lo = self.origin[a];
            let hi = self.origin[a] + (self.dims[a] - 1) as f64 * self.h;
            if y[a] - rho < lo || y[a] + rho > hi {
                return false;
            }
        }
        let mut ok = true;
        self.for_nodes_in_ball(y, rho, |idx, _| {
            if !self.mask[idx] {
                ok = false;
            }
        });
        ok
    }

    /// Visit grid nodes with |x − y| ≤ ρ (bounding-box scan).
    pub fn for_nodes_in_ball(&self, y: [f64; 3], rho: f64, mut f: impl FnMut(usize, [f64; 3])) {
        let lo = [0, 1, 2].map(|a| {
            (((y[a] - rho - self.origin[a]) / self.h).floor().max(0.0)) as usize
        });
        let hi = [0, 1, 2].map(|a| {
            ((((y[a] + rho - self.origin[a]) / self.h).ceil()) as usize).min(self.dims[a] - 1)
        });
        let r2 = rho * rho;
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    let idx = self.idx([i, j, k]);
                    let c = self.coords(idx);
                    let d2: f64 = (0..3).map(|a| (c[a] - y[a]).powi(2)).sum();
                    if d2 <= r2 {
                        f(idx, c);
                    }
                }
            }
        }
    }
}

const NEIGHBOR6: [[i64; 3]; 6] =
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

pub fn make_grid(
    dims: [usize; 3],
    h: f64,
    origin: [f64; 3],
    preset: DomainPreset,
) -> Result<Arc<GridSpec>> {
    for &d in &dims {
        if d < 9 {
            return Err(Error::Grid(format!("dims must be ≥ 9 per axis, got {}", d)));
        }
        if d % 2 == 0 {
            return Err(Error::Grid(format!("dims must be odd, got {}", d)));
        }
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Grid(format!("spacing must be positive, got {}", h)));
    }

    let node_count = dims[0] * dims[1] * dims[2];
    let idx = |i: [usize; 3]| i[0] + dims[0] * (i[1] + dims[1] * i[2]);
    let coords =
        |i: [usize; 3]| [0, 1, 2].map(|a| origin[a] + h * i[a] as f64);
    let center = [0, 1, 2].map(|a| origin[a] + 0.5 * (dims[a] - 1) as f64 * h);

    let mut mask = vec![false; node_count];
    for k in 1..dims[2] - 1 {
        for j in 1..dims[1] - 1 {
            for i in 1..dims[0] - 1 {
                let interior = [i, j, k];
                let x = coords(interior);
                let inside = match preset {
                    DomainPreset::FullBox => true,
                    DomainPreset::CenteredBall { radius } => {
                        let d2: f64 = (0..3).map(|a| (x[a] - center[a]).powi(2)).sum();
                        d2 < radius * radius
                    }
                    DomainPreset::LShape => !(x[0] >= center[0] && x[1] >= center[1]),
                };
                if inside {
                    mask[idx(interior)] = true;
                }
            }
        }
    }

    let first = mask.iter().position(|&m| m);
    let Some(first) = first else {
        return Err(Error::Grid("domain mask is empty".into()));
    };

    // Flood fill (6-connectivity) to certify connectedness.
    let mut seen = vec![false; node_count];
    let mut stack = vec![first];
    seen[first] = true;
    let mut reached = 0usize;
    while let Some(cur) = stack.pop() {
        reached += 1;
        let m = [cur % dims[0], (cur / dims[0]) % dims[1], cur / (dims[0] * dims[1])];
        for off in NEIGHBOR6 {
            let n = [0, 1, 2].map(|a| m[a] as i64 + off[a]);
            if n.iter().zip(&dims).all(|(&v, &d)| v >= 0 && (v as usize) < d) {
                let ni = idx([n[0] as usize, n[1] as usize, n[2] as usize]);
                if mask[ni] && !seen[ni] {
                    seen[ni] = true;
                    stack.push(ni);
                }
            }
        }
    }
    let total_masked = mask.iter().filter(|&&m| m).count();
    if reached != total_masked {
        return Err(Error::Grid(format!(
            "domain mask is disconnected: flood fill reached {} of {} nodes",
            reached, total_masked
        )));
    }

    // ∂Ω layer: unmasked nodes 6-adjacent to the mask.
    let mut boundary = vec![false; node_count];
    for cur in 0..node_count {
        if mask[cur] {
            continue;
        }
        let m = [cur % dims[0], (cur / dims[0]) % dims[1], cur / (dims[0] * dims[1])];
        for off in NEIGHBOR6 {
            let n = [0, 1, 2].map(|a| m[a] as i64 + off[a]);
            if n.iter().zip(&dims).all(|(&v, &d)| v >= 0 && (v as usize) < d) {
                if mask[idx([n[0] as usize, n[1] as usize, n[2] as usize])] {
                    boundary[cur] = true;
                    break;
                }
            }
        }
    }

    let h3 = h * h * h;
    let quad_weight: Vec<f64> = (0..node_count)
        .map(|i| {
            if mask[i] {
                h3
            } else if boundary[i] {
                0.5 * h3
            } else {
                0.0
            }
        })
        .collect();

    let mut dof_of = vec![u32::MAX; node_count];
    let mut dof_nodes = Vec::with_capacity(total_masked);
    for i in 0..node_count {
        if mask[i] {
            dof_of[i] = dof_nodes.len() as u32;
            dof_nodes.push(i as u32);
        }
    }

    let stencils = build_stencils(dims, h, &mask, &boundary);

    Ok(Arc::new(GridSpec {
        dims,
        h,
        origin,
        preset,
        mask,
        boundary,
        quad_weight,
        dof_nodes,
        dof_of,
        stencils,
    }))
}

/// One first-derivative stencil per node and axis. Inside Ω∪∂Ω values are
/// only combined within Ω∪∂Ω (no differencing across the domain boundary);
/// elsewhere the plain grid stencil applies. Centered where both neighbors
/// are available, else one-sided three-point, else two-point, else zero.
fn build_stencils(dims: [usize; 3], h: f64, mask: &[bool], boundary: &[bool]) -> Vec<Stencil> {
    let node_count = dims[0] * dims[1] * dims[2];
    let idx = |i: [usize; 3]| i[0] + dims[0] * (i[1] + dims[1] * i[2]);
    let mut out = Vec::with_capacity(3 * node_count);
    let zero = StencilEntry { node: 0, coeff: 0.0 };
    for cur in 0..node_count {
        let m = [cur % dims[0], (cur / dims[0]) % dims[1], cur / (dims[0] * dims[1])];
        let in_closure = mask[cur] || boundary[cur];
        for axis in 0..3 {
            let step = |k: i64| -> Option<usize> {
                let v = m[axis] as i64 + k;
                if v < 0 || v as usize >= dims[axis] {
                    return None;
                }
                let mut nm = m;
                nm[axis] = v as usize;
                let ni = idx(nm);
                if in_closure && !(mask[ni] || boundary[ni]) {
                    return None;
                }
                Some(ni)
            };
            let plus = step(1);
            let minus = step(-1);
            let st = match (plus, minus) {
                (Some(p), Some(q)) => Stencil {
                    entries: [
                        StencilEntry { node: p as u32, coeff: 0.5 / h },
                        StencilEntry { node: q as u32, coeff: -0.5 / h },
                        zero,
                    ],
                    len: 2,
                },
                (Some(p), None) => match step(2) {
                    Some(p2) => Stencil {
                        entries: [
                            StencilEntry { node: cur as u32, coeff: -1.5 / h },
                            StencilEntry { node: p as u32, coeff: 2.0 / h },
                            StencilEntry { node: p2 as u32, coeff: -0.5 / h },
                        ],
                        len: 3,
                    },
                    None => Stencil {
                        entries: [
                            StencilEntry { node: cur as u32, coeff: -1.0 / h },
                            StencilEntry { node: p as u32, coeff: 1.0 / h },
                            zero,
                        ],
                        len: 2,
                    },
                },
                (None, Some(q)) => match step(-2) {
                    Some(q2) => Stencil {
                        entries: [
                            StencilEntry { node: cur as u32, coeff: 1.5 / h },
                            StencilEntry { node: q as u32, coeff: -2.0 / h },
                            StencilEntry { node: q2 as u32, coeff: 0.5 / h },
                        ],
                        len: 3,
                    },
                    None => Stencil {
                        entries: [
                            StencilEntry { node: cur as u32, coeff: 1.0 / h },
                            StencilEntry { node: q as u32, coeff: -1.0 / h },
                            zero,
                        ],
                        len: 2,
                    },
                },
                (None, None) => Stencil { entries: [zero; 3], len: 0 },
            };
            out.push(st);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct GridFunction {
    spec: Arc<GridSpec>,
    n_comp: usize,
    values: Vec<f64>, // component-major: values[c * node_count + node]
    trace_zero: bool,
}

impl GridFunction {
    pub fn zeros(spec: Arc<GridSpec>, n_comp: usize) -> Self {
        assert!(n_comp >= 1);
        let n = spec.node_count();
        Self { spec, n_comp, values: vec![0.0; n * n_comp], trace_zero: false }
    }

    pub fn from_fn(
        spec: Arc<GridSpec>,
        n_comp: usize,
        mut f: impl FnMut([f64; 3], usize) -> f64,
    ) -> Result<Self> {
        let mut u = Self::zeros(spec, n_comp);
        let n = u.spec.node_count();
        for c in 0..n_comp {
            for idx in 0..n {
                let v = f(u.spec.coords(idx), c);
                if !v.is_finite() {
                    return Err(Error::Grid(format!(
                        "non-finite value {} at node {} component {}",
                        v, idx, c
                    )));
                }
                u.values[c * n + idx] = v;
            }
        }
        Ok(u)
    }

    pub fn from_scalar_fn(spec: Arc<GridSpec>, f: impl FnMut([f64; 3]) -> f64) -> Result<Self> {
        let mut f = f;
        Self::from_fn(spec, 1, move |x, _| f(x))
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.spec
    }

    pub fn n_comp(&self) -> usize {
        self.n_comp
    }

    pub fn is_trace_zero(&self) -> bool {
        self.trace_zero
    }

    #[inline]
    pub fn value(&self, comp: usize, node: usize) -> f64 {
        self.values[comp * self.spec.node_count() + node]
    }

    #[inline]
    pub fn set(&mut self, comp: usize, node: usize, v: f64) {
        let n = self.spec.node_count();
        self.values[comp * n + node] = v;
    }

    pub fn component(&self, comp: usize) -> &[f64] {
        let n = self.spec.node_count();
        &self.values[comp * n..(comp + 1) * n]
    }

    pub fn component_mut(&mut self, comp: usize) -> &mut [f64] {
        let n = self.spec.node_count();
        &mut self.values[comp * n..(comp + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Euclidean magnitude across components at one node.
    #[inline]
    pub fn magnitude(&self, node: usize) -> f64 {
        let n = self.spec.node_count();
        let mut s = 0.0;
        for c in 0..self.n_comp {
            let v = self.values[c * n + node];
            s += v * v;
        }
        s.sqrt()
    }

    /// Zero every value outside the mask and flag the function trace-zero.
    pub fn into_trace_zero(mut self) -> Self {
        let n = self.spec.node_count();
        for c in 0..self.n_comp {
            for idx in 0..n {
                if !self.spec.in_mask(idx) {
                    self.values[c * n + idx] = 0.0;
                }
            }
        }
        self.trace_zero = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Grid(format!("non-finite value at flat index {}", bad)));
        }
        if self.trace_zero {
            let n = self.spec.node_count();
            for c in 0..self.n_comp {
                for idx in 0..n {
                    if !self.spec.in_mask(idx) && self.values[c * n + idx] != 0.0 {
                        return Err(Error::Grid(format!(
                            "trace-zero function has value outside mask at node {}",
                            idx
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= alpha;
        }
        out
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        self.trace_zero = self.trace_zero && other.trace_zero;
    }
}

/// Centered/one-sided first differences of every component.
/// Output has n·N components ordered (axis, component): `axis·N + comp`.
pub fn discrete_gradient(u: &GridFunction) -> GridFunction {
    let spec = u.spec().clone();
    let n = spec.node_count();
    let n_comp = u.n_comp();
    let mut out = GridFunction::zeros(spec.clone(), DIM * n_comp);
    for axis in 0..DIM {
        for c in 0..n_comp {
            let src = u.component(c);
            let oc = axis * n_comp + c;
            for node in 0..n {
                let v = spec.stencil(node, axis).apply(src);
                out.values[oc * n + node] = v;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    Mask,
    Ball { center: [f64; 3], r: f64 },
    Annulus { center: [f64; 3], r: f64, big_r: f64 },
    BallComplement { center: [f64; 3], r: f64 },
}

impl Region {
    #[inline]
    pub fn contains(&self, x: [f64; 3]) -> bool {
        match *self {
            Region::Mask => true,
            Region::Ball { center, r } => dist2(x, center) <= r * r,
            Region::Annulus { center, r, big_r } => {
                let d2 = dist2(x, center);
                d2 >= r * r && d2 <= big_r * big_r
            }
            Region::BallComplement { center, r } => dist2(x, center) >= r * r,
        }
    }
}

#[inline]
fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

#[derive(Debug, Clone)]
pub enum NormKind {
    /// L^q quasi-norm of the pointwise component magnitude, q ∈ (0, ∞].
    Lq(f64),
    /// L^{2*} with 2* = 2n/(n−2) = 6 for n = 3.
    L2Star,
    /// ‖u‖_{L²} + ‖Du‖_{L²}.
    W12,
    /// ‖u‖_{L⁶} + ‖Du‖_{L²}.
    Y12,
    /// (‖u·m‖²_{L²} + ‖Du‖²_{L²})^{1/2}; `weight` carries m(x,V) per node.
    WV12 { weight: Arc<GridFunction> },
}

/// Norm over region ∩ (Ω ∪ ∂Ω). Returns (value, empty_region_flag); the flag
/// is raised when the region misses the quadrature support entirely.
pub fn norm_flagged(u: &GridFunction, kind: &NormKind, region: &Region) -> Result<(f64, bool)> {
    let spec = u.spec();
    let lq = |field: &GridFunction, q: f64| -> Result<(f64, bool)> {
        if !(q > 0.0) {
            return Err(Error::Region(format!("L^q requires q > 0, got {}", q)));
        }
        let n = spec.node_count();
        let mut any = false;
        if q.is_infinite() {
            let mut sup = 0.0f64;
            for node in 0..n {
                if spec.quad_weight(node) > 0.0 && region.contains(spec.coords(node)) {
                    any = true;
                    sup = sup.max(field.magnitude(node));
                }
            }
            return Ok((sup, !any));
        }
        let mut acc = 0.0;
        for node in 0..n {
            let w = spec.quad_weight(node);
            if w > 0.0 && region.contains(spec.coords(node)) {
                any = true;
                let m = field.magnitude(node);
                if m > 0.0 {
                    acc += w * m.powf(q);
                }
            }
        }
        Ok((acc.powf(1.0 / q), !any))
    };

    match kind {
        NormKind::Lq(q) => lq(u, *q),
        NormKind::L2Star => lq(u, 6.0),
        NormKind::W12 => {
            let du = discrete_gradient(u);
            let (a, e1) = lq(u, 2.0)?;
            let (b, e2) = lq(&du, 2.0)?;
            Ok((a + b, e1 && e2))
        }
        NormKind::Y12 => {
            let du = discrete_gradient(u);
            let (a, e1) = lq(u, 6.0)?;
            let (b, e2) = lq(&du, 2.0)?;
            Ok((a + b, e1 && e2))
        }
        NormKind::WV12 { weight } => {
            if weight.n_comp() != 1 {
                return Err(Error::Region("weight field must be scalar".into()));
            }
            let n = spec.node_count();
            let mut wu = u.clone();
            for c in 0..u.n_comp() {
                for node in 0..n {
                    let m = weight.value(0, node);
                    wu.values[c * n + node] *= m;
                }
            }
            let du = discrete_gradient(u);
            let (a, e1) = lq(&wu, 2.0)?;
            let (b, e2) = lq(&du, 2.0)?;
            Ok(((a * a + b * b).sqrt(), e1 && e2))
        }
    }
}

pub fn norm(u: &GridFunction, kind: &NormKind, region: &Region) -> Result<f64> {
    norm_flagged(u, kind, region).map(|(v, _)| v)
}

/// Quadrature of a nodewise integrand over region ∩ (Ω ∪ ∂Ω).
pub fn integrate(
    spec: &GridSpec,
    region: &Region,
    mut integrand: impl FnMut(usize, [f64; 3]) -> f64,
) -> f64 {
    let mut acc = 0.0;
    for node in 0..spec.node_count() {
        let w = spec.quad_weight(node);
        if w > 0.0 {
            let x = spec.coords(node);
            if region.contains(x) {
                acc += w * integrand(node, x);
            }
        }
    }
    acc
}

/// Quadrature weights of the ball average ⨍_{B_ρ(y)}: nonnegative, supported
/// on the masked nodes of B_ρ(y), summing to one. Pairing the returned field
/// with any scalar grid function yields its ball average.
pub fn ball_average_functional(
    spec: &Arc<GridSpec>,
    y: [f64; 3],
    rho: f64,
) -> Result<GridFunction> {
    if rho < 2.0 * spec.h() {
        return Err(Error::Region(format!(
            "averaging radius {} under-resolved (needs ≥ 2h = {})",
            rho,
            2.0 * spec.h()
        )));
    }
    if !spec.ball_inside_mask(y, rho) {
        return Err(Error::Region(format!(
            "ball of radius {} at {:?} exits the domain",
            rho, y
        )));
    }
    let mut w = GridFunction::zeros(spec.clone(), 1);
    let mut total = 0.0;
    spec.for_nodes_in_ball(y, rho, |idx, _| {
        let q = spec.quad_weight(idx);
        w.values[idx] = q;
        total += q;
    });
    debug_assert!(total > 0.0);
    for v in &mut w.values {
        *v /= total;
    }
    Ok(w.into_trace_zero())
}

/// Pair a weight field (e.g. from `ball_average_functional`) with one
/// component of `u`: Σ_x w(x)·u^k(x).
pub fn pair(weights: &GridFunction, u: &GridFunction, comp: usize) -> f64 {
    let n = weights.spec().node_count();
    assert_eq!(n, u.spec().node_count());
    let wv = weights.component(0);
    let uv = u.component(comp);
    crate::sparse::dot(wv, uv)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CutoffShape {
    /// 1 on B_r(center), 0 outside B_R(center), linear radial ramp between.
    Ball,
    /// 0 on B_r(center), 1 outside B_R(center).
    ComplementOfBall,
}

#[derive(Debug, Clone, Copy)]
pub struct Cutoff {
    pub center: [f64; 3],
    pub r: f64,
    pub big_r: f64,
    pub shape: CutoffShape,
}

impl Cutoff {
    pub fn new(center: [f64; 3], r: f64, big_r: f64, shape: CutoffShape) -> Result<Self> {
        if !(r > 0.0 && big_r > r) {
            return Err(Error::Region(format!(
                "cutoff radii must satisfy 0 < r < R, got r={} R={}",
                r, big_r
            )));
        }
        Ok(Self { center, r, big_r, shape })
    }

    pub fn eval(&self, x: [f64; 3]) -> f64 {
        let t = dist2(x, self.center).sqrt();
        let ramp = ((self.big_r - t) / (self.big_r - self.r)).clamp(0.0, 1.0);
        match self.shape {
            CutoffShape::Ball => ramp,
            CutoffShape::ComplementOfBall => 1.0 - ramp,
        }
    }

    pub fn emit(&self, spec: &Arc<GridSpec>) -> GridFunction {
        GridFunction::from_scalar_fn(spec.clone(), |x| self.eval(x))
            .expect("cutoff values are finite")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawHeader {
    dims: [usize; 3],
    h: f64,
    origin: [f64; 3],
    #[serde(rename = "N")]
    n_comp: usize,
    #[serde(rename = "mask-preset")]
    mask_preset: String,
    #[serde(rename = "mask-radius", skip_serializing_if = "Option::is_none", default)]
    mask_radius: Option<f64>,
}

/// Raw dump: `<base>.bin` holds little-endian f64 values, x-fastest within
/// each component, components concatenated; `<base>.json` is the sidecar
/// header.
pub fn dump_raw(u: &GridFunction, base: &std::path::Path) -> Result<()> {
    let spec = u.spec();
    let header = RawHeader {
        dims: spec.dims(),
        h: spec.h(),
        origin: spec.origin(),
        n_comp: u.n_comp(),
        mask_preset: spec.preset().label().to_string(),
        mask_radius: match spec.preset() {
            DomainPreset::CenteredBall { radius } => Some(radius),
            _ => None,
        },
    };
    let mut bin = std::io::BufWriter::new(std::fs::File::create(base.with_extension("bin"))?);
    for v in u.values() {
        bin.write_all(&v.to_le_bytes())?;
    }
    bin.flush()?;
    let json = serde_json::to_string_pretty(&header)?;
    std::fs::write(base.with_extension("json"), json)?;
    Ok(())
}

/// Rebuild a grid function from a raw dump (inverse of `dump_raw`).
pub fn load_raw(base: &std::path::Path) -> Result<GridFunction> {
    let header: RawHeader =
        serde_json::from_str(&std::fs::read_to_string(base.with_extension("json"))?)?;
    let preset = match (header.mask_preset.as_str(), header.mask_radius) {
        ("full-box", _) => DomainPreset::FullBox,
        ("l-shape", _) => DomainPreset::LShape,
        ("centered-ball", Some(radius)) => DomainPreset::CenteredBall { radius },
        (other, _) => {
            return Err(Error::Grid(format!(
                "sidecar mask preset `{}` cannot be rebuilt",
                other
            )))
        }
    };
    let spec = make_grid(header.dims, header.h, header.origin, preset)?;
    let mut u = GridFunction::zeros(spec, header.n_comp);
    let mut bin = std::io::BufReader::new(std::fs::File::open(base.with_extension("bin"))?);
    let mut buf = [0u8; 8];
    for v in &mut u.values {
        bin.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(u)
}
