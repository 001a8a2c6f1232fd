//! Virtual-token expansion: each real token becomes `n_h` rows.
//!
//! Row `m` of token `t` is, depending on the mode,
//!
//! * derivative: `Δ_m x_t = (1/Z_m) Σ_k (−1)^k C(m,k) x_{t−k}` (zero history before the sequence),
//! * rotary: `R(θ_m) x_t` with `θ_m = 2πm/n_h` acting on feature pairs `(2i, 2i+1)`,
//! * both: `R(θ_m) Δ_m x_t`,
//! * alternate: `Δ_m x_t` for even `m`, `R(θ_m) x_t` for odd `m`.
//!
//! Rows are interleaved: token `t` owns rows `n_h·t .. n_h·t + n_h − 1`, in order of `m`.
//! Gates are copied, not transformed.

use std::fmt;
use std::sync::Arc;

use crate::error::{contract_err, dim_err, Result};
use crate::numerics::{Backend, Element, RowMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExpansionMode {
    #[default]
    Derivative,
    Rotary,
    Both,
    Alternate,
}

impl fmt::Display for ExpansionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpansionMode::Derivative => "derivative",
            ExpansionMode::Rotary => "rotary",
            ExpansionMode::Both => "both",
            ExpansionMode::Alternate => "alternate",
        })
    }
}

impl std::str::FromStr for ExpansionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "derivative" => Ok(Self::Derivative),
            "rotary" => Ok(Self::Rotary),
            "both" => Ok(Self::Both),
            "alternate" => Ok(Self::Alternate),
            _ => Err(format!("unknown expansion mode '{s}' (derivative|rotary|both|alternate)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionSpec {
    pub mode: ExpansionMode,
    pub n_h: usize,
    /// `Z_m` for `m = 0..n_h`.
    pub z_norm: Vec<f64>,
}

impl ExpansionSpec {
    /// Default scales `Z_m = 2^m`.
    pub fn new(mode: ExpansionMode, n_h: usize) -> Result<Self> {
        let spec = Self { mode, n_h, z_norm: (0..n_h).map(|m| 2f64.powi(m as i32)).collect() };
        spec.validate(None)?;
        Ok(spec)
    }

    pub fn identity() -> Self {
        Self { mode: ExpansionMode::Derivative, n_h: 1, z_norm: vec![1.0] }
    }

    /// Checks the expansion settings, and the feature width when given.
    pub fn validate(&self, d: Option<usize>) -> Result<()> {
        if self.n_h == 0 {
            return contract_err("ExpansionSpec", "n_h must be >= 1");
        }
        if self.z_norm.len() != self.n_h || self.z_norm.iter().any(|z| !(*z > 0.0 && z.is_finite())) {
            return contract_err("ExpansionSpec", format!("need {} positive Z_m, got {:?}", self.n_h, self.z_norm));
        }
        if let Some(d) = d {
            if self.uses_rotation() && d % 2 != 0 {
                return contract_err("ExpansionSpec", format!("rotary expansion needs an even width, got {d}"));
            }
        }
        Ok(())
    }

    fn uses_rotation(&self) -> bool {
        self.n_h > 1 && !matches!(self.mode, ExpansionMode::Derivative)
    }

    /// Per-row plan: binomial taps (already divided by `Z_m`) and rotation angle.
    fn plan(&self) -> Vec<(Vec<f64>, f64)> {
        (0..self.n_h)
            .map(|m| {
                let angle = 2.0 * std::f64::consts::PI * m as f64 / self.n_h as f64;
                let diff = binomial_taps(m, self.z_norm[m]);
                match self.mode {
                    ExpansionMode::Derivative => (diff, 0.0),
                    ExpansionMode::Rotary => (vec![1.0], angle),
                    ExpansionMode::Both => (diff, angle),
                    ExpansionMode::Alternate if m % 2 == 0 => (diff, 0.0),
                    ExpansionMode::Alternate => (vec![1.0], angle),
                }
            })
            .collect()
    }
}

/// `(−1)^k C(m,k) / z` for `k = 0..=m`.
fn binomial_taps(m: usize, z: f64) -> Vec<f64> {
    let mut c = 1.0;
    (0..=m)
        .map(|k| {
            if k > 0 {
                c = c * (m + 1 - k) as f64 / k as f64;
            }
            if k % 2 == 0 { c / z } else { -c / z }
        })
        .collect()
}

/// Linear map `[..., T, d] → [..., n_h·T, d]` with its exact adjoint.
#[derive(Debug, Clone)]
pub struct Expander {
    spec: ExpansionSpec,
    plan: Vec<(Vec<f64>, f64)>,
}

impl Expander {
    pub fn new(spec: &ExpansionSpec) -> Result<Self> {
        spec.validate(None)?;
        Ok(Self { spec: spec.clone(), plan: spec.plan() })
    }

    pub fn spec(&self) -> &ExpansionSpec {
        &self.spec
    }

    fn dims(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        if shape.len() < 2 {
            return dim_err("expand", format!("need [..., T, d], got {shape:?}"));
        }
        let (t, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        self.spec.validate(Some(d))?;
        let batch = shape[..shape.len() - 2].iter().product();
        Ok((batch, t, d))
    }
}

fn rotate<F: Element>(row: &mut [F], angle: f64, sign: f64) {
    if angle == 0.0 {
        return;
    }
    let (s, c) = (sign * angle).sin_cos();
    let (s, c) = (F::of(s), F::of(c));
    for pair in row.chunks_exact_mut(2) {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = c * a - s * b;
        pair[1] = s * a + c * b;
    }
}

impl<F: Element> RowMap<F> for Expander {
    fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (batch, t, d) = self.dims(x.shape())?;
        let n_h = self.spec.n_h;
        let mut out = vec![F::zero(); batch * n_h * t * d];
        let xd = x.data();
        for b in 0..batch {
            let src = &xd[b * t * d..(b + 1) * t * d];
            let dst = &mut out[b * n_h * t * d..(b + 1) * n_h * t * d];
            for ti in 0..t {
                for (m, (taps, angle)) in self.plan.iter().enumerate() {
                    let row = &mut dst[(ti * n_h + m) * d..(ti * n_h + m + 1) * d];
                    for (k, &w) in taps.iter().enumerate().take(ti + 1) {
                        let w = F::of(w);
                        for (r, &s) in row.iter_mut().zip(&src[(ti - k) * d..(ti - k + 1) * d]) {
                            *r += w * s;
                        }
                    }
                    rotate(row, *angle, 1.0);
                }
            }
        }
        let mut shape = x.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = n_h * t;
        Ok(Tensor::from_raw(shape, out))
    }

    fn adjoint(&self, dy: &Tensor<F>, input_shape: &[usize]) -> Result<Tensor<F>> {
        let (batch, t, d) = self.dims(input_shape)?;
        let n_h = self.spec.n_h;
        let mut dx = vec![F::zero(); batch * t * d];
        let mut g = vec![F::zero(); d];
        for b in 0..batch {
            let src = &dy.data()[b * n_h * t * d..(b + 1) * n_h * t * d];
            let dst = &mut dx[b * t * d..(b + 1) * t * d];
            for ti in 0..t {
                for (m, (taps, angle)) in self.plan.iter().enumerate() {
                    g.copy_from_slice(&src[(ti * n_h + m) * d..(ti * n_h + m + 1) * d]);
                    rotate(&mut g, *angle, -1.0);
                    for (k, &w) in taps.iter().enumerate().take(ti + 1) {
                        let w = F::of(w);
                        for (r, &s) in dst[(ti - k) * d..(ti - k + 1) * d].iter_mut().zip(&g) {
                            *r += w * s;
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_raw(input_shape.to_vec(), dx))
    }
}

/// Derivative rows only (`spec.mode` is ignored).
pub fn expand_derivative<F: Element>(x: &Tensor<F>, spec: &ExpansionSpec) -> Result<Tensor<F>> {
    let spec = ExpansionSpec { mode: ExpansionMode::Derivative, ..spec.clone() };
    Expander::new(&spec)?.forward(x)
}

/// Rotary rows only (`spec.mode` is ignored).
pub fn expand_rotary<F: Element>(x: &Tensor<F>, spec: &ExpansionSpec) -> Result<Tensor<F>> {
    let spec = ExpansionSpec { mode: ExpansionMode::Rotary, ..spec.clone() };
    let e = Expander::new(&spec)?;
    if x.rank() >= 1 && x.dim(-1) % 2 != 0 {
        return contract_err("expand_rotary", format!("odd feature width {}", x.dim(-1)));
    }
    e.forward(x)
}

/// Row indices that copy each real token `n_h` times.
pub fn copy_index(t: usize, n_h: usize) -> Vec<usize> {
    (0..t).flat_map(|i| std::iter::repeat_n(i, n_h)).collect()
}

/// Expanded streams; all have `N = n_h · T` rows.
#[derive(Debug, Clone)]
pub struct Expanded<F: Element> {
    pub q: Tensor<F>,
    pub k: Tensor<F>,
    pub v: Tensor<F>,
    pub beta: Tensor<F>,
}

/// Expands `q, k, v` (`T × d`) with the same spec and copies `beta` (`T`).
pub fn expand<F: Element>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    beta: &Tensor<F>,
    spec: &ExpansionSpec,
) -> Result<Expanded<F>> {
    let t = k.shape().first().copied().unwrap_or(0);
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.shape()[0] != t || v.shape()[0] != t || beta.numel() != t {
        return dim_err(
            "expand",
            format!("q {:?}, k {:?}, v {:?}, beta {:?}", q.shape(), k.shape(), v.shape(), beta.shape()),
        );
    }
    let e = Expander::new(spec)?;
    let idx = copy_index(t, spec.n_h);
    let beta = Tensor::from_raw(vec![idx.len()], idx.iter().map(|&i| beta.data()[i]).collect());
    Ok(Expanded { q: e.forward(q)?, k: e.forward(k)?, v: e.forward(v)?, beta })
}

/// Expands `x: [B, T, d]` on a backend. `history` holds up to `n_h − 1` earlier real
/// rows per batch entry (`[B, h, d]`); they feed the differences but produce no
/// output rows.
pub fn expand_on<F: Element, B: Backend<F>>(
    bk: &mut B,
    x: &B::Value,
    history: Option<&Tensor<F>>,
    expander: &Arc<Expander>,
) -> Result<B::Value> {
    let n_h = expander.spec().n_h;
    if n_h == 1 {
        return Ok(x.clone());
    }
    let map: Arc<dyn RowMap<F>> = expander.clone();
    match history {
        Some(h) if h.dim(-2) > 0 => {
            let hv = bk.constant(h.clone());
            let joined = bk.concat_rows(&[hv, x.clone()])?;
            let y = bk.row_map(&joined, map)?;
            let rows = bk.shape(&y)[bk.shape(&y).len() - 2];
            bk.slice_rows(&y, h.dim(-2) * n_h, rows)
        }
        _ => bk.row_map(x, map),
    }
}
