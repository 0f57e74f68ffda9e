//! Loss-landscape probing: random directions, 1D/2D slices and a sharpness
//! summary.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::{Float, ParamKind, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{ForwardCtx, Mode, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Each filter (conv output channel or dense row) gets the norm of the
    /// matching model filter.
    Filter,
    /// The whole direction gets the norm of the perturbed parameters.
    Global,
    None,
}

impl Normalization {
    pub fn as_str(self) -> &'static str {
        match self {
            Normalization::Filter => "filter",
            Normalization::Global => "global",
            Normalization::None => "none",
        }
    }
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filter" => Ok(Normalization::Filter),
            "global" => Ok(Normalization::Global),
            "none" => Ok(Normalization::None),
            other => Err(Error::config(format!(
                "normalization: unknown mode {other:?} (expected filter, global or none)"
            ))),
        }
    }
}

/// Whether parameters of this kind are moved along a direction. Biases and
/// everything batch-norm related stay fixed.
pub fn perturbed(kind: ParamKind) -> bool {
    matches!(kind, ParamKind::ConvWeight | ParamKind::DenseWeight)
}

/// One perturbation tensor per store entry, aligned by position.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    pub mode: Normalization,
    pub tensors: Vec<Vec<f64>>,
}

fn rows_of(kind: ParamKind, shape: &[usize]) -> usize {
    match kind {
        ParamKind::ConvWeight | ParamKind::DenseWeight => shape.first().copied().unwrap_or(1).max(1),
        _ => 1,
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

fn rescale(d: &mut [f64], target: f64) {
    let current = norm(d.iter().copied());
    let k = if current > 0.0 { target / current } else { 0.0 };
    d.iter_mut().for_each(|x| *x *= k);
}

impl Direction {
    /// Builds a direction from explicit tensors; shapes must match `store`.
    pub fn from_tensors<T: Float>(store: &ParamStore<T>, mode: Normalization, tensors: Vec<Vec<f64>>) -> Result<Self> {
        if tensors.len() != store.len() || store.iter().zip(&tensors).any(|(p, d)| p.value.numel() != d.len()) {
            return Err(Error::ParameterMismatch("direction does not match the parameter store".into()));
        }
        Ok(Direction { mode, tensors })
    }

    pub fn zeros<T: Float>(store: &ParamStore<T>) -> Self {
        Direction {
            mode: Normalization::None,
            tensors: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|&x| x == 0.0)
    }
}

/// Standard-normal draws for every weight, normalized per `mode`.
pub fn sample_direction<T: Float, R: Rng + ?Sized>(store: &ParamStore<T>, mode: Normalization, rng: &mut R) -> Result<Direction> {
    if store.is_empty() {
        return Err(Error::ParameterMismatch("cannot sample a direction for an empty model".into()));
    }
    let mut tensors: Vec<Vec<f64>> = store
        .iter()
        .map(|p| {
            if perturbed(p.kind) {
                (0..p.value.numel()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
            } else {
                vec![0.0; p.value.numel()]
            }
        })
        .collect();
    match mode {
        Normalization::None => {}
        Normalization::Filter => {
            for (p, d) in store.iter().zip(tensors.iter_mut()) {
                if !perturbed(p.kind) || d.is_empty() {
                    continue;
                }
                let rows = rows_of(p.kind, p.value.shape());
                let width = d.len() / rows;
                for (drow, wrow) in d.chunks_mut(width).zip(p.value.data().chunks(width)) {
                    rescale(drow, norm(wrow.iter().map(|w| w.as_f64())));
                }
            }
        }
        Normalization::Global => {
            let target = norm(store.iter().filter(|p| perturbed(p.kind)).flat_map(|p| p.value.data().iter().map(|w| w.as_f64())));
            let current = norm(tensors.iter().flatten().copied());
            let k = if current > 0.0 { target / current } else { 0.0 };
            tensors.iter_mut().flatten().for_each(|x| *x *= k);
        }
    }
    Ok(Direction { mode, tensors })
}

/// Something whose loss can be evaluated at its current parameters.
pub trait LossSurface<T: Float> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn loss(&self) -> Result<f64>;
}

/// Mean cross-entropy of an eval-mode model on a fixed labelled batch.
#[derive(Debug)]
pub struct ModelLoss<'a, T> {
    pub model: &'a mut Model<T>,
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<'a, T: Float> ModelLoss<'a, T> {
    pub fn new(model: &'a mut Model<T>, images: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if model.mode() != Mode::Eval {
            return Err(Error::WrongMode {
                expected: "landscape probing needs an eval-mode model",
            });
        }
        if images.shape().first() != Some(&labels.len()) || labels.is_empty() {
            return Err(Error::ParameterMismatch("landscape batch and labels disagree".into()));
        }
        Ok(ModelLoss { model, images, labels })
    }
}

/// Mean `-log softmax(logits)[label]` computed in 64-bit.
pub fn cross_entropy<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let classes = logits.shape()[1];
    let total: f64 = logits
        .data()
        .chunks(classes)
        .zip(labels)
        .map(|(row, &l)| {
            let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
            lse - row[l].as_f64()
        })
        .sum();
    total / labels.len() as f64
}

impl<T: Float> LossSurface<T> for ModelLoss<'_, T> {
    fn params(&self) -> &ParamStore<T> {
        &self.model.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.model.store
    }

    fn loss(&self) -> Result<f64> {
        let logits = self.model.logits(&self.images, &mut ForwardCtx::default())?;
        Ok(cross_entropy(&logits, &self.labels))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeSlice {
    pub r: f64,
    pub steps: usize,
    /// 1 or 2.
    pub dims: usize,
    /// Row-major: `values[i * steps + j]` is at `(u_i, v_j)` in 2D.
    pub values: Vec<f64>,
    pub base_loss: f64,
}

impl LandscapeSlice {
    /// Grid coordinates; the middle one is exactly zero.
    pub fn axis(&self) -> Vec<f64> {
        axis(self.r, self.steps)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.steps + j]
    }

    pub fn center(&self) -> f64 {
        let m = self.steps / 2;
        if self.dims == 1 {
            self.values[m]
        } else {
            self.at(m, m)
        }
    }
}

pub fn axis(r: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![0.0];
    }
    let half = (steps - 1) as f64;
    (0..steps).map(|i| r * (2.0 * i as f64 - half) / half).collect()
}

fn check_grid(r: f64, steps: usize) -> Result<()> {
    if steps == 0 || steps % 2 == 0 {
        return Err(Error::config(format!("steps must be odd so the origin is on the grid, got {steps}")));
    }
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::config(format!("r must be positive, got {r}")));
    }
    Ok(())
}

fn check_direction<T: Float>(store: &ParamStore<T>, d: &Direction) -> Result<()> {
    if d.tensors.len() != store.len() || store.iter().zip(&d.tensors).any(|(p, t)| p.value.numel() != t.len()) {
        return Err(Error::ParameterMismatch("direction does not match the parameter store".into()));
    }
    Ok(())
}

/// Sets `store = origin + sum_k c_k * dirs_k`. The offset is summed before
/// it is added so the order of the directions does not matter.
fn place<T: Float>(store: &mut ParamStore<T>, origin: &[Tensor<T>], dirs: &[(&Direction, f64)]) {
    for (k, (p, o)) in store.iter_mut().zip(origin).enumerate() {
        if dirs.iter().all(|(d, c)| *c == 0.0 || d.tensors[k].iter().all(|&x| x == 0.0)) {
            p.value.data_mut().copy_from_slice(o.data());
            continue;
        }
        for (i, (v, &o)) in p.value.data_mut().iter_mut().zip(o.data()).enumerate() {
            let offset: f64 = dirs.iter().map(|(d, c)| c * d.tensors[k][i]).sum();
            *v = T::lit(o.as_f64() + offset);
        }
    }
}

fn finite_or_inf(v: Result<f64>) -> Result<f64> {
    match v {
        Ok(x) if x.is_finite() => Ok(x),
        Ok(_) => Ok(f64::INFINITY),
        Err(Error::NonFiniteLoss(_)) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

fn probe<T: Float, S: LossSurface<T> + ?Sized>(
    surface: &mut S,
    dirs: &[&Direction],
    coords: impl Iterator<Item = Vec<f64>>,
) -> Result<(Vec<f64>, f64)> {
    for d in dirs {
        check_direction(surface.params(), d)?;
    }
    let origin: Vec<Tensor<T>> = surface.params().iter().map(|p| p.value.clone()).collect();
    let base = finite_or_inf(surface.loss())?;
    let mut values = Vec::new();
    let mut outcome = Ok(());
    for c in coords {
        if c.iter().all(|&x| x == 0.0) {
            values.push(base);
            continue;
        }
        let pairs: Vec<(&Direction, f64)> = dirs.iter().copied().zip(c).collect();
        place(surface.params_mut(), &origin, &pairs);
        match finite_or_inf(surface.loss()) {
            Ok(v) => values.push(v),
            Err(e) => {
                outcome = Err(e);
                break;
            }
        }
    }
    for (p, o) in surface.params_mut().iter_mut().zip(origin) {
        p.value = o;
    }
    outcome.map(|_| (values, base))
}

/// `loss(theta + t * dir)` for `t` on the uniform odd grid over `[-r, r]`.
pub fn loss_slice_1d<T: Float, S: LossSurface<T> + ?Sized>(surface: &mut S, dir: &Direction, r: f64, steps: usize) -> Result<LandscapeSlice> {
    check_grid(r, steps)?;
    let ax = axis(r, steps);
    let (values, base_loss) = probe(surface, &[dir], ax.iter().map(|&t| vec![t]))?;
    Ok(LandscapeSlice {
        r,
        steps,
        dims: 1,
        values,
        base_loss,
    })
}

/// `loss(theta + u * dir1 + v * dir2)` on a `steps x steps` grid.
pub fn loss_slice_2d<T: Float, S: LossSurface<T> + ?Sized>(
    surface: &mut S,
    dir1: &Direction,
    dir2: &Direction,
    r: f64,
    steps: usize,
) -> Result<LandscapeSlice> {
    check_grid(r, steps)?;
    let ax = axis(r, steps);
    let coords = ax.iter().flat_map(|&u| ax.iter().map(move |&v| vec![u, v]));
    let (values, base_loss) = probe(surface, &[dir1, dir2], coords)?;
    Ok(LandscapeSlice {
        r,
        steps,
        dims: 2,
        values,
        base_loss,
    })
}

/// Largest `loss - base_loss` over grid points other than the origin whose
/// distance from it is at most `radius_fraction * r`.
pub fn sharpness(slice: &LandscapeSlice, radius_fraction: f64) -> Result<f64> {
    if !(radius_fraction > 0.0 && radius_fraction <= 1.0) {
        return Err(Error::config(format!("radius_fraction must lie in (0, 1], got {radius_fraction}")));
    }
    let limit = radius_fraction * slice.r * (1.0 + 1e-12);
    let ax = slice.axis();
    let mut best: Option<f64> = None;
    let mut consider = |dist: f64, v: f64| {
        if dist > 0.0 && dist <= limit {
            let d = v - slice.base_loss;
            best = Some(best.map_or(d, |b: f64| b.max(d)));
        }
    };
    if slice.dims == 1 {
        for (t, &v) in ax.iter().zip(&slice.values) {
            consider(t.abs(), v);
        }
    } else {
        for (i, u) in ax.iter().enumerate() {
            for (j, v) in ax.iter().enumerate() {
                consider(u.hypot(*v), slice.at(i, j));
            }
        }
    }
    best.ok_or_else(|| Error::config(format!("no grid point within radius fraction {radius_fraction} of the origin")))
}

/// Provenance written above the CSV header row.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceMeta {
    pub normalization: Normalization,
    pub seed: u64,
    pub split: String,
}

/// `# key=value` metadata lines, then `t,loss` or `u,v,loss` rows.
pub fn slice_csv(slice: &LandscapeSlice, meta: &SliceMeta) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# base_loss={}", slice.base_loss);
    let _ = writeln!(s, "# r={}", slice.r);
    let _ = writeln!(s, "# steps={}", slice.steps);
    let _ = writeln!(s, "# normalization={}", meta.normalization.as_str());
    let _ = writeln!(s, "# seed={}", meta.seed);
    let _ = writeln!(s, "# split={}", meta.split);
    let ax = slice.axis();
    if slice.dims == 1 {
        s.push_str("t,loss\n");
        for (t, v) in ax.iter().zip(&slice.values) {
            let _ = writeln!(s, "{t},{v}");
        }
    } else {
        s.push_str("u,v,loss\n");
        for (i, u) in ax.iter().enumerate() {
            for (j, v) in ax.iter().enumerate() {
                let _ = writeln!(s, "{u},{v},{}", slice.at(i, j));
            }
        }
    }
    s
}

/// A standalone SVG: a polyline for 1D slices, a shaded grid for 2D.
pub fn slice_svg(slice: &LandscapeSlice) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 30.0;
    let finite: Vec<f64> = slice.values.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let unit = |v: f64| if v.is_finite() { ((v - lo) / span).clamp(0.0, 1.0) } else { 1.0 };
    let mut s = String::new();
    let total = SIZE + 2.0 * PAD;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if slice.dims == 1 {
        let n = slice.steps.max(2) - 1;
        let pts: Vec<String> = slice
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", PAD + SIZE * i as f64 / n as f64, PAD + SIZE * (1.0 - unit(v))))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="black" stroke-width="2" points="{}"/>"#, pts.join(" "));
    } else {
        let cell = SIZE / slice.steps as f64;
        for i in 0..slice.steps {
            for j in 0..slice.steps {
                let shade = (255.0 * (1.0 - unit(slice.at(i, j)))).round() as u8;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({shade},{shade},255)"/>"#,
                    PAD + j as f64 * cell,
                    PAD + (slice.steps - 1 - i) as f64 * cell,
                    cell,
                    cell
                );
            }
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="{:.0}" font-size="12" font-family="monospace">base={:.5} r={} steps={}</text>"#,
        PAD - 10.0,
        slice.base_loss,
        slice.r,
        slice.steps
    );
    s.push_str("</svg>\n");
    s
}
